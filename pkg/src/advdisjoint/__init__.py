"""Adversarially-disjoint model sets: training, attacks, evaluation and deployment simulation."""

__version__ = "0.1.0"
