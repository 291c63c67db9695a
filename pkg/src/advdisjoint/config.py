"""Experiment configuration: a JSON document validated before any compute starts."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

import jsonschema

from .attacks import AttackSpec, TABLE1
from .models import ModelConfig
from .training import DisjointTrainConfig


class ConfigError(ValueError):
    pass


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


_NUM = {"type": "number"}
_INT = {"type": "integer"}

_SOURCE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["cifar10", "idx", "blobs", "arcs", "templates"]},
        "path": {"type": "string"},
        "split": {"enum": ["train", "test"]},
        "limit": {"type": ["integer", "null"], "minimum": 1},
        "images": {"type": "string"},
        "labels": {"type": "string"},
        "classes": {"type": "integer", "minimum": 2},
        "n": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "minimum": 0},
        "seed": _INT,
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "amplitude": _NUM,
        "cell": {"type": "integer", "minimum": 1},
        "template_seed": _INT,
    },
}

_ATTACK_PROPS = {name: {} for name in _fields(AttackSpec)}
_ATTACK_PROPS["preset"] = {"enum": sorted(TABLE1)}

_POLICY = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["uniform_random", "staged_release"]},
        "live": {"type": "array", "items": _INT},
        "release_order": {"type": "array", "items": _INT},
        "threshold": _NUM,
        "window": {"type": "integer", "minimum": 1},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train", "test"],
            "properties": {"train": _SOURCE, "test": _SOURCE},
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: {} for name in _fields(ModelConfig)},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {**{name: {} for name in _fields(DisjointTrainConfig)},
                           "at_eps": _NUM, "at_alpha": {"type": ["number", "null"]}},
        },
        "attacks": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": False, "properties": _ATTACK_PROPS},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": ["integer", "null"], "minimum": 1},
                "cache": {"type": "boolean"},
                "sweep_eps": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "sweep_steps": {"type": "integer", "minimum": 1},
                "gradient_count": {"type": "integer", "minimum": 1},
                "ensemble_attack": {"type": "string"},
                "attack_sources": {"type": "array", "items": _INT},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "policy": _POLICY,
                "adversary": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["static", "skilled", "oracle"]},
                        "accessible": {"type": "array", "items": _INT},
                        "attack": {"type": "string"},
                    },
                },
                "trials": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["fast", "exact"]},
            },
        },
    },
}


@dataclasses.dataclass
class ExperimentConfig:
    raw: dict

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(self.raw["model"])

    @property
    def train(self) -> DisjointTrainConfig:
        d = {k: v for k, v in self.raw.get("train", {}).items() if not k.startswith("at_")}
        return DisjointTrainConfig.from_dict(d)

    @property
    def at_params(self) -> tuple[float, float | None]:
        t = self.raw.get("train", {})
        return t.get("at_eps", 0.031), t.get("at_alpha")

    @property
    def attacks(self) -> list[AttackSpec]:
        return [attack_from_entry(a) for a in self.raw.get("attacks", [])]

    @property
    def eval(self) -> dict:
        return self.raw.get("eval", {})

    @property
    def simulate(self) -> dict:
        return self.raw.get("simulate", {})

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        """Copy with ``seed`` applied to training, every attack and the simulation."""
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw.setdefault("train", {})["seed"] = seed
        for a in raw.get("attacks", []):
            a["rng_seed"] = seed
        if "simulate" in raw:
            raw["simulate"]["seed"] = seed
        return ExperimentConfig(raw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


SCHEMA["properties"]["simulate"]["properties"]["seed"] = _INT


def attack_from_entry(entry: dict) -> AttackSpec:
    entry = dict(entry)
    name = entry.pop("preset", None)
    if name is not None:
        base = TABLE1[name]
        return base.replace(**entry) if entry else base
    return AttackSpec.from_dict(entry)


def validate(raw: dict) -> ExperimentConfig:
    """Schema check plus construction of every typed section; raises :class:`ConfigError`."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = ExperimentConfig(raw)
    try:
        cfg.model
        cfg.train
        cfg.attacks
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for split in ("train", "test"):
        src = raw["dataset"][split]
        need = {"cifar10": ["path"], "idx": ["images", "labels"]}.get(src["kind"], [])
        missing = [k for k in need if k not in src]
        if missing:
            raise ConfigError(f"dataset/{split}: {src['kind']} source needs {missing}")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate(raw)
