"""Monte-Carlo simulation of randomised and staged deployment of a model set.

A trial picks a victim among the live members, draws one test input and asks
whether the adversary's example for that input (crafted on the members it
holds) fools the victim. In fast mode the per-victim success probability comes
from a precomputed accuracy table; in exact mode crafted batches are
evaluated on the live models.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attacks import AttackSpec, preset
from .data import Dataset
from .evaluation import TransferMatrix, craft
from .models import ModelSet, predict

POLICY_KINDS = ("uniform_random", "staged_release")
ADVERSARY_KINDS = ("static", "skilled", "oracle")
TRIAL_CHUNK = 4096


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class DeploymentPolicy:
    kind: str = "uniform_random"
    live: tuple[int, ...] = (0,)
    release_order: tuple[int, ...] = ()
    threshold: float = 0.5
    window: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "live", tuple(self.live))
        object.__setattr__(self, "release_order", tuple(self.release_order))
        if self.kind not in POLICY_KINDS:
            raise SimulationError(f"unknown policy kind {self.kind!r}")
        if not self.live:
            raise SimulationError("a policy needs at least one live member")
        if not 0 < self.threshold <= 1:
            raise SimulationError("threshold must lie in (0, 1]")
        if len(set(self.live) | set(self.release_order)) != len(self.live) + len(self.release_order):
            raise SimulationError("live and release_order members must be distinct")

    @classmethod
    def uniform(cls, n: int) -> "DeploymentPolicy":
        return cls("uniform_random", tuple(range(n)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["live"], d["release_order"] = list(self.live), list(self.release_order)
        return d


def default_spec(kind: str) -> AttackSpec:
    """Static adversaries run PGD; skilled ones reach for momentum attacks that transfer better."""
    return preset("mifgsm2") if kind == "skilled" else preset("pgd1")


@dataclass(frozen=True)
class AdversaryModel:
    kind: str = "static"
    accessible: tuple[int, ...] = (0,)
    attack: AttackSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "accessible", tuple(self.accessible))
        if self.kind not in ADVERSARY_KINDS:
            raise SimulationError(f"unknown adversary kind {self.kind!r}")
        if not self.accessible or len(set(self.accessible)) != len(self.accessible):
            raise SimulationError("accessible members must be non-empty and distinct")
        if self.kind != "oracle" and len(self.accessible) != 1:
            raise SimulationError(f"a {self.kind} adversary holds exactly one member")

    @property
    def spec(self) -> AttackSpec:
        return self.attack if self.attack is not None else default_spec(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "accessible": list(self.accessible), "attack": self.spec.to_dict()}


@dataclass
class PolicyState:
    live: list[int]
    queue: list[int]
    retired: list[int] = field(default_factory=list)
    window: deque = field(default_factory=deque)
    threshold: float = 0.5
    window_size: int = 1000
    terminal: bool = False
    releases: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, policy: DeploymentPolicy) -> "PolicyState":
        return cls(list(policy.live), list(policy.release_order), threshold=policy.threshold,
                   window=deque(maxlen=policy.window), window_size=policy.window)

    @property
    def released(self) -> set[int]:
        return set(self.live) | set(self.retired)

    def observe(self, victim: int, success: bool) -> None:
        self.window.append((victim, bool(success)))

    def observed_rate(self) -> float | None:
        if len(self.window) < self.window_size:
            return None
        return sum(s for _, s in self.window) / len(self.window)

    def copy(self) -> "PolicyState":
        return dataclasses.replace(self, live=list(self.live), queue=list(self.queue),
                                   retired=list(self.retired),
                                   window=deque(self.window, maxlen=self.window.maxlen),
                                   releases=list(self.releases))


def staged_release_step(state: PolicyState, observed_rate: float) -> PolicyState:
    """Release the next member and retire the most-attacked live one when the rate exceeds the threshold.

    "Most attacked" counts successful attacks per live member in the current
    window (ties: lowest index). The window restarts after a change. With an
    empty release queue the state is flagged terminal instead.
    """
    if observed_rate <= state.threshold:
        return state
    nxt = state.copy()
    if not nxt.queue:
        nxt.terminal = True
        return nxt
    hits = Counter(v for v, s in nxt.window if s and v in nxt.live)
    worst = min(nxt.live, key=lambda m: (-hits.get(m, 0), m))
    newcomer = nxt.queue.pop(0)
    nxt.live.remove(worst)
    nxt.retired.append(worst)
    nxt.live.append(newcomer)
    nxt.window.clear()
    nxt.releases.append({"released": newcomer, "retired": worst, "rate": observed_rate})
    return nxt


# ------------------------------------------------------------ success tables

def success_table_from_matrix(matrix: TransferMatrix | np.ndarray,
                              ensembles: Mapping[tuple[int, ...], Sequence[float]] | None = None
                              ) -> dict[tuple[int, ...], np.ndarray]:
    """Map each source tuple to per-victim attack success probabilities (1 - accuracy)."""
    acc = matrix.accuracy if isinstance(matrix, TransferMatrix) else np.asarray(matrix)
    table = {(i,): 1.0 - np.asarray(acc[i], dtype=np.float64) for i in range(acc.shape[0])}
    for subset, row in (ensembles or {}).items():
        table[tuple(sorted(subset))] = 1.0 - np.asarray(row, dtype=np.float64)
    return table


def closed_form_success(table: Mapping[tuple[int, ...], np.ndarray], policy: DeploymentPolicy,
                        adversary: AdversaryModel) -> float:
    """Expected success under uniform deployment: the mean over live victims of the table row."""
    row = _row(table, adversary)
    return float(np.mean([row[v] for v in policy.live]))


def _row(table, adversary: AdversaryModel) -> np.ndarray:
    key = tuple(sorted(adversary.accessible))
    if key not in table:
        raise SimulationError(f"no success probabilities for source members {list(key)}")
    return table[key]


def binomial_ci(successes: int, trials: int, z: float = 1.96) -> tuple[float, float, float]:
    p = successes / trials
    se = math.sqrt(p * (1 - p) / trials)
    return se, max(0.0, p - z * se), min(1.0, p + z * se)


# ----------------------------------------------------------------- simulate

def simulate(policy: DeploymentPolicy, adversary: AdversaryModel, trials: int, seed: int = 0,
             table: Mapping[tuple[int, ...], np.ndarray] | None = None,
             model_set: ModelSet | None = None, dataset: Dataset | None = None) -> dict:
    """Run ``trials`` deployment rounds and report the attack success rate.

    Pass ``table`` (see :func:`success_table_from_matrix`) for fast mode, or
    ``model_set`` and ``dataset`` for exact mode, in which the adversary's
    examples are crafted once per dataset image and judged by the victim.
    """
    if trials < 1:
        raise SimulationError("trials must be >= 1")
    released = set(policy.live)
    if not set(adversary.accessible) <= released:
        raise SimulationError(f"adversary holds unreleased members {sorted(set(adversary.accessible) - released)}")
    if table is None:
        if model_set is None or dataset is None:
            raise SimulationError("need a success table (fast mode) or models plus data (exact mode)")
        mode = "exact"
        x_adv = craft(model_set, adversary.accessible, adversary.spec, dataset)
        fooled = {v: predict(model_set.member(v), x_adv) != dataset.y
                  for v in range(model_set.n)}
    else:
        mode = "fast"
        row = _row(table, adversary)

    def outcome(rng: np.random.Generator, victims: np.ndarray) -> np.ndarray:
        if mode == "fast":
            return rng.random(len(victims)) < row[victims]
        picks = rng.integers(0, len(dataset), len(victims))
        return np.array([fooled[int(v)][k] for v, k in zip(victims, picks)], dtype=bool)

    victim_counts: Counter = Counter()
    successes = 0
    if policy.kind == "uniform_random":
        live = np.array(policy.live)
        for c, lo in enumerate(range(0, trials, TRIAL_CHUNK)):
            size = min(TRIAL_CHUNK, trials - lo)
            rng = np.random.default_rng([seed, c])
            victims = live[rng.integers(0, len(live), size)]
            hit = outcome(rng, victims)
            successes += int(hit.sum())
            victim_counts.update(victims.tolist())
        events: list[dict] = []
        terminal = False
    else:
        rng = np.random.default_rng([seed, 0])
        state = PolicyState.start(policy)
        for _ in range(trials):
            v = state.live[int(rng.integers(0, len(state.live)))]
            hit = bool(outcome(rng, np.array([v]))[0])
            successes += hit
            victim_counts[v] += 1
            state.observe(v, hit)
            rate = state.observed_rate()
            if rate is not None and not state.terminal:
                state = staged_release_step(state, rate)
        events = state.releases
        terminal = state.terminal

    se, lo, hi = binomial_ci(successes, trials)
    report = {
        "mode": mode,
        "policy": policy.to_dict(),
        "adversary": adversary.to_dict(),
        "trials": trials,
        "seed": seed,
        "successes": successes,
        "success_rate": successes / trials,
        "std_error": se,
        "ci95": [lo, hi],
        "victim_counts": {str(k): int(victim_counts[k]) for k in sorted(victim_counts)},
        "events": events,
        "terminal": terminal,
    }
    if mode == "fast" and policy.kind == "uniform_random":
        report["closed_form"] = closed_form_success(table, policy, adversary)
    return report
