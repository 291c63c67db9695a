"""Transferability matrices, set-level metrics and attack campaigns."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, loss_gradient, run_attack
from .data import Dataset
from .models import ModelSet, accuracy, predict


@dataclass
class TransferMatrix:
    """``accuracy[i][j]``: accuracy of member ``j`` on examples crafted on member ``i``."""

    accuracy: np.ndarray
    samples: int
    attack: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.accuracy.shape[0]

    def to_json(self) -> dict:
        return {"n": self.n, "samples": self.samples, "attack": self.attack,
                "accuracy": self.accuracy.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "TransferMatrix":
        return cls(np.array(d["accuracy"], dtype=np.float64), int(d["samples"]), d.get("attack", {}))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source"] + [f"target_{j}" for j in range(self.n)])
            for i, row in enumerate(self.accuracy):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path: str | Path, samples: int = 0, attack: dict | None = None) -> "TransferMatrix":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))[1:]
        return cls(np.array([[float(v) for v in r[1:]] for r in rows]), samples, attack or {})


@dataclass
class SetMetrics:
    blackbox_mean: float
    blackbox_std: float
    whitebox_mean: float
    wholeset_mean: float
    clean_accuracy: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"blackbox_mean": self.blackbox_mean, "blackbox_std": self.blackbox_std,
                "whitebox_mean": self.whitebox_mean, "wholeset_mean": self.wholeset_mean,
                "clean_accuracy": list(self.clean_accuracy),
                "clean_mean": float(np.mean(self.clean_accuracy)) if self.clean_accuracy else None}


def clean_accuracies(model_set: ModelSet, dataset: Dataset) -> list[float]:
    return [accuracy(model_set.member(i), dataset.x, dataset.y) for i in range(model_set.n)]


def set_metrics(matrix: TransferMatrix, clean: Sequence[float] = ()) -> SetMetrics:
    """Black-box (off-diagonal) mean/std, white-box (diagonal) mean and whole-set mean."""
    a = np.asarray(matrix.accuracy, dtype=np.float64)
    n = a.shape[0]
    off = a[~np.eye(n, dtype=bool)]
    diag = np.diag(a)
    whole = (diag.sum() + off.sum()) / (n * n)
    return SetMetrics(
        blackbox_mean=float(off.mean()) if off.size else math.nan,
        blackbox_std=float(off.std()) if off.size else math.nan,
        whitebox_mean=float(diag.mean()),
        wholeset_mean=float(whole),
        clean_accuracy=[float(c) for c in clean],
    )


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:20]


def craft(model_set: ModelSet, sources: Sequence[int], spec: AttackSpec, dataset: Dataset,
          cache_dir: str | Path | None = None) -> np.ndarray:
    """Adversarial examples from the fused-logit ensemble of ``sources`` (a single member if one).

    With ``cache_dir`` the batch is stored per (set, spec, data, sources) digest
    and reused by later campaigns.
    """
    sources = list(sources)
    path = None
    if cache_dir is not None:
        key = _digest(model_set.fingerprint(), spec.to_dict(), sources, dataset.x, dataset.y)
        path = Path(cache_dir) / f"adv-{key}.npy"
        if path.exists():
            return np.load(path)
    model = model_set.member(sources[0]) if len(sources) == 1 else model_set.ensemble(sources)
    x_adv, _ = run_attack(model, dataset.x, dataset.y, spec)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, x_adv)
    return x_adv


def evaluate_on_members(model_set: ModelSet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.array([accuracy(model_set.member(j), x, y) for j in range(model_set.n)])


def transfer_matrix(model_set: ModelSet, spec: AttackSpec, dataset: Dataset,
                    cache_dir: str | Path | None = None) -> TransferMatrix:
    """Row ``i`` reuses one crafted batch from member ``i`` against every member."""
    n = model_set.n
    acc = np.zeros((n, n))
    for i in range(n):
        x_adv = craft(model_set, [i], spec, dataset, cache_dir)
        acc[i] = evaluate_on_members(model_set, x_adv, dataset.y)
    return TransferMatrix(acc, len(dataset), spec.to_dict())


def ensemble_attack_eval(model_set: ModelSet, subset: Sequence[int], spec: AttackSpec, dataset: Dataset,
                         cache_dir: str | Path | None = None) -> np.ndarray:
    """Per-member accuracy on examples crafted against the mean-logit ensemble of ``subset``."""
    subset = sorted(set(subset))
    if not subset:
        raise ValueError("ensemble attack needs a non-empty member subset")
    if min(subset) < 0 or max(subset) >= model_set.n:
        raise ValueError(f"subset {subset} out of range for {model_set.n} members")
    x_adv = craft(model_set, subset, spec, dataset, cache_dir)
    return evaluate_on_members(model_set, x_adv, dataset.y)


def ensemble_campaign(model_set: ModelSet, spec: AttackSpec, dataset: Dataset,
                      cache_dir: str | Path | None = None) -> list[dict]:
    """Every non-empty member subset: its accuracy vector, split into included/excluded means."""
    rows = []
    for m in range(1, model_set.n + 1):
        for subset in itertools.combinations(range(model_set.n), m):
            acc = ensemble_attack_eval(model_set, subset, spec, dataset, cache_dir)
            inside = [acc[j] for j in subset]
            outside = [acc[j] for j in range(model_set.n) if j not in subset]
            rows.append({"subset": list(subset), "m": m, "accuracy": acc.tolist(),
                         "mean": float(acc.mean()),
                         "included_mean": float(np.mean(inside)),
                         "excluded_mean": float(np.mean(outside)) if outside else None})
    return rows


def ensemble_size_curve(campaign: Sequence[dict]) -> dict[int, float]:
    """Mean accuracy over all members and all subsets of each size ``m``."""
    sizes = sorted({r["m"] for r in campaign})
    return {m: float(np.mean([r["mean"] for r in campaign if r["m"] == m])) for m in sizes}


def epsilon_sweep(model_set: ModelSet, eps_list: Sequence[float], dataset: Dataset, steps: int = 100,
                  seed: int = 0, cache_dir: str | Path | None = None) -> list[tuple[float, SetMetrics]]:
    """PGD campaign per budget with ``steps`` iterations and step size ``2.5 * eps / steps``."""
    eps_list = [float(e) for e in eps_list]
    if any(e < 0 for e in eps_list) or eps_list != sorted(eps_list):
        raise ValueError("eps_list must be non-negative and ascending")
    clean = clean_accuracies(model_set, dataset)
    out = []
    for eps in eps_list:
        spec = AttackSpec("pgd", eps=eps, alpha=2.5 * eps / steps, steps=steps, rng_seed=seed,
                          name=f"pgd-sweep-{eps:g}")
        out.append((eps, set_metrics(transfer_matrix(model_set, spec, dataset, cache_dir), clean)))
    return out


# ------------------------------------------------------------ gradient signs

def gradient_signs(model_set: ModelSet, dataset: Dataset, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows of ``sign(grad_x L_i)`` for the first ``count`` images and every member.

    Returns ``(signs, image_ids, member_ids)``; zero gradient entries map to +1
    so every entry is ±1.
    """
    if count > len(dataset):
        raise ValueError(f"count {count} exceeds dataset size {len(dataset)}")
    x, y = dataset.x[:count], dataset.y[:count]
    rows, images, members = [], [], []
    for i in range(model_set.n):
        g = loss_gradient(model_set.member(i), x, y).reshape(count, -1)
        rows.append(np.where(g < 0, -1, 1).astype(np.int8))
        images.append(np.arange(count))
        members.append(np.full(count, i))
    return np.concatenate(rows), np.concatenate(images), np.concatenate(members)


def separation_score(signs: np.ndarray, image_ids: np.ndarray, member_ids: np.ndarray) -> float:
    """Leave-one-image-out 1-NN member identification accuracy under Hamming distance.

    Rows of the query's own image are excluded from the neighbour pool, so
    indistinguishable members score exactly ``1/n`` (ties go to the lowest row).
    """
    s = signs.astype(np.float32)
    d = s.shape[1]
    dist = (d - s @ s.T) / 2.0
    same_image = image_ids[:, None] == image_ids[None, :]
    dist[same_image] = np.inf
    nearest = np.argmin(dist, axis=1)
    return float(np.mean(member_ids[nearest] == member_ids))


def export_gradient_signs(model_set: ModelSet, dataset: Dataset, count: int,
                          path: str | Path | None = None) -> float:
    """Write the sign table as CSV (``image_id, member_id, s0, s1, ...``); return the separation score."""
    signs, images, members = gradient_signs(model_set, dataset, count)
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image_id", "member_id"] + [f"s{k}" for k in range(signs.shape[1])])
            for row, im, mem in zip(signs, images, members):
                w.writerow([int(im), int(mem)] + row.tolist())
    return separation_score(signs, images, members)
