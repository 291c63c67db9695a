"""Figures and summary tables rendered from CLI artifact directories.

Only the command-line report path imports this module; the library itself
never plots.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes independent of the matplotlib build date.
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_matrix(accuracy: np.ndarray, title: str, path: Path) -> Path:
    n = accuracy.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 * n + 2.2, 1.2 * n + 1.6))
    im = ax.imshow(accuracy, vmin=0.0, vmax=1.0, cmap="viridis")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{100 * accuracy[i, j]:.1f}", ha="center", va="center",
                    color="white" if accuracy[i, j] < 0.5 else "black", fontsize=9)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("target member")
    ax.set_ylabel("source member")
    ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="accuracy")
    return _save(fig, path)


def plot_sweep(rows: list[dict], path: Path) -> Path:
    eps = [r["eps"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(eps, [100 * r["blackbox_mean"] for r in rows], "o-", label="black-box")
    ax.plot(eps, [100 * r["wholeset_mean"] for r in rows], "s--", label="whole set")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ensemble_curve(curve: dict, path: Path) -> Path:
    m = sorted(int(k) for k in curve)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(m, [100 * curve[str(k)] for k in m], "o-")
    ax.set_xticks(m)
    ax.set_xlabel("members in attack ensemble")
    ax.set_ylabel("mean accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_training(log: list[dict], path: Path) -> Path:
    keys = [k for k in ("l_class", "l_angle", "l_transfer1", "l_transfer2", "l_total")
            if any(k in e for e in log)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in keys:
        ax.plot([e.get(k, np.nan) for e in log], label=k, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def build_report(sources: list[Path], out: Path) -> list[Path]:
    """Render every recognised artifact under ``sources`` into ``out``.

    Returns the written files; ``summary.csv`` lists one metric per row.
    """
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary: list[tuple[str, str, float]] = []
    for src in sources:
        tag = src.name or "run"
        for path in sorted(src.glob("matrix*.json")):
            d = json.loads(path.read_text())
            acc = np.asarray(d["accuracy"])
            name = d.get("attack", {}).get("name") or path.stem
            written.append(plot_matrix(acc, f"{tag}: {name}", out / f"{tag}_{path.stem}.png"))
        for path in sorted(src.glob("metrics*.json")):
            d = json.loads(path.read_text())
            for key in ("blackbox_mean", "blackbox_std", "whitebox_mean", "wholeset_mean", "clean_mean"):
                if d.get(key) is not None:
                    summary.append((f"{tag}/{path.stem}", key, float(d[key])))
        sweep = src / "sweep.json"
        if sweep.exists():
            rows = json.loads(sweep.read_text())["rows"]
            written.append(plot_sweep(rows, out / f"{tag}_sweep.png"))
            for r in rows:
                summary.append((f"{tag}/sweep", f"wholeset_mean@{r['eps']:g}", float(r["wholeset_mean"])))
        campaign = src / "ensemble.json"
        if campaign.exists():
            curve = json.loads(campaign.read_text())["size_curve"]
            written.append(plot_ensemble_curve(curve, out / f"{tag}_ensemble_curve.png"))
            for m, v in sorted(curve.items()):
                summary.append((f"{tag}/ensemble", f"mean_accuracy@m={m}", float(v)))
        train_log = src / "train_log.jsonl"
        if train_log.exists():
            log = [e for e in _read_jsonl(train_log) if "l_class" in e]
            if log:
                written.append(plot_training(log, out / f"{tag}_training.png"))
        sim = src / "simulation.json"
        if sim.exists():
            d = json.loads(sim.read_text())
            summary.append((f"{tag}/simulation", "success_rate", float(d["success_rate"])))
    table = out / "summary.csv"
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["artifact", "metric", "value"])
        for row in summary:
            w.writerow([row[0], row[1], repr(row[2])])
    written.append(table)
    return written
