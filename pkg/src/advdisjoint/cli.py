"""Command-line entry point: ``advdisjoint <subcommand> --config PATH [options]``.

Every subcommand validates the experiment config before doing any work,
writes its artifacts into ``--out`` and finishes with ``manifest.json``.
Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .attacks import AttackSpec, preset, run_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, attack_from_entry, load_config
from .data import Dataset, DatasetError, load_dataset
from .deployment import (AdversaryModel, DeploymentPolicy, SimulationError, simulate,
                         success_table_from_matrix)
from .evaluation import (TransferMatrix, clean_accuracies, ensemble_attack_eval, ensemble_campaign,
                         ensemble_size_curve, epsilon_sweep, evaluate_on_members,
                         export_gradient_signs, set_metrics, transfer_matrix)
from .models import ModelSet
from .training import TrainingDiverged, train_adversarial_baseline, train_disjoint_set

log = logging.getLogger("advdisjoint")

COMMANDS = ("train-disjoint", "train-at", "train-independent", "attack", "eval-matrix",
            "eval-ensemble", "eval-sweep", "export-gradients", "simulate", "report")
DEFAULT_SWEEP = (0.0196, 0.0392, 0.0588, 0.0784, 0.098, 0.1176, 0.1372, 0.156)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage problems here map to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("--checkpoint", default=None, help="model-set checkpoint to evaluate")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="advdisjoint", description="Train and evaluate adversarially-disjoint model sets.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "train-disjoint": "jointly train a disjoint set",
        "train-at": "train an R+FGSM adversarially-trained baseline set",
        "train-independent": "train members independently",
        "attack": "craft adversarial batches on chosen members",
        "eval-matrix": "transferability matrix per configured attack",
        "eval-ensemble": "ensemble-attack campaign over all member subsets",
        "eval-sweep": "PGD epsilon sweep",
        "export-gradients": "gradient-sign table and separation score",
        "simulate": "Monte-Carlo deployment simulation",
        "report": "render figures and a summary table from artifact directories",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "simulate":
            p.add_argument("--matrix", default=None, help="precomputed matrix JSON for fast mode")
        if name == "report":
            p.add_argument("--inputs", nargs="+", required=True, help="artifact directories to summarise")
    return parser


# --------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_jsonl(path: Path, rows: list[dict]) -> Path:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Run:
    """State shared by one CLI invocation: config, output dir, data and produced files."""

    def __init__(self, args, config: ExperimentConfig):
        self.args = args
        self.config = config
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self._train = self._test = None

    def add(self, path: Path) -> Path:
        self.artifacts.append(path)
        return path

    @property
    def cache_dir(self) -> Path | None:
        return self.out / "cache" if self.config.eval.get("cache", False) else None

    def train_data(self) -> Dataset:
        if self._train is None:
            self._train = load_dataset(self.config.dataset["train"], ad.default_dtype())
        return self._train

    def test_data(self) -> Dataset:
        if self._test is None:
            samples = self.config.eval.get("samples", 1000)
            self._test = load_dataset(self.config.dataset["test"], ad.default_dtype()).take(samples)
        return self._test

    def model_set(self) -> ModelSet:
        if self.args.checkpoint is None:
            raise UsageError(f"{self.args.command} needs --checkpoint")
        return load_checkpoint(self.args.checkpoint).astype(ad.default_dtype())

    def attacks(self) -> list[AttackSpec]:
        return self.config.attacks or [preset("pgd1")]

    def seed(self) -> int:
        return self.args.seed if self.args.seed is not None else self.config.train.seed


def _matrix_outputs(run: Run, model_set: ModelSet, spec: AttackSpec, data: Dataset, suffix: str) -> dict:
    matrix = transfer_matrix(model_set, spec, data, run.cache_dir)
    metrics = set_metrics(matrix, clean_accuracies(model_set, data))
    run.add(_write_json(run.out / f"matrix{suffix}.json", matrix.to_json()))
    matrix.write_csv(run.out / f"matrix{suffix}.csv")
    run.add(run.out / f"matrix{suffix}.csv")
    run.add(_write_json(run.out / f"metrics{suffix}.json", metrics.to_json()))
    return metrics.to_json()


def _suffix(spec: AttackSpec, specs: list[AttackSpec]) -> str:
    return "" if len(specs) == 1 else f"_{spec.label}"


# --------------------------------------------------------------- commands

def _train(run: Run, kind: str) -> None:
    cfg = run.config.train
    if kind == "independent":
        cfg = dataclasses.replace(cfg, variant="independent")
    model_config = run.config.model
    data = run.train_data()
    log_path = run.out / "train_log.jsonl"
    try:
        if kind == "at":
            eps, alpha = run.config.at_params
            model_set, history = train_adversarial_baseline(data, cfg, model_config, eps, alpha)
        else:
            model_set, history = train_disjoint_set(data, cfg, model_config)
    except TrainingDiverged as exc:
        _write_jsonl(log_path, exc.history)
        raise
    _write_jsonl(log_path, history)
    run.add(log_path)
    ckpt = run.out / "checkpoint.advset"
    save_checkpoint(model_set, ckpt, cfg.to_dict(),
                    {"train_seed": cfg.seed, "member_seeds": cfg.member_seeds()})
    run.add(ckpt)
    # Evaluate the reloaded set so a later eval-matrix on the checkpoint matches exactly.
    reloaded = load_checkpoint(ckpt).astype(ad.default_dtype())
    specs = run.attacks()
    _matrix_outputs(run, reloaded, specs[0], run.test_data(), "")


def cmd_attack(run: Run) -> None:
    model_set = run.model_set()
    data = run.test_data()
    sources = run.config.eval.get("attack_sources", [0])
    results = []
    for spec in run.attacks():
        model = model_set.member(sources[0]) if len(sources) == 1 else model_set.ensemble(sources)
        x_adv, success = run_attack(model, data.x, data.y, spec)
        path = run.add(run.out / f"adv_{spec.label}.npy")
        np.save(path, x_adv)
        results.append({"attack": spec.to_dict(), "sources": list(sources),
                        "success_rate": float(np.mean(success)) if len(success) else 0.0,
                        "member_accuracy": evaluate_on_members(model_set, x_adv, data.y).tolist()})
    run.add(_write_json(run.out / "attack.json", {"results": results}))


def cmd_eval_matrix(run: Run) -> None:
    model_set = run.model_set()
    specs = run.attacks()
    for spec in specs:
        _matrix_outputs(run, model_set, spec, run.test_data(), _suffix(spec, specs))


def cmd_eval_ensemble(run: Run) -> None:
    model_set = run.model_set()
    name = run.config.eval.get("ensemble_attack")
    spec = attack_from_entry({"preset": name}) if name else run.attacks()[0]
    rows = ensemble_campaign(model_set, spec, run.test_data(), run.cache_dir)
    curve = ensemble_size_curve(rows)
    run.add(_write_json(run.out / "ensemble.json", {"attack": spec.to_dict(), "rows": rows,
                                                    "size_curve": {str(k): v for k, v in curve.items()}}))
    path = run.out / "ensemble.csv"
    with open(path, "w") as f:
        f.write("subset,m," + ",".join(f"acc_{j}" for j in range(model_set.n)) + ",included_mean,excluded_mean\n")
        for r in rows:
            ex = "" if r["excluded_mean"] is None else repr(r["excluded_mean"])
            f.write(f"\"{' '.join(map(str, r['subset']))}\",{r['m']},"
                    + ",".join(repr(a) for a in r["accuracy"]) + f",{r['included_mean']!r},{ex}\n")
    run.add(path)


def cmd_eval_sweep(run: Run) -> None:
    model_set = run.model_set()
    eps_list = run.config.eval.get("sweep_eps", list(DEFAULT_SWEEP))
    steps = run.config.eval.get("sweep_steps", 100)
    out = epsilon_sweep(model_set, eps_list, run.test_data(), steps, run.seed(), run.cache_dir)
    rows = [{"eps": eps, **m.to_json()} for eps, m in out]
    run.add(_write_json(run.out / "sweep.json", {"steps": steps, "rows": rows}))
    path = run.out / "sweep.csv"
    with open(path, "w") as f:
        f.write("eps,blackbox_mean,blackbox_std,whitebox_mean,wholeset_mean\n")
        for r in rows:
            f.write(f"{r['eps']!r},{r['blackbox_mean']!r},{r['blackbox_std']!r},"
                    f"{r['whitebox_mean']!r},{r['wholeset_mean']!r}\n")
    run.add(path)


def cmd_export_gradients(run: Run) -> None:
    model_set = run.model_set()
    data = run.test_data()
    count = min(run.config.eval.get("gradient_count", 1000), len(data))
    path = run.out / "gradient_signs.csv"
    score = export_gradient_signs(model_set, data, count, path)
    run.add(path)
    run.add(_write_json(run.out / "separation.json", {"count": count, "members": model_set.n,
                                                      "separation_score": score}))


def cmd_simulate(run: Run) -> None:
    sim = run.config.simulate
    pol = sim.get("policy", {})
    adv = sim.get("adversary", {})
    try:
        spec = attack_from_entry({"preset": adv["attack"]}) if "attack" in adv else None
        adversary = AdversaryModel(adv.get("kind", "static"), tuple(adv.get("accessible", (0,))), spec)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"simulate/adversary: {exc}") from None
    seed = sim.get("seed", run.seed())
    trials = sim.get("trials", 10_000)
    mode = sim.get("mode", "fast")
    matrix_path = getattr(run.args, "matrix", None)
    model_set = None if matrix_path and mode == "fast" else run.model_set()
    n = model_set.n if model_set is not None else None
    try:
        if "live" in pol or n is None:
            policy = DeploymentPolicy(pol.get("kind", "uniform_random"), tuple(pol.get("live", (0,))),
                                      tuple(pol.get("release_order", ())), pol.get("threshold", 0.5),
                                      pol.get("window", 1000))
        else:
            policy = DeploymentPolicy(pol.get("kind", "uniform_random"), tuple(range(n)), (),
                                      pol.get("threshold", 0.5), pol.get("window", 1000))
    except ValueError as exc:
        raise ConfigError(f"simulate/policy: {exc}") from None
    if mode == "exact":
        report = simulate(policy, adversary, trials, seed, model_set=model_set, dataset=run.test_data())
    else:
        if matrix_path:
            matrix = TransferMatrix.from_json(json.loads(Path(matrix_path).read_text()))
        else:
            matrix = transfer_matrix(model_set, adversary.spec, run.test_data(), run.cache_dir)
            run.add(_write_json(run.out / "matrix.json", matrix.to_json()))
        ensembles = {}
        if len(adversary.accessible) > 1:
            if model_set is None:
                raise UsageError("an oracle adversary holding several members needs --checkpoint")
            ensembles[tuple(sorted(adversary.accessible))] = ensemble_attack_eval(
                model_set, adversary.accessible, adversary.spec, run.test_data(), run.cache_dir)
        report = simulate(policy, adversary, trials, seed, table=success_table_from_matrix(matrix, ensembles))
    run.add(_write_json(run.out / "simulation.json", report))


def cmd_report(run: Run) -> None:
    from .report import build_report

    sources = [Path(p) for p in run.args.inputs]
    missing = [str(p) for p in sources if not p.is_dir()]
    if missing:
        raise UsageError(f"report inputs are not directories: {missing}")
    for path in build_report(sources, run.out):
        run.add(path)


HANDLERS = {
    "train-disjoint": lambda run: _train(run, "disjoint"),
    "train-independent": lambda run: _train(run, "independent"),
    "train-at": lambda run: _train(run, "at"),
    "attack": cmd_attack,
    "eval-matrix": cmd_eval_matrix,
    "eval-ensemble": cmd_eval_ensemble,
    "eval-sweep": cmd_eval_sweep,
    "export-gradients": cmd_export_gradients,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def _manifest(run: Run, argv: list[str], wall: float) -> dict:
    import matplotlib

    inputs = {}
    if run.args.checkpoint:
        inputs["checkpoint"] = {"path": str(run.args.checkpoint), "sha256": _sha256(Path(run.args.checkpoint))}
    if getattr(run.args, "matrix", None):
        inputs["matrix"] = {"path": run.args.matrix, "sha256": _sha256(Path(run.args.matrix))}
    return {
        "command": run.args.command,
        "argv": argv,
        "config": run.config.raw,
        "config_hash": run.config.digest(),
        "seed": run.seed(),
        "precision": run.args.precision,
        "threads": run.args.threads,
        "inputs": inputs,
        "versions": {"advdisjoint": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "matplotlib": matplotlib.__version__},
        "wall_time_s": wall,
        "artifacts": {p.name: _sha256(p) for p in run.artifacts if p.exists()},
    }


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config).with_seed(args.seed)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")

    from threadpoolctl import threadpool_limits

    start = time.perf_counter()
    try:
        with ad.precision(args.precision), threadpool_limits(limits=args.threads):
            run = Run(args, config)
            HANDLERS[args.command](run)
            manifest = _manifest(run, argv, time.perf_counter() - start)
            _write_json(run.out / "manifest.json", manifest)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, SimulationError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
