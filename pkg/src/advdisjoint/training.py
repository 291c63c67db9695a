"""Joint training of adversarially-disjoint model sets and the baselines.

Each iteration feeds one mini-batch to every member. Input gradients used by the
angle and transfer penalties are taken in differentiable mode, so the penalties
send gradient into the parameters of the model whose gradient forms the
perturbation as well as the model being perturbed.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, rfgsm
from .autodiff import Tape, Tensor
from .data import Dataset, batches
from .models import ModelConfig, ModelSet, Params, Member, forward, init_model

log = logging.getLogger(__name__)

VARIANTS = ("joint", "add_one", "sampling", "angle_only", "transfer_only", "independent")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class DisjointTrainConfig:
    n: int = 3
    w1: float = 1.0
    w2: float = 0.5
    w3: float = 0.5
    w4: float = 0.5
    eps1: float = 6.0
    eps2: float = 0.031
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    angle_warmup_epochs: int = 8
    sample_size: int = 0
    variant: str = "joint"
    seed: int = 0
    init_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.init_seeds is not None:
            object.__setattr__(self, "init_seeds", tuple(int(s) for s in self.init_seeds))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("eps1 and eps2 must be non-negative")
        if self.sample_size < 0 or self.sample_size > self.n:
            raise ValueError("sample_size must be 0 (all members) or in [1, n]")
        if self.sample_size == 1:
            raise ValueError("sample_size 1 leaves no pairs for the transfer losses")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.init_seeds is not None and len(self.init_seeds) != self.n:
            raise ValueError("init_seeds must list one seed per member")

    def member_seeds(self) -> list[int]:
        if self.init_seeds is not None:
            return list(self.init_seeds)
        return [self.seed * 1000 + i for i in range(self.n)]

    def weights(self, epoch: int) -> tuple[float, float, float, float]:
        """Loss weights in effect during ``epoch`` for this variant."""
        w1, w2, w3, w4 = self.w1, self.w2, self.w3, self.w4
        if self.variant == "independent":
            return w1, 0.0, 0.0, 0.0
        if self.variant == "angle_only":
            return w1, w2, 0.0, 0.0
        if self.variant == "transfer_only":
            return w1, 0.0, w3, w4
        if epoch >= self.angle_warmup_epochs:
            w2 = 0.0
        return w1, w2, w3, w4

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["init_seeds"] = list(self.init_seeds) if self.init_seeds is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DisjointTrainConfig":
        return cls(**d)


@dataclass
class LossReport:
    epoch: int
    iteration: int
    lr: float
    l_class: float
    l_angle: float
    l_transfer1: float
    l_transfer2: float
    l_total: float
    weights: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    members: tuple[int, ...] = ()

    def recombined(self) -> float:
        w1, w2, w3, w4 = self.weights
        return w1 * self.l_class + w2 * self.l_angle + w3 * self.l_transfer1 + w4 * self.l_transfer2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = list(self.weights)
        d["members"] = list(self.members)
        return d


# ------------------------------------------------------------------- losses

def input_gradients(losses: Sequence[Tensor], x: Tensor, batch: int) -> list[Tensor]:
    """Per-sample input gradients of each member loss, recorded for double backprop.

    ``losses`` are batch means; scaling by the batch size makes each row the
    gradient of that sample's own loss, independent of the batch size.
    """
    return [ad.grad(ad.mul(L, float(batch)), [x], differentiable=True)[0] for L in losses]


def classification_loss(losses: Sequence[Tensor]) -> Tensor:
    """Sum of the members' cross-entropies."""
    total = losses[0]
    for L in losses[1:]:
        total = ad.add(total, L)
    return total


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two tensors flattened whole; 0 when either is (numerically) zero."""
    fa, fb = ad.reshape(a, (-1,)), ad.reshape(b, (-1,))
    na, nb = ad.l2_norm(fa), ad.l2_norm(fb)
    live = float(na.data >= ad.NORM_FLOOR and nb.data >= ad.NORM_FLOOR)
    if not live:
        return ad.mul(ad.sum_(ad.mul(fa, fb)), 0.0)
    return ad.div(ad.sum_(ad.mul(fa, fb)), ad.mul(na, nb))


def angular_deviation_loss(grads: Sequence[Tensor], pairs: Sequence[tuple[int, int]] | None = None) -> Tensor:
    """Mean pairwise cosine similarity of input gradients over unordered pairs."""
    if pairs is None:
        pairs = list(itertools.combinations(range(len(grads)), 2))
    if not pairs:
        raise ValueError("angular deviation needs at least two members")
    total = None
    for i, j in pairs:
        c = cosine(grads[i], grads[j])
        total = c if total is None else ad.add(total, c)
    return ad.mul(total, 1.0 / len(pairs))


def _transfer(models: Sequence[Callable[[Tensor], Tensor]], x: Tensor, y: np.ndarray,
              base: Sequence[Tensor], perturb: Sequence[Tensor], pairs) -> Tensor:
    total = None
    for i, j in pairs:
        shifted = ad.cross_entropy(models[i](ad.add(x, perturb[j])), y)
        term = ad.maximum(ad.sub(shifted, base[i]), 0.0)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(pairs))


def transfer_loss_l2(models, x: Tensor, y: np.ndarray, base: Sequence[Tensor],
                     grads: Sequence[Tensor], eps1: float, pairs) -> Tensor:
    """Mean over ordered pairs ``(i, j)`` of ``max(L_i(x + eps1 * g_j) - L_i(x), 0)``."""
    return _transfer(models, x, y, base, [None if g is None else ad.mul(g, eps1) for g in grads], pairs)


def transfer_loss_linf(models, x: Tensor, y: np.ndarray, base: Sequence[Tensor],
                       grads: Sequence[Tensor], eps2: float, pairs) -> Tensor:
    """As :func:`transfer_loss_l2` with the perturbation ``eps2 * tanh(g_j)``."""
    return _transfer(models, x, y, base, [None if g is None else ad.mul(ad.tanh(g), eps2) for g in grads],
                     pairs)


def ordered_pairs(members: Sequence[int]) -> list[tuple[int, int]]:
    return [(i, j) for i in members for j in members if i != j]


def total_loss(params: Sequence[Params], model_config: ModelConfig, xb: np.ndarray, yb: np.ndarray,
               config: DisjointTrainConfig, epoch: int = 0,
               active: Sequence[int] | None = None,
               pair_filter: Callable[[int, int], bool] | None = None) -> tuple[Tensor, LossReport]:
    """Weighted objective ``w1*L_class + w2*L_angle + w3*L_transfer1 + w4*L_transfer2``.

    Must be called inside an active :class:`Tape`. ``active`` restricts the
    angle and transfer terms to a subset of members (sampling); the
    classification term always covers every member. Terms whose weight is zero
    are not computed and are reported as 0.
    """
    n = len(params)
    w = config.weights(epoch)
    active = list(range(n)) if active is None else list(active)
    need_grads = n >= 2 and (w[1] > 0 or w[2] > 0 or w[3] > 0)
    x = Tensor(xb, requires_grad=need_grads, dtype=xb.dtype)
    models = [Member(p, model_config) for p in params]
    losses = [ad.cross_entropy(models[i](x), yb) for i in range(n)]
    l_class = classification_loss(losses)
    zero = Tensor(np.zeros((), dtype=xb.dtype))
    l_angle = l_t1 = l_t2 = zero
    if need_grads:
        grads: dict[int, Tensor] = dict(zip(active, input_gradients([losses[i] for i in active], x, len(xb))))
        upairs = [(i, j) for i, j in itertools.combinations(active, 2)
                  if pair_filter is None or pair_filter(i, j)]
        opairs = [(i, j) for i, j in ordered_pairs(active) if pair_filter is None or pair_filter(i, j)]
        gl = [grads.get(k) for k in range(n)]
        if w[1] > 0 and upairs:
            l_angle = angular_deviation_loss(gl, upairs)
        if w[2] > 0 and opairs:
            l_t1 = transfer_loss_l2(models, x, yb, losses, gl, config.eps1, opairs)
        if w[3] > 0 and opairs:
            l_t2 = transfer_loss_linf(models, x, yb, losses, gl, config.eps2, opairs)
    total = ad.mul(l_class, w[0])
    for wk, term in ((w[1], l_angle), (w[2], l_t1), (w[3], l_t2)):
        if wk > 0:
            total = ad.add(total, ad.mul(term, wk))
    report = LossReport(epoch, 0, 0.0, float(l_class.data), float(l_angle.data), float(l_t1.data),
                        float(l_t2.data), float(total.data), w, tuple(active))
    return total, report


# ---------------------------------------------------------------- optimiser

def cyclic_lr(t: float, total: float, peak: float) -> float:
    """Triangular schedule: 0 at ``t=0``, ``peak`` at ``total/2``, 0 at ``total``."""
    if total <= 0:
        return 0.0
    return float(np.interp(t, [0.0, total / 2.0, total], [0.0, peak, 0.0]))


class SGD:
    """SGD with momentum and L2 weight decay added to the gradient."""

    def __init__(self, params: Sequence[Tensor], momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, grads: Sequence[Tensor], lr: float) -> None:
        for k, (p, g) in enumerate(zip(self.params, grads)):
            d = g.data + self.weight_decay * p.data
            buf = self.buffers[k]
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[k] = buf
            p.data = (p.data - lr * buf).astype(p.data.dtype)


# ---------------------------------------------------------------- training

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def train_disjoint_set(data: Dataset, config: DisjointTrainConfig, model_config: ModelConfig,
                       base: ModelSet | None = None,
                       on_iteration: Callable[[LossReport], None] | None = None,
                       on_epoch: Callable[[int, ModelSet], None] | None = None
                       ) -> tuple[ModelSet, list[dict]]:
    """Train ``config.n`` members jointly under the weighted objective.

    ``variant="add_one"`` requires ``base`` with ``n - 1`` trained members;
    they are frozen and only the new member is optimised, with transfer pairs
    restricted to those involving it. Returns the trained set and a per-
    iteration log of loss components, learning rate and wall time.
    """
    variant = config.variant
    if variant != "independent" and config.n < 2 and (config.w2 or config.w3 or config.w4):
        raise ValueError("disjoint variants need n >= 2")
    seeds = config.member_seeds()
    if variant == "add_one":
        if base is None or base.n != config.n - 1:
            raise ValueError("add_one needs a base set with n - 1 members")
        params = [{k: Tensor(v.data.copy(), requires_grad=True) for k, v in m.items()} for m in base.members]
        params.append(init_model(model_config, seeds[-1]))
        trainable = [config.n - 1]
    else:
        params = [init_model(model_config, s) for s in seeds]
        trainable = list(range(config.n))
    new = config.n - 1
    pair_filter = (lambda i, j: new in (i, j)) if variant == "add_one" else None

    names = [name for name in params[0]]
    flat = [params[m][k] for m in trainable for k in names]
    opt = SGD(flat, config.momentum, config.weight_decay)
    per_epoch = math.ceil(len(data) / config.batch_size)
    total_iters = per_epoch * config.epochs
    order_rng = _rng(config.seed, 1)
    sample_rng = _rng(config.seed, 2)
    history: list[dict] = []
    start = time.perf_counter()
    it = 0
    for epoch in range(config.epochs):
        for idx in batches(len(data), config.batch_size, order_rng):
            xb, yb = data.x[idx], data.y[idx]
            active = None
            if variant == "sampling" or (config.sample_size and config.sample_size < config.n):
                k = config.sample_size or min(3, config.n)
                active = sorted(sample_rng.choice(config.n, size=k, replace=False).tolist())
            lr = cyclic_lr(it + 1, total_iters, config.peak_lr)
            with Tape():
                loss, report = total_loss(params, model_config, xb, yb, config, epoch, active, pair_filter)
                grads = ad.grad(loss, flat)
            if not np.isfinite(report.l_total):
                history.append(report.to_dict())
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {it}", history)
            opt.step(grads, lr)
            report.iteration = it
            report.lr = lr
            entry = report.to_dict()
            entry["wall_time"] = time.perf_counter() - start
            history.append(entry)
            if on_iteration is not None:
                on_iteration(report)
            it += 1
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in history[-1].items()
                                         if k.startswith("l_")})
        if on_epoch is not None:
            on_epoch(epoch, _as_set(model_config, params, variant))
    return _as_set(model_config, params, variant), history


def _as_set(model_config: ModelConfig, params: list[Params], variant: str) -> ModelSet:
    provenance = "independent" if variant == "independent" else "disjoint"
    return ModelSet(model_config, params, provenance)


def train_independent_set(data: Dataset, config: DisjointTrainConfig,
                          model_config: ModelConfig) -> tuple[ModelSet, list[dict]]:
    """Plain classification training of ``n`` members sharing the batch stream."""
    return train_disjoint_set(data, dataclasses.replace(config, variant="independent"), model_config)


def train_adversarial_baseline(data: Dataset, config: DisjointTrainConfig, model_config: ModelConfig,
                               eps: float = 0.031, alpha: float | None = None
                               ) -> tuple[ModelSet, list[dict]]:
    """Fast adversarial training: each member learns on R+FGSM examples of itself.

    Members are trained one at a time with their own init seed and data order;
    there are no cross-member terms.
    """
    alpha = eps / 2 if alpha is None else alpha
    seeds = config.member_seeds()
    members: list[Params] = []
    history: list[dict] = []
    per_epoch = math.ceil(len(data) / config.batch_size)
    total_iters = per_epoch * config.epochs
    start = time.perf_counter()
    for m, seed in enumerate(seeds):
        params = init_model(model_config, seed)
        names = list(params)
        flat = [params[k] for k in names]
        opt = SGD(flat, config.momentum, config.weight_decay)
        order_rng = _rng(seed, 1)
        noise_rng = _rng(seed, 3)
        member = Member(params, model_config)
        it = 0
        for epoch in range(config.epochs):
            for idx in batches(len(data), config.batch_size, order_rng):
                xb, yb = data.x[idx], data.y[idx]
                spec = AttackSpec("rfgsm", eps=eps, alpha=alpha)
                xa = rfgsm(member, xb, yb, spec, noise=noise_rng.standard_normal(xb.shape))
                lr = cyclic_lr(it + 1, total_iters, config.peak_lr)
                with Tape():
                    loss = ad.cross_entropy(forward(params, Tensor(xa), model_config), yb)
                    grads = ad.grad(loss, flat)
                value = float(loss.data)
                entry = {"member": m, "epoch": epoch, "iteration": it, "lr": lr, "l_class": value,
                         "wall_time": time.perf_counter() - start}
                history.append(entry)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss for member {m} at iteration {it}", history)
                opt.step(grads, lr)
                it += 1
        members.append(params)
    return ModelSet(model_config, members, "adversarially_trained"), history
