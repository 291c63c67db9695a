"""White-box attacks: FGSM, FGM, R+FGSM, PGD, MI-FGSM, Carlini-Wagner and EAD.

Every attack takes a classifier (any callable mapping an input tensor to
logits, including :class:`~advdisjoint.models.Ensemble`), a batch ``x`` in
``[0, 1]`` and integer labels ``y``, and returns a numpy batch of the same
shape. Pixels are clamped to ``[0, 1]`` after every step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

KINDS = ("fgsm", "fgm", "rfgsm", "pgd", "mifgsm", "cw", "ead")
LINF_KINDS = ("fgsm", "rfgsm", "pgd", "mifgsm")
L2_KINDS = ("fgm",)

Classifier = Callable[[Tensor], Tensor]


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration. Fields a kind does not use are kept but ignored."""

    kind: str
    eps: float = 0.031
    alpha: float = 0.0
    steps: int = 1
    mu: float = 1.0
    c: float = 1.0
    kappa: float = 0.0
    beta: float = 0.01
    decision_rule: str = "EN"
    max_iterations: int = 1000
    learning_rate: float = 0.01
    optimizer: str = "adam"
    target: int | None = None
    rng_seed: int = 0
    random_start: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise AttackError("eps must be non-negative")
        if self.kappa < 0:
            raise AttackError("kappa must be non-negative")
        if self.kind in ("pgd", "mifgsm") and self.steps < 1:
            raise AttackError(f"{self.kind} needs steps >= 1")
        if self.kind in ("cw", "ead") and self.max_iterations < 1:
            raise AttackError(f"{self.kind} needs max_iterations >= 1")
        if self.decision_rule not in ("EN", "L1"):
            raise AttackError(f"unknown decision rule {self.decision_rule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise AttackError(f"unknown optimizer {self.optimizer!r}")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def replace(self, **changes) -> "AttackSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise AttackError(f"unknown attack fields: {sorted(unknown)}")
        return cls(**d)


TABLE1: dict[str, AttackSpec] = {
    "fgsm": AttackSpec("fgsm", eps=0.031, name="fgsm"),
    "fgm": AttackSpec("fgm", eps=1.0, name="fgm"),
    "rfgsm": AttackSpec("rfgsm", eps=0.031, alpha=0.031 / 2, name="rfgsm"),
    "pgd1": AttackSpec("pgd", eps=0.031, alpha=0.0078, steps=7, name="pgd1"),
    "pgd2": AttackSpec("pgd", eps=0.031, alpha=0.0078, steps=20, name="pgd2"),
    "mifgsm1": AttackSpec("mifgsm", eps=0.031, alpha=0.0031, mu=1.0, steps=10, name="mifgsm1"),
    "mifgsm2": AttackSpec("mifgsm", eps=0.031, alpha=0.0031, mu=1.0, steps=20, name="mifgsm2"),
    "cw1": AttackSpec("cw", c=1.0, kappa=0.0, max_iterations=1000, learning_rate=0.01,
                      optimizer="adam", name="cw1"),
    "cw2": AttackSpec("cw", c=1.0, kappa=40.0, max_iterations=1000, learning_rate=0.01,
                      optimizer="adam", name="cw2"),
    "ead1": AttackSpec("ead", c=20.0, kappa=0.0, beta=0.01, decision_rule="EN",
                       max_iterations=1000, learning_rate=0.01, optimizer="sgd", name="ead1"),
    "ead2": AttackSpec("ead", c=10.0, kappa=55.0, beta=0.01, decision_rule="EN",
                       max_iterations=1000, learning_rate=0.01, optimizer="sgd", name="ead2"),
}


def preset(name: str, **changes) -> AttackSpec:
    try:
        spec = TABLE1[name]
    except KeyError:
        raise AttackError(f"unknown preset {name!r}; known: {sorted(TABLE1)}") from None
    return spec.replace(**changes) if changes else spec


# ------------------------------------------------------------------ helpers

def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(len(a), -1)


def _per_sample(v: np.ndarray, shape) -> np.ndarray:
    return v.reshape((len(v),) + (1,) * (len(shape) - 1))


def loss_gradient(model: Classifier, x: np.ndarray, y: np.ndarray,
                  target: int | None = None) -> np.ndarray:
    """Input gradient of the summed per-sample cross-entropy.

    For a targeted attack the sign is flipped so that ascending the returned
    direction moves toward ``target``.
    """
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    with Tape():
        logits = model(xt)
        if target is None:
            loss = ad.cross_entropy(logits, y)
        else:
            loss = ad.neg(ad.cross_entropy(logits, np.full(len(x), target)))
        loss = ad.mul(loss, float(len(x)))
        (g,) = ad.grad(loss, [xt])
    return g.data


def _project_linf(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def soft_threshold(delta: np.ndarray, beta: float) -> np.ndarray:
    """Elementwise shrinkage: zero inside ``[-beta, beta]``, shifted toward 0 outside."""
    return np.sign(delta) * np.maximum(np.abs(delta) - beta, 0.0)


def margin(logits: np.ndarray, y: np.ndarray, target: int | None = None) -> np.ndarray:
    """True-class logit minus best other logit (targeted: best non-target minus target)."""
    logits = np.asarray(logits)
    idx = np.arange(len(logits))
    if target is None:
        ref = logits[idx, y]
        other = logits.copy()
        other[idx, y] = -np.inf
        return ref - other.max(axis=1)
    other = logits.copy()
    other[:, target] = -np.inf
    return other.max(axis=1) - logits[:, target]


# ------------------------------------------------------------- single step

def fgsm(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.eps == 0:
        return x.copy()
    g = loss_gradient(model, x, y, spec.target)
    return np.clip(x + spec.eps * np.sign(g), 0.0, 1.0).astype(x.dtype)


def fgm(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """ℓ2 step ``eps * g / ||g||_2`` per sample; zero-gradient samples are left unchanged."""
    if spec.eps == 0:
        return x.copy()
    g = loss_gradient(model, x, y, spec.target).astype(np.float64)
    norms = np.linalg.norm(_flat(g), axis=1)
    scale = np.where(norms >= ad.NORM_FLOOR, spec.eps / np.maximum(norms, ad.NORM_FLOOR), 0.0)
    return np.clip(x + _per_sample(scale, x.shape) * g, 0.0, 1.0).astype(x.dtype)


def rfgsm(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
          noise: np.ndarray | None = None) -> np.ndarray:
    if spec.alpha > spec.eps:
        raise AttackError(f"rfgsm needs alpha <= eps (got alpha={spec.alpha}, eps={spec.eps})")
    if noise is None:
        noise = np.random.default_rng(spec.rng_seed).standard_normal(x.shape)
    x1 = np.clip(x + spec.alpha * np.sign(noise), 0.0, 1.0).astype(x.dtype)
    step = spec.eps - spec.alpha
    if step == 0:
        return x1
    g = loss_gradient(model, x1, y, spec.target)
    return _project_linf(x1 + step * np.sign(g), x, spec.eps).astype(x.dtype)


# ---------------------------------------------------------------- iterative

def pgd(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
        noise: np.ndarray | None = None) -> np.ndarray:
    """ℓ∞ PGD with a uniform random start in the ε-ball (unless disabled)."""
    if spec.random_start:
        if noise is None:
            noise = np.random.default_rng(spec.rng_seed).uniform(-1.0, 1.0, x.shape)
        x_adv = _project_linf(x + spec.eps * noise, x, spec.eps).astype(x.dtype)
    else:
        x_adv = x.copy()
    for _ in range(spec.steps):
        g = loss_gradient(model, x_adv, y, spec.target)
        x_adv = _project_linf(x_adv + spec.alpha * np.sign(g), x, spec.eps).astype(x.dtype)
    return x_adv


def mifgsm(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
           trace: list | None = None) -> np.ndarray:
    """Momentum iterative FGSM; each gradient is normalised by its per-sample L1 norm.

    When ``trace`` is a list the momentum after every step is appended to it.
    """
    x_adv = x.copy()
    velocity = np.zeros(x.shape, dtype=np.float64)
    for _ in range(spec.steps):
        g = loss_gradient(model, x_adv, y, spec.target).astype(np.float64)
        l1 = np.abs(_flat(g)).sum(axis=1)
        inv = np.where(l1 > 0, 1.0 / np.where(l1 > 0, l1, 1.0), 0.0)
        velocity = spec.mu * velocity + g * _per_sample(inv, x.shape)
        if trace is not None:
            trace.append(velocity.copy())
        x_adv = _project_linf(x_adv + spec.alpha * np.sign(velocity), x, spec.eps).astype(x.dtype)
    return x_adv


# ----------------------------------------------------------- optimisation

def _margin_loss(logits: Tensor, y: np.ndarray, kappa: float, target: int | None) -> Tensor:
    """Per-sample ``max(margin, -kappa)`` as a differentiable tensor."""
    n, k = logits.shape
    big = np.float64(1e9)
    if target is None:
        ref_mask = np.zeros((n, k))
        ref_mask[np.arange(n), y] = 1.0
    else:
        ref_mask = np.zeros((n, k))
        ref_mask[:, target] = 1.0
    ref = ad.sum_(ad.mul(logits, Tensor(ref_mask.astype(logits.dtype))), axis=1)
    # best "other" logit: max over classes with the reference class pushed far down
    masked = ad.sub(logits, Tensor((ref_mask * big).astype(logits.dtype)))
    other = _rowmax(masked)
    m = ad.sub(ref, other) if target is None else ad.sub(other, ref)
    return ad.maximum(m, -kappa)


def _rowmax(a: Tensor) -> Tensor:
    idx = np.argmax(a.data, axis=1)
    onehot = np.zeros(a.shape, dtype=a.dtype)
    onehot[np.arange(len(idx)), idx] = 1.0
    return ad.sum_(ad.mul(a, Tensor(onehot)), axis=1)


def _success(logits: np.ndarray, y: np.ndarray, kappa: float, target: int | None) -> np.ndarray:
    m = margin(logits, y, target)
    pred = np.argmax(logits, axis=1)
    hit = pred != y if target is None else pred == target
    return hit & (m <= -kappa)


def cw(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> tuple[np.ndarray, np.ndarray]:
    """Carlini-Wagner ℓ2: minimise ``||x' - x||_2 + c * max(margin, -kappa)``.

    The box constraint is handled by optimising ``w`` with ``x' = (tanh(w) + 1) / 2``.
    Returns the lowest-distance successful iterate per sample, or the final
    iterate with ``success=False``.
    """
    dtype = x.dtype
    x64 = x.astype(np.float64)
    w = np.arctanh(np.clip(2.0 * x64 - 1.0, -1 + 1e-6, 1 - 1e-6))
    m1, m2 = np.zeros_like(w), np.zeros_like(w)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    best = x.copy()
    best_dist = np.full(len(x), np.inf)
    found = np.zeros(len(x), dtype=bool)
    x_const = Tensor(x64, dtype=np.float64)
    cur = x.copy()
    for t in range(1, spec.max_iterations + 1):
        wt = Tensor(w, requires_grad=True, dtype=np.float64)
        with Tape():
            xa = ad.mul(ad.add(ad.tanh(wt), 1.0), 0.5)
            diff = ad.reshape(ad.sub(xa, x_const), (len(x), -1))
            dist = ad.l2_norm(diff, axis=1)
            logits = model(ad.cast(xa, dtype))
            adv = _margin_loss(logits, y, spec.kappa, spec.target)
            obj = ad.sum_(ad.add(dist, ad.mul(adv, spec.c)))
            (gw,) = ad.grad(obj, [wt])
        cur = xa.data.astype(dtype)
        _track(cur, logits.data, dist.data, y, spec, best, best_dist, found)
        g = gw.data
        if spec.optimizer == "adam":
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            w = w - spec.learning_rate * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + eps_adam)
        else:
            w = w - spec.learning_rate * g
    final = ((np.tanh(w) + 1.0) / 2.0).astype(dtype)
    _track(final, _logits(model, final), np.linalg.norm(_flat(final.astype(np.float64) - x64), axis=1),
           y, spec, best, best_dist, found)
    out = np.where(_per_sample(found, x.shape), best, final)
    return np.clip(out, 0.0, 1.0), found


def ead(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> tuple[np.ndarray, np.ndarray]:
    """Elastic-net attack solved by ISTA.

    Each iteration takes a gradient step on ``c * max(margin, -kappa) + ||x' - x||_2^2``,
    soft-thresholds the perturbation by ``beta`` and clamps to ``[0, 1]``. The
    decision rule picks, among successful iterates, the one minimising
    ``beta * L1 + L2^2`` (``EN``) or ``L1`` (``L1``).
    """
    dtype = x.dtype
    x64 = x.astype(np.float64)
    cur = x64.copy()
    best = x.copy()
    best_dist = np.full(len(x), np.inf)
    found = np.zeros(len(x), dtype=bool)
    for _ in range(spec.max_iterations):
        xt = Tensor(cur, requires_grad=True, dtype=np.float64)
        with Tape():
            logits = model(ad.cast(xt, dtype))
            adv = _margin_loss(logits, y, spec.kappa, spec.target)
            diff = ad.sub(xt, Tensor(x64, dtype=np.float64))
            obj = ad.add(ad.mul(ad.sum_(adv), spec.c), ad.sum_(ad.mul(diff, diff)))
            (g,) = ad.grad(obj, [xt])
        _track(cur.astype(dtype), logits.data, _ead_distance(cur, x64, spec), y, spec, best, best_dist, found)
        z = cur - spec.learning_rate * g.data
        cur = np.clip(x64 + soft_threshold(z - x64, spec.beta), 0.0, 1.0)
    final = cur.astype(dtype)
    _track(final, _logits(model, final), _ead_distance(cur, x64, spec), y, spec, best, best_dist, found)
    out = np.where(_per_sample(found, x.shape), best, final)
    return out, found


def _ead_distance(cur: np.ndarray, x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    d = _flat(cur - x)
    l1 = np.abs(d).sum(axis=1)
    if spec.decision_rule == "L1":
        return l1
    return spec.beta * l1 + (d * d).sum(axis=1)


def _logits(model: Classifier, x: np.ndarray) -> np.ndarray:
    return model(Tensor(x, dtype=x.dtype)).data


def _track(cand, logits, dist, y, spec, best, best_dist, found) -> None:
    ok = _success(np.asarray(logits, dtype=np.float64), y, spec.kappa, spec.target)
    better = ok & (dist < best_dist)
    if better.any():
        best[better] = cand[better]
        best_dist[better] = dist[better]
        found |= better


# ---------------------------------------------------------------- dispatch

def run_attack(model: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
               chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Attack a batch and return ``(x_adv, success)``.

    Randomness is drawn once for the whole batch from ``spec.rng_seed`` so the
    result does not depend on ``chunk``. For gradient attacks ``success`` means
    the prediction changed away from the label (or onto the target); for
    ``cw``/``ead`` it additionally requires the ``kappa`` margin.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        return x.copy(), np.zeros(0, dtype=bool)
    if x.dtype.kind != "f":
        x = x.astype(ad.default_dtype())
    rng = np.random.default_rng(spec.rng_seed)
    noise = None
    if spec.kind == "rfgsm":
        noise = rng.standard_normal(x.shape)
    elif spec.kind == "pgd" and spec.random_start:
        noise = rng.uniform(-1.0, 1.0, x.shape)

    out = np.empty_like(x)
    success = np.zeros(len(x), dtype=bool)
    for lo in range(0, len(x), chunk):
        sl = slice(lo, lo + chunk)
        xb, yb = x[sl], y[sl]
        nb = noise[sl] if noise is not None else None
        if spec.kind == "fgsm":
            adv = fgsm(model, xb, yb, spec)
        elif spec.kind == "fgm":
            adv = fgm(model, xb, yb, spec)
        elif spec.kind == "rfgsm":
            adv = rfgsm(model, xb, yb, spec, noise=nb)
        elif spec.kind == "pgd":
            adv = pgd(model, xb, yb, spec, noise=nb)
        elif spec.kind == "mifgsm":
            adv = mifgsm(model, xb, yb, spec)
        elif spec.kind == "cw":
            adv, ok = cw(model, xb, yb, spec)
        else:
            adv, ok = ead(model, xb, yb, spec)
        out[sl] = adv
        if spec.kind in ("cw", "ead"):
            success[sl] = ok
        else:
            pred = np.argmax(_logits(model, adv), axis=1)
            success[sl] = pred != yb if spec.target is None else pred == spec.target
    return out, success
