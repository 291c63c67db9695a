"""Desk-scale classifier architectures and model-set management."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ARCHITECTURES = ("mlp", "small_conv")
PROVENANCES = ("disjoint", "independent", "adversarially_trained")

Params = dict[str, Tensor]
Classifier = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description shared by all members of a set.

    For ``mlp`` the ``widths`` are hidden-layer sizes. For ``small_conv`` they are
    ``(conv1_channels, conv2_channels, dense_width)``; the network is
    ``2 x [conv3x3 -> relu -> maxpool2] -> dense -> relu -> dense``.
    """

    architecture: str = "small_conv"
    input_shape: tuple[int, ...] = (3, 32, 32)
    num_classes: int = 10
    widths: tuple[int, ...] = (16, 32, 128)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(w <= 0 for w in self.widths) or any(s <= 0 for s in self.input_shape):
            raise ValueError("widths and input dimensions must be positive")
        if self.architecture == "small_conv":
            if len(self.input_shape) != 3 or len(self.widths) != 3:
                raise ValueError("small_conv needs input_shape (C, H, W) and widths (c1, c2, dense)")
            if self.input_shape[1] % 4 or self.input_shape[2] % 4:
                raise ValueError("small_conv needs H and W divisible by 4")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; this order is also the checkpoint order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if config.architecture == "mlp":
        dims = [config.input_dim, *config.widths, config.num_classes]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes += [(f"dense{i}.weight", (a, b)), (f"dense{i}.bias", (b,))]
    else:
        c, h, w = config.input_shape
        c1, c2, hidden = config.widths
        flat = c2 * (h // 4) * (w // 4)
        shapes = [
            ("conv0.weight", (c1, c, 3, 3)), ("conv0.bias", (c1,)),
            ("conv1.weight", (c2, c1, 3, 3)), ("conv1.bias", (c2,)),
            ("dense0.weight", (flat, hidden)), ("dense0.bias", (hidden,)),
            ("dense1.weight", (hidden, config.num_classes)), ("dense1.bias", (config.num_classes,)),
        ]
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


def init_model(config: ModelConfig, seed: int) -> Params:
    """Kaiming fan-in normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    params: Params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def forward(params: Params, x: Tensor, config: ModelConfig) -> Tensor:
    """Logits of one member for a batch ``x`` of shape ``(batch, *input_shape)``."""
    x = x if isinstance(x, Tensor) else ad.tensor(x)
    if tuple(x.shape[1:]) != config.input_shape:
        raise ShapeError("forward", x.shape, (None, *config.input_shape))
    batch = x.shape[0]
    if config.architecture == "mlp":
        h = ad.reshape(x, (batch, config.input_dim))
        depth = len(config.widths) + 1
        for i in range(depth):
            h = ad.add(ad.matmul(h, params[f"dense{i}.weight"]), params[f"dense{i}.bias"])
            if i < depth - 1:
                h = ad.relu(h)
        return h
    h = x
    for i in range(2):
        h = ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], pad=1)
        h = ad.max_pool2d(ad.relu(h))
    h = ad.reshape(h, (batch, -1))
    h = ad.relu(ad.add(ad.matmul(h, params["dense0.weight"]), params["dense0.bias"]))
    return ad.add(ad.matmul(h, params["dense1.weight"]), params["dense1.bias"])


def predict(model: Classifier, x, batch_size: int = 500) -> np.ndarray:
    """Argmax labels; ties go to the lower class index."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = [np.argmax(model(Tensor(x[i:i + batch_size])).data, axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Classifier, x, y, batch_size: int = 500) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x, batch_size) == y))


class Member:
    """A single classifier bound to its parameters."""

    def __init__(self, params: Params, config: ModelConfig):
        self.params = params
        self.config = config

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self.params, x, self.config)


class Ensemble:
    """Mean-logit fusion of several members."""

    def __init__(self, members: Sequence[Member]):
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = list(members)

    def __call__(self, x: Tensor) -> Tensor:
        return ensemble_forward([m.params for m in self.members], x, self.members[0].config)


def ensemble_forward(members: Sequence[Params], x: Tensor, config: ModelConfig) -> Tensor:
    """Arithmetic mean of the members' logits."""
    if len(members) == 0:
        raise ValueError("ensemble_forward: empty member subset")
    total = forward(members[0], x, config)
    for p in members[1:]:
        total = ad.add(total, forward(p, x, config))
    return ad.mul(total, 1.0 / len(members)) if len(members) > 1 else total


@dataclass
class ModelSet:
    config: ModelConfig
    members: list[Params]
    provenance: str = "independent"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a ModelSet needs at least one member")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        expected = dict(param_shapes(self.config))
        for i, p in enumerate(self.members):
            shapes = {k: tuple(v.shape) for k, v in p.items()}
            if shapes != expected:
                raise ValueError(f"member {i} parameter shapes do not match the config")

    @property
    def n(self) -> int:
        return len(self.members)

    def member(self, i: int) -> Member:
        return Member(self.members[i], self.config)

    def ensemble(self, indices: Sequence[int]) -> Ensemble:
        return Ensemble([self.member(i) for i in indices])

    def astype(self, dtype) -> "ModelSet":
        members = [{k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in p.items()}
                   for p in self.members]
        return ModelSet(self.config, members, self.provenance, dict(self.meta))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for p in self.members:
            for name, _ in param_shapes(self.config):
                h.update(np.ascontiguousarray(p[name].data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def new_set(config: ModelConfig, n: int, seeds: Sequence[int] | None = None,
            provenance: str = "independent") -> ModelSet:
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(n)]
    return ModelSet(config, [init_model(config, s) for s in seeds], provenance)
