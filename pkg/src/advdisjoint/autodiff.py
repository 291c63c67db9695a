"""Reverse-mode automatic differentiation over dense numpy tensors.

Operations performed while a :class:`Tape` is active are appended to it, in
execution order, whenever at least one input requires a gradient. Every
vector-Jacobian product is itself written in terms of the primitives below, so
a gradient computed with ``differentiable=True`` is recorded on the same tape
and can be differentiated again. That second-order path is what the transfer
penalties in :mod:`advdisjoint.training` rely on.

Subgradient conventions at kinks: ``relu'(0) = 0``, ``maximum(a, c)'`` at
``a == c`` is 0, ``abs'(0) = 0``. ``sign`` is forward-only.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "broadcast_to",
    "cast",
    "clamp",
    "col2im",
    "conv2d",
    "cross_entropy",
    "div",
    "exp",
    "get_precision",
    "grad",
    "im2col",
    "l1_norm",
    "l2_norm",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "maximum",
    "mean",
    "mul",
    "neg",
    "precision",
    "relu",
    "reshape",
    "set_precision",
    "sign",
    "softmax",
    "sub",
    "sum_",
    "sum_to",
    "tanh",
    "tensor",
    "transpose",
]

NORM_FLOOR = 1e-12

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def set_precision(name: str) -> None:
    """Select the dtype used for tensors built from Python data (``f32``/``f64``)."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.precision = name


def get_precision() -> str:
    return getattr(_state, "precision", "f32")


def default_dtype() -> type:
    return _DTYPES[get_precision()]


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


class Node:
    __slots__ = ("tape", "index", "op", "out", "parents", "vjp", "differentiable")

    def __init__(self, tape, index, op, out, parents, vjp, differentiable):
        self.tape = tape
        self.index = index
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.differentiable = differentiable

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op}, shape={self.out.shape})"


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in execution order, so every node's parents precede it and
    a reverse sweep is a valid topological traversal.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._prev: list = []

    def __enter__(self) -> "Tape":
        self._prev.append((getattr(_state, "tape", None), getattr(_state, "recording", True)))
        _state.tape = self
        _state.recording = True
        return self

    def __exit__(self, *exc) -> None:
        _state.tape, _state.recording = self._prev.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    if not getattr(_state, "recording", True):
        return None
    return getattr(_state, "tape", None)


@contextlib.contextmanager
def _grad_mode(tape: Tape, differentiable: bool):
    prev = (getattr(_state, "tape", None), getattr(_state, "recording", True), getattr(_state, "diff", False))
    _state.tape = tape
    _state.recording = differentiable
    _state.diff = differentiable
    try:
        yield
    finally:
        _state.tape, _state.recording, _state.diff = prev


class Tensor:
    """Dense array with an optional link into the active tape."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self, (1, 0))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from Python/numpy data in the configured precision."""
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
            vjp: Callable[[Tensor, Tensor], Sequence[Tensor | None]]) -> Tensor:
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out_data, dtype=out_data.dtype)
    out = Tensor(out_data, requires_grad=True, dtype=out_data.dtype)
    node = Node(tape, len(tape.nodes), op, out, tuple(parents), vjp, getattr(_state, "diff", False))
    tape.nodes.append(node)
    out.node = node
    return out


def _binary_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("div", a, b)

    def vjp(g, out):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, out)), b.shape)

    return _record("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g, out: (neg(g),))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def exp(a) -> Tensor:
    a = _as_tensor(a)
    return _record("exp", np.exp(a.data), (a,), lambda g, out: (mul(g, out),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g, out: (div(g, a),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    return _record("tanh", np.tanh(a.data), (a,),
                   lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(a.dtype)
    return _record("relu", a.data * mask, (a,), lambda g, out: (mul(g, Tensor(mask)),))


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a constant; gradient 0 at the tie."""
    a = _as_tensor(a)
    mask = (a.data > c).astype(a.dtype)
    out = np.where(mask > 0, a.data, np.asarray(c, dtype=a.dtype))
    return _record("maximum", out, (a,), lambda g, out: (mul(g, Tensor(mask)),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g, out: (mul(g, Tensor(s)),))


def sign(a) -> Tensor:
    """Elementwise sign. Forward-only: the result never carries a gradient."""
    a = _as_tensor(a)
    return Tensor(np.sign(a.data), dtype=a.dtype)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)
    return _record("clamp", out, (a,), lambda g, out: (mul(g, Tensor(mask.astype(a.dtype))),))


# ----------------------------------------------------------------- structural

def cast(a, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input's precision."""
    a = _as_tensor(a)
    if a.dtype == np.dtype(dtype):
        return a
    return _record("cast", a.data.astype(dtype), (a,), lambda g, out: (cast(g, a.dtype),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record("reshape", out, (a,), lambda g, out: (reshape(g, a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g, out: (transpose(g, inverse),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _record("broadcast_to", out, (a,), lambda g, out: (sum_to(g, a.shape),))


def sum_to(a, shape: Sequence[int]) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", a.shape, shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1)
    out = a.data.sum(axis=axes, keepdims=True)
    out = out.reshape(shape)
    return _record("sum_to", out, (a,), lambda g, out: (broadcast_to(g, a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if isinstance(out, np.generic) or not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def vjp(g, _out):
        if axis is None:
            kept = (1,) * a.ndim
        elif keepdims:
            kept = g.shape
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = {ax % a.ndim for ax in axes}
            kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# ------------------------------------------------------------------ linear ops

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g, out: (matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)))


def _im2col_data(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im_data(cols: np.ndarray, x_shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    patches = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + ho, dj:dj + wo] += patches[:, :, di, dj]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def im2col(x, k: int, pad: int = 0) -> Tensor:
    """Gather ``k x k`` patches (stride 1) into rows ordered (batch, row, col)."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError("im2col", x.shape, (k, k))
    return _record("im2col", _im2col_data(x.data, k, pad), (x,),
                   lambda g, out: (col2im(g, x.shape, k, pad),))


def col2im(cols, x_shape: Sequence[int], k: int, pad: int = 0) -> Tensor:
    """Scatter-add patch rows back to an image; the adjoint of :func:`im2col`."""
    cols = _as_tensor(cols)
    x_shape = tuple(x_shape)
    return _record("col2im", _col2im_data(cols.data, x_shape, k, pad), (cols,),
                   lambda g, out: (im2col(g, k, pad),))


def conv2d(x, weight, bias=None, pad: int = 0) -> Tensor:
    """Stride-1 2-D convolution, NCHW input, OIHW weight, via patch gather + matmul."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3] \
            or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    b, _, h, w = x.shape
    o, c, k, _ = weight.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = im2col(x, k, pad)
    y = matmul(cols, transpose(reshape(weight, (o, c * k * k)), (1, 0)))
    y = transpose(reshape(y, (b, ho, wo, o)), (0, 3, 1, 2))
    if bias is not None:
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


def max_pool2d(x) -> Tensor:
    """Non-overlapping 2x2 max pooling. Ties route the gradient to the first maximum."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2d", x.shape, (2, 2))
    b, c, h, w = x.shape
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask = onehot.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, 2, w // 2, 2)
    mask_t = Tensor(np.ascontiguousarray(mask))

    def vjp(g, _out):
        up = broadcast_to(reshape(g, (b, c, h // 2, 1, w // 2, 1)), mask.shape)
        return (reshape(mul(up, mask_t), x.shape),)

    return _record("max_pool2d", np.ascontiguousarray(out), (x,), vjp)


# ------------------------------------------------------------ normalisations

def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record("log_softmax", out, (a,),
                   lambda g, out: (sub(g, mul(exp(out), sum_(g, axis, keepdims=True))),))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def l1_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    return sum_(abs_(a), axis, keepdims)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm. Below ``NORM_FLOOR`` the gradient is defined as zero."""
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))
    out = np.asarray(out, dtype=a.dtype)

    def vjp(g, out_t):
        if axis is None:
            kept = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = {ax % a.ndim for ax in axes}
            kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        norm = reshape(out_t, kept)
        live = Tensor((norm.data >= NORM_FLOOR).astype(a.dtype))
        safe = add(mul(norm, live), sub(1.0, live))
        return (mul(reshape(g, kept), mul(div(a, safe), live)),)

    return _record("l2_norm", out, (a,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    picked = sum_(mul(log_softmax(logits, 1), Tensor(onehot)), axis=1)
    return neg(mean(picked))


# ------------------------------------------------------------------- gradient

def grad(loss: Tensor, wrt: Sequence[Tensor], differentiable: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``differentiable=True`` the gradient computation is itself recorded on
    the loss's tape, so the returned tensors can appear inside a later loss and
    be differentiated again. Tensors that ``loss`` does not depend on get a zero
    gradient of matching shape.
    """
    if loss.size != 1:
        raise ValueError(f"grad: loss must be a scalar, got shape {loss.shape}")
    wrt = list(wrt)
    zeros = [Tensor(np.zeros_like(w.data)) for w in wrt]
    if loss.node is None:
        return zeros
    tape = loss.node.tape
    nodes = tape.nodes[: loss.node.index + 1]

    wrt_ids = {id(w) for w in wrt}
    live = set(wrt_ids)
    for node in nodes:
        if id(node.out) not in live and any(id(p) in live for p in node.parents):
            live.add(id(node.out))
    if id(loss) not in live:
        return zeros

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    with _grad_mode(tape, differentiable):
        for node in reversed(nodes):
            key = id(node.out)
            g = grads.get(key) if key in wrt_ids else grads.pop(key, None)
            if g is None:
                continue
            parent_grads = node.vjp(g, node.out)
            for p, pg in zip(node.parents, parent_grads):
                pk = id(p)
                if pg is None or pk not in live:
                    continue
                grads[pk] = add(grads[pk], pg) if pk in grads else pg
    out = []
    for w, z in zip(wrt, zeros):
        g = grads.get(id(w))
        if g is None:
            out.append(z)
        else:
            if not differentiable:
                g = g.detach()
            out.append(g)
    return out


def value_and_grad(fn: Callable[..., Tensor], args: Iterable[Tensor]) -> tuple[Tensor, list[Tensor]]:
    """Evaluate ``fn(*args)`` on a fresh tape and return it with first-order gradients."""
    args = list(args)
    leaves = [Tensor(a.data, requires_grad=True, dtype=a.dtype) for a in args]
    with Tape():
        out = fn(*leaves)
        gs = grad(out, leaves)
    return out.detach(), gs
