"""Independent numerical references used across the test modules."""

import numpy as np

from advdisjoint import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        gf[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def autodiff_grad(fn, x: np.ndarray) -> np.ndarray:
    """Gradient of ``fn(Tensor) -> scalar Tensor`` from the tape, in float64."""
    t = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with ad.Tape():
        out = fn(t)
        (g,) = ad.grad(out, [t])
    return g.data


def scalar(fn, x: np.ndarray) -> float:
    return float(fn(ad.Tensor(np.array(x, dtype=np.float64))).data)


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy computed with plain numpy."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y]
