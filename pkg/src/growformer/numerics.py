"""Dense float32 kernels and seeded randomness shared by the rest of the package."""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Works on stacked (batched) operands as well. The contraction runs in the
    BLAS kernel, whose summation order is fixed for a given shape and thread
    count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects matrices, got ndim {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    m = np.asarray(m)
    if m.size == 0:
        return m.copy()
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(h: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    return layer_norm_with_stats(h, gain, bias, eps)[0]


def layer_norm_with_stats(h, gain, bias, eps=1e-12):
    """Like :func:`layer_norm` but also returns ``(xhat, inv_sigma)`` for backprop."""
    h = np.asarray(h)
    if gain.shape != (h.shape[-1],) or bias.shape != (h.shape[-1],):
        raise ValueError(
            f"layer_norm gain/bias must have length {h.shape[-1]}, got {gain.shape} / {bias.shape}"
        )
    mu = h.mean(axis=-1, keepdims=True)
    centered = h - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + h.dtype.type(eps))
    xhat = centered * inv_sigma
    return xhat * gain + bias, xhat, inv_sigma


def layer_norm_backward(dy, xhat, inv_sigma, gain):
    """Gradients ``(dx, dgain, dbias)``; dgain/dbias are summed over leading axes."""
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv_sigma * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(m: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return gelu_with_tanh(m)[0]


def gelu_with_tanh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU output plus the tanh term, which :func:`gelu_grad` can reuse."""
    m = np.asarray(m)
    dt = m.dtype.type
    t = np.tanh(dt(_GELU_C) * (m + dt(_GELU_A) * m * m * m))
    return dt(0.5) * m * (dt(1.0) + t), t


def gelu_grad(m: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """Elementwise derivative of :func:`gelu`; pass ``t`` from the forward to skip a tanh."""
    dt = m.dtype.type
    if t is None:
        t = gelu_with_tanh(m)[1]
    m2 = m * m
    dinner = dt(_GELU_C) * (dt(1.0) + dt(3.0 * _GELU_A) * m2)
    out = dt(1.0) - t * t
    out *= m
    out *= dinner
    out += dt(1.0) + t
    out *= dt(0.5)
    return out


class SeededRng:
    """Single-owner random source. Same seed, same draws (PCG64)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def sample_index(self, n: int) -> int:
        """Uniform draw from ``range(n)``."""
        if n < 1:
            raise ValueError("sample_index needs n >= 1")
        return int(self._gen.integers(0, n))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=size)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size=size)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every draw lies within ``bound`` stds."""
        out = self._gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(DTYPE)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream derived from ``(seed, key)``."""
        return SeededRng((self.seed * 1_000_003 + int(key)) % (2**63))


def sample_index(rng: SeededRng, n: int) -> int:
    return rng.sample_index(n)


def limit_threads(n: int | None) -> None:
    """Cap BLAS threads; ``None`` leaves the library default."""
    if n is None:
        return
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=int(n))
