"""Dense float64 array helpers and seeded randomness.

Arrays are plain C-contiguous ``numpy.ndarray`` objects of dtype float64, so
raster order of an ``H x W x D`` grid is the flat order of its first two axes.
Randomness comes from numpy's PCG64 bit generator, which is portable and fully
determined by a 64-bit seed.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

DTYPE = np.float64


def as_array(a, *, ndim: int | None = None, name: str = "array") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 array, optionally checking rank."""
    arr = np.ascontiguousarray(a, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator. Identical seeds give identical streams."""
    if not 0 <= int(seed) < 2**64:
        raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b) -> np.ndarray:
    a = as_array(a, ndim=2, name="a")
    b = as_array(b, ndim=2, name="b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_last(a) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    a = as_array(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("softmax_last received non-finite input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def uniform_init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """I.i.d. uniform entries in ``[-scale, scale]``."""
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE, copy=False)


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    # log1p(exp(x)) without overflow for large x
    return np.logaddexp(0.0, x)


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=DTYPE)
    return y + np.log(-np.expm1(-y))


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x / (1.0 + np.exp(-x))


def gelu(x) -> np.ndarray:
    """Tanh-approximated GELU."""
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def max_abs(a) -> float:
    """Largest absolute entry (0.0 for an empty array)."""
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0
