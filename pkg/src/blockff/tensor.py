"""Dense array operations with strict finiteness checking, plus seeded RNG.

Everything in this package runs on plain numpy arrays: row-major,
contiguous, batch axis leading, float32 by default (float64 for
verification work that needs finite-difference headroom).  The helpers
here add two guarantees on top of numpy:

* every result is checked for NaN/Inf and reported immediately via
  :class:`NonFiniteError` instead of silently poisoning a training run,
* all randomness flows through explicitly seeded integer-state
  generators (:func:`make_rng`), never from time or addresses, so runs
  are reproducible bit for bit.

No broadcasting beyond scalar operands; mismatched shapes are an error.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation received or produced NaN/Inf values."""


def check_finite(a: np.ndarray, context: str = "") -> np.ndarray:
    """Return ``a`` unchanged, raising :class:`NonFiniteError` if it holds NaN/Inf."""
    if not np.all(np.isfinite(a)):
        where = context or "tensor operation"
        raise NonFiniteError(f"non-finite values in {where}")
    return a


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} (size {t.size}) to {shape}")
    return np.reshape(t, shape)


def mean_over(t: np.ndarray, axes: Iterable[int]) -> np.ndarray:
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if not -t.ndim <= a < t.ndim:
            raise ShapeError(f"axis {a} invalid for rank-{t.ndim} tensor")
    if len(set(a % t.ndim for a in axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axes}")
    return check_finite(t.mean(axis=axes), "mean_over")


def square(t: np.ndarray) -> np.ndarray:
    return check_finite(np.square(t), "square")


def exp(t: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(t)
    return check_finite(out, "exp")


def log(t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(t)
    return check_finite(out, "log")


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_shape(a, b, "add")
    return check_finite(a + b, "add")


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_shape(a, b, "sub")
    return check_finite(a - b, "sub")


def mul_scalar(t: np.ndarray, s: float) -> np.ndarray:
    return check_finite(t * s, "mul_scalar")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    return check_finite(a @ b, "matmul")


def log_sum_exp(t: np.ndarray) -> np.ndarray:
    """Per-row log(sum(exp(row))) of a [B, J] matrix, max-shifted for safety."""
    if t.ndim != 2:
        raise ShapeError(f"log_sum_exp expects a 2-D tensor, got shape {t.shape}")
    check_finite(t, "log_sum_exp input")
    m = t.max(axis=1, keepdims=True)
    out = m[:, 0] + np.log(np.exp(t - m).sum(axis=1))
    return check_finite(out, "log_sum_exp")


def softmax(t: np.ndarray) -> np.ndarray:
    """Row softmax of a [B, J] matrix, max-shifted."""
    if t.ndim != 2:
        raise ShapeError(f"softmax expects a 2-D tensor, got shape {t.shape}")
    check_finite(t, "softmax input")
    e = np.exp(t - t.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded PCG64 generator; extra ints select independent named streams.

    Identical arguments give a byte-identical draw sequence on any
    platform and in any process: the state is derived purely from the
    integers, never from entropy sources.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))
