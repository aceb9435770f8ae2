"""Dense float64 primitives shared by every other module.

Matrices are plain C-contiguous ``numpy.float64`` arrays. The wrappers here
only add the shape checks and the finiteness guarantees the rest of the
package relies on.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``.

    Works on a single logit vector or on a batch (one row per token).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def center_columns(z) -> np.ndarray:
    z = as_matrix(z, "Z")
    if z.shape[0] < 2:
        raise ShapeError(f"centering needs at least 2 rows, got {z.shape[0]}")
    return z - z.mean(axis=0, keepdims=True)


def frobenius_inner(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"Frobenius inner product shape mismatch: {u.shape} vs {v.shape}")
    return float(np.sum(u * v))


def check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
