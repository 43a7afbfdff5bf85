"""Dense row-major tensor kernels shared by every other module.

Tensors are plain numpy arrays, float32 by default with a float64 path for
verification runs. Activations follow the row-vector convention: a linear
layer computes ``x @ w`` with ``x`` shaped [tokens, features], which fixes
the orientation of every weight matrix in the package.

float32 matmuls accumulate in whatever precision the BLAS build uses; the
reproducibility contract is bit-identical reruns on one installation, not
bit-identical results across machines.
"""

from __future__ import annotations

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes or dtypes."""


def _as_2d(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _as_2d(a, "a")
    b = _as_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes: {a.dtype} @ {b.dtype}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_as_2d(a, "a").T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} + {b.shape}")
    return a + b


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} * {b.shape}")
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return np.asarray(a) * float(s)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch for dot: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a).ravel()))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated on the overflow-free side of exp."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x * sigmoid(x)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Rows containing -inf entries are fine as long as at least one entry per
    row is finite (the causal mask relies on this).
    """
    x = _as_2d(x, "x")
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = _as_2d(x, "x")
    gamma = np.asarray(gamma)
    if gamma.shape != (x.shape[1],):
        raise ShapeError(f"gamma shape {gamma.shape} does not match width {x.shape[1]}")
    ms = np.mean(x * x, axis=1, keepdims=True)
    return x / np.sqrt(ms + eps) * gamma


def column_center(x: np.ndarray) -> np.ndarray:
    x = _as_2d(x, "x")
    return x - np.mean(x, axis=0, keepdims=True)


def top_k_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties going to lower index.

    Within a row the indices come out in descending-value order; equal
    values keep ascending index order (stable sort on the negated row).
    """
    x = _as_2d(x, "x")
    if not 1 <= k <= x.shape[1]:
        raise ShapeError(f"k={k} out of range for row width {x.shape[1]}")
    return np.argsort(-x, axis=1, kind="stable")[:, :k]


def gather_rows(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    a = _as_2d(a, "a")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    return a[idx]


def gather_cols(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    a = _as_2d(a, "a")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"column index out of range for {a.shape[1]} columns")
    return a[:, idx]


def check_finite(a: np.ndarray, label: str = "tensor") -> None:
    if not np.isfinite(np.asarray(a)).all():
        raise ValueError(f"{label} contains non-finite values")
