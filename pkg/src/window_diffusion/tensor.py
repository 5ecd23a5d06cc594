"""Dense float32 kernels used by the toy transformer.

Matrices are plain 2-D ``numpy.float32`` arrays; vectors are 1-D arrays.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericInputError, UndefinedSimilarityError

DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    The input dtype is kept when it is floating point (float64 logits from the
    synthetic oracle stay float64), otherwise the result is float32.  ``-inf``
    entries are allowed as long as each row has at least one finite value.
    """
    x = np.asarray(m)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    if x.ndim == 1:
        return softmax_rows(x[None, :])[0]
    # max propagates NaN, and +inf or an all -inf row leaves a non-finite max
    row_max = x.max(axis=-1, keepdims=True)
    if not np.isfinite(row_max).all():
        raise NumericInputError("softmax input has NaN, +inf, or a row with no finite entry")
    e = x - row_max
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def rms_norm(v, gain, eps: float = 1e-6) -> np.ndarray:
    """Scale the last axis of ``v`` to unit RMS, then multiply by ``gain``."""
    v = np.asarray(v, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    if v.shape[-1] != gain.shape[-1]:
        raise DimensionError(f"rms_norm length mismatch: {v.shape[-1]} vs {gain.shape[-1]}")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    return (v / np.sqrt(ms + DTYPE(eps))) * gain


def gelu(x) -> np.ndarray:
    # tanh approximation
    x = np.asarray(x, dtype=DTYPE)
    inner = DTYPE(_GELU_C) * (x + DTYPE(0.044715) * (x * x * x))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity length mismatch: {u.size} vs {v.size}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity undefined for a zero vector")
    s = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, s))
