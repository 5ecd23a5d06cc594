"""Divergence and summary statistics."""

from __future__ import annotations

import numpy as np

from .errors import InputError

Q_FLOOR = 1e-12


def kl_divergence(p, q, floor: float = Q_FLOOR) -> float:
    """KL(p || q) in nats.

    ``q`` is floored at ``floor`` and renormalised so the result stays finite;
    terms with ``p_i == 0`` contribute nothing.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise InputError(f"KL length mismatch: {p.size} vs {q.size}")
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise InputError("p is not a probability vector")
    q = np.maximum(q, floor)
    q = q / q.sum()
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "p25": float("nan"), "p75": float("nan")}
    return {
        "mean": float(v.mean()),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
    }


def max_relative_deviation(actual, reference) -> float:
    """``max|a - r| / max|r|`` over the whole array (0 when both are zero)."""
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape:
        raise InputError(f"shape mismatch {a.shape} vs {r.shape}")
    scale = float(np.abs(r).max()) if r.size else 0.0
    diff = float(np.abs(a - r).max()) if r.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale
