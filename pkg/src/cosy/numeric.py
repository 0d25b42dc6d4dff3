"""Order-sensitive numeric helpers.

numpy's sum() uses pairwise accumulation, which differs in the last bits
from a left-to-right scalar loop once arrays exceed a handful of elements.
Several outputs here are contractually bit-identical to loop-based
reference implementations, so sums on those paths go through seq_sum.
"""

from __future__ import annotations

import numpy as np


def seq_sum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right sequential sum along an axis (cumsum is sequential)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        return np.zeros(np.delete(a.shape, axis))
    return np.take(np.cumsum(a, axis=axis), -1, axis=axis)


def seq_mean(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sequential sum divided by the axis length, matching `total / n` loops."""
    n = np.asarray(a).shape[axis]
    if n == 0:
        raise ValueError("mean over empty axis")
    return seq_sum(a, axis=axis) / n


def point_norms(diffs: np.ndarray) -> np.ndarray:
    """Euclidean norms over the last axis of (..., 3) difference vectors.

    Fixed grouping ((dx^2 + dy^2) + dz^2) to match scalar references.
    """
    d2 = (
        diffs[..., 0] * diffs[..., 0] + diffs[..., 1] * diffs[..., 1]
    ) + diffs[..., 2] * diffs[..., 2]
    return np.sqrt(d2)


def point_l1(diffs: np.ndarray) -> np.ndarray:
    """L1 norms over the last axis of (..., 3) differences, fixed grouping."""
    a = np.abs(diffs)
    return (a[..., 0] + a[..., 1]) + a[..., 2]
