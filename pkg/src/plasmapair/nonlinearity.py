"""Positive-part powers shared by the solver, spectral and variational paths.

No smoothing is applied anywhere: for p >= 1 the exact generalized
derivative is used, with the weight set to 0 wherever the argument is
nonpositive, which keeps the free boundary sharp.
"""
from __future__ import annotations

import numpy as np

__all__ = ["positive_part_pow", "positive_part_weight"]


def positive_part_pow(v, p: float) -> np.ndarray:
    """Pointwise ``(v)_+ ** p``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    m = v > 0
    out[m] = v[m] ** p
    return out


def positive_part_weight(v, p: float) -> np.ndarray:
    """Pointwise ``(v)_+ ** (p-1)`` with the convention ``0**0 = 0``.

    This is the density weight of the linearization; for p = 1 it is the
    indicator of the positivity region.  For p < 1 it blows up as v -> 0+,
    so callers must keep v bounded away from zero (positive states only).
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    m = v > 0
    if p == 1.0:
        out[m] = 1.0
    else:
        out[m] = v[m] ** (p - 1.0)
    return out
