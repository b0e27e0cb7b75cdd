"""Input validation helpers shared across the package.

All numeric data is carried as float64 numpy arrays. Constructors and
public entry points funnel through these checks so that no NaN/Inf or
mis-shaped array reaches the math.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_matrix",
    "check_vector",
    "check_unit_rows",
    "check_same_shape",
]


def check_matrix(x, name="x", rows=None, cols=None):
    """Coerce to a finite float64 2-d array, optionally pinning its shape."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    return arr


def check_vector(x, name="x", size=None):
    """Coerce to a finite float64 1-d array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if size is not None and arr.size != size:
        raise ValueError(f"{name} must have length {size}, got {arr.size}")
    return arr


def check_unit_rows(x, name="x", tol=1e-9):
    """Verify every row of ``x`` has unit L2 norm within ``tol``."""
    arr = check_matrix(x, name)
    norms = np.linalg.norm(arr, axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if arr.shape[0] else 0.0
    if worst > tol:
        raise ValueError(
            f"{name} rows must be unit-norm within {tol:g} (worst deviation {worst:g})"
        )
    return arr


def check_same_shape(a, b, name_a="a", name_b="b"):
    if np.shape(a) != np.shape(b):
        raise ValueError(
            f"shape mismatch: {name_a} has {np.shape(a)}, {name_b} has {np.shape(b)}"
        )
