"""Input validation helpers shared across the package."""

import numpy as np

__all__ = ["as_matrix", "check_finite_2d", "check_same_columns", "check_positive_scalar"]


def as_matrix(arr, name="array", dtype=float):
    """Coerce to a 2-D float ndarray, promoting 1-D input to a single column."""
    out = np.asarray(arr, dtype=dtype)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def check_finite_2d(arr, name="array"):
    arr = as_matrix(arr, name)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_columns(a, b, name_a="a", name_b="b"):
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"column mismatch: {name_a} has {a.shape[1]} columns, "
            f"{name_b} has {b.shape[1]}"
        )


def check_positive_scalar(x, name="value"):
    x = float(x)
    if not np.isfinite(x) or x <= 0.0:
        raise ValueError(f"{name} must be a positive finite scalar, got {x}")
    return x
