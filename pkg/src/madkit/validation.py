"""Small input-validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import DataError, ParameterError, ValidationError


def as_f64(x, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(arr)


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise ValidationError(f"{name} contains {bad} non-finite values")
    return x


def check_shape(x: np.ndarray, shape: tuple, name: str = "array") -> np.ndarray:
    """Check dimensions; None entries in `shape` match any size."""
    if x.ndim != len(shape):
        raise DataError(f"{name} has {x.ndim} dims, expected {len(shape)}")
    for i, (got, want) in enumerate(zip(x.shape, shape)):
        if want is not None and got != want:
            raise DataError(f"{name} dim {i} is {got}, expected {want}")
    return x


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    if not (lo <= value <= hi):
        raise ParameterError(f"{name} must be in [{lo}, {hi}], got {value}")
    return value


def check_probability_rows(p: np.ndarray, name: str, tol: float = 1e-6) -> np.ndarray:
    """Rows along the last axis must be nonnegative and sum to 1 within tol."""
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")
    sums = p.sum(axis=-1)
    dev = np.max(np.abs(sums - 1.0)) if sums.size else 0.0
    if dev > tol:
        raise ValidationError(f"{name} rows deviate from unit sum by {dev:.3e}")
    return p
