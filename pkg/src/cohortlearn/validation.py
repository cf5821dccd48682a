"""Small input-validation helpers used across the public API."""

import numpy as np

from .errors import ValidationError


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 0:
        raise ValidationError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a real in [0, 1], got {value!r}") from None
    if not np.isfinite(out) or out < 0.0 or out > 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return out


def check_finite_array(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} contains non-finite values")
    return out


def check_matrix(arr, name: str) -> np.ndarray:
    out = check_finite_array(arr, name)
    if out.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def check_same_length(a, b, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise ValidationError(
            f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})"
        )
