"""Input validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np

# Slack for float round-off when checking the nominal [0, 1] value range.
RANGE_ATOL = 1e-6


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate a channel-first float image and return it as float64.

    Accepted layout is (C, H, W) with C in {1, 3}, finite values in [0, 1]
    (up to round-off slack, which is clipped away).
    """
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (C, H, W) array, got shape {arr.shape}")
    if arr.shape[0] not in (1, 3):
        raise ValueError(f"{name}: expected 1 or 3 channels, got {arr.shape[0]}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"{name}: empty spatial dims in shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name}: expected float dtype, got {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    lo = float(arr.min())
    hi = float(arr.max())
    if lo < -RANGE_ATOL or hi > 1.0 + RANGE_ATOL:
        raise ValueError(f"{name}: values outside [0, 1] (min={lo:.6g}, max={hi:.6g})")
    if lo < 0.0 or hi > 1.0:
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, name_a: str = "a", name_b: str = "b") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {name_a}{a.shape} vs {name_b}{b.shape}")


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name}: expected positive integer, got {value!r}")
    return int(value)


def check_odd(value, name: str) -> int:
    value = check_positive_int(value, name)
    if value % 2 == 0:
        raise ValueError(f"{name}: expected odd integer, got {value}")
    return value


def check_probability(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name}: expected probability in [0, 1], got {value!r}")
    return value


def check_range_pair(pair, name: str, lo=None, hi=None) -> tuple[float, float]:
    """Validate a (low, high) sampling range, optionally bounded."""
    try:
        a, b = pair
    except (TypeError, ValueError):
        raise ValueError(f"{name}: expected a (low, high) pair, got {pair!r}") from None
    a, b = float(a), float(b)
    if not (np.isfinite(a) and np.isfinite(b)) or a > b:
        raise ValueError(f"{name}: invalid range ({a}, {b})")
    if lo is not None and a < lo:
        raise ValueError(f"{name}: range start {a} below minimum {lo}")
    if hi is not None and b > hi:
        raise ValueError(f"{name}: range end {b} above maximum {hi}")
    return a, b
