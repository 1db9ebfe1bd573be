"""Small argument-checking helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["require", "as_float_array", "check_positive"]


def require(condition, message, exc=ValueError):
    """Raise ``exc(message)`` unless ``condition`` is truthy."""
    if not condition:
        raise exc(message)


def as_float_array(x, name="array", shape=None, finite=True):
    """Coerce to a float64 ndarray, optionally checking shape and finiteness.

    ``shape`` entries of ``None`` match any extent.
    """
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        require(
            arr.ndim == len(shape)
            and all(s is None or s == a for s, a in zip(shape, arr.shape)),
            f"{name}: expected shape {shape}, got {arr.shape}",
        )
    if finite:
        require(np.all(np.isfinite(arr)), f"{name}: contains non-finite values")
    return arr


def check_positive(name, value):
    require(np.isscalar(value) and value > 0, f"{name} must be positive, got {value!r}")
    return float(value)
