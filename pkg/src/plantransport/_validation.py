"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive_float(value, name, strict=True):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number")
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        raise ValueError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")
    return value


def check_finite_array(values, name, ndim=None, dtype=float):
    arr = np.asarray(values, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_weights(weights, name="weights", normalized=False):
    w = check_finite_array(weights, name, ndim=1)
    if w.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if np.any(w < 0):
        raise ValueError(f"{name} must be nonnegative")
    if not np.any(w > 0):
        raise ValueError(f"{name} must contain at least one positive entry")
    if normalized and abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1, got {w.sum()!r}")
    return w


def stable_sum(values, axis=-1):
    """Sum along ``axis`` independently of the order of the entries.

    Entries are sorted before the reduction so that permuting the inputs
    (e.g. reordering curves) gives bit-identical results.
    """
    values = np.asarray(values, dtype=float)
    return np.sort(values, axis=axis).sum(axis=axis)
