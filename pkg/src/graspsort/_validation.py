"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils import check_array


def check_points(X, name="X"):
    """Return ``X`` as a finite float64 array of shape (n, 3).

    Empty inputs are allowed and come back as a (0, 3) array.
    """
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((0, 3))
    X = check_array(X, dtype=np.float64, ensure_min_samples=0, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got shape {X.shape}")
    return X


def check_vector(v, size, name="v"):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (size,):
        raise ValueError(f"{name} must have {size} elements, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return float(value)


def unit(v, name="vector"):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError(f"{name} has zero or non-finite length")
    return v / n
