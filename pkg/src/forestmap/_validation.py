"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils import check_array

from .exceptions import ConfigError, InsufficientPointsError, ValidationError


def check_points(X, *, dim=3, min_points=0, name="points"):
    """Return ``X`` as a C-contiguous float64 array of shape (n, dim).

    Raises ValidationError for wrong shape or non-finite values and
    InsufficientPointsError when fewer than ``min_points`` rows are given.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, dim)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValidationError(f"{name} must have shape (n, {dim}), got {X.shape}")
    if X.shape[0] == 0:
        if min_points > 0:
            raise InsufficientPointsError(f"{name} is empty, need at least {min_points}")
        return np.ascontiguousarray(X)
    if not np.isfinite(X).all():
        raise ValidationError(f"{name} contains NaN or infinity")
    if X.shape[0] < min_points:
        raise InsufficientPointsError(
            f"{name} has {X.shape[0]} rows, need at least {min_points}"
        )
    return np.ascontiguousarray(X)


def check_estimator_input(X, name="X"):
    """sklearn-style validation for public ``fit``/``predict`` entry points."""
    try:
        return check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def check_normals(normals, n_points, *, atol=1e-6):
    """Validate a normal array against its point count and unit length."""
    if normals is None:
        return None
    normals = check_points(normals, name="normals")
    if normals.shape[0] != n_points:
        raise ValidationError(
            f"normals count {normals.shape[0]} does not match point count {n_points}"
        )
    if normals.shape[0] and np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > atol):
        raise ValidationError("normals must have unit length")
    return normals


def check_unit_vector(v, name="axis"):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be a finite 3-vector")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValidationError(f"{name} must be non-zero")
    return v / norm


def check_positive(value, name, *, integer=False, allow_zero=False):
    if integer and not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return value


def check_random_state_seed(seed):
    """Build a numpy Generator from an int seed, a Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
