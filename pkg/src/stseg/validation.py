"""Input validation helpers shared across the package."""
import numpy as np


def as_float_array(x, name="array", dtype=np.float64):
    """Coerce to a contiguous float ndarray, rejecting non-finite input."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_xyz(points, name="points", allow_empty=False):
    """Validate an (N, 3) coordinate array and return it as float64."""
    arr = as_float_array(points, name)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def check_features(x, name="X", allow_empty=False):
    """Validate a 2-D feature matrix and return it as float64."""
    arr = as_float_array(x, name)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def check_unit_rows(x, name="features", tol=1e-6):
    """Assert every row of x has unit L2 norm (within tol)."""
    norms = np.linalg.norm(x, axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        raise ValueError(
            f"{name} rows must be unit-norm; worst deviation "
            f"{np.abs(norms - 1.0).max():.3e}"
        )
    return x


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_rng(rng):
    """Accept a Generator or a seed; return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
