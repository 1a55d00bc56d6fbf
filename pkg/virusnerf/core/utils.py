"""Errors and validation helpers shared by the numerical modules."""
from functools import wraps
from typing import Any, Iterable, Optional

import numpy as np


class VirusNerfError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(VirusNerfError, ValueError):
    """Raised when an operation receives arguments outside its contract."""


class NonFiniteGradientError(VirusNerfError):
    """Raised when an optimizer step sees NaN or inf gradients."""

    def __init__(self, diagnostics: dict):
        self.diagnostics = diagnostics
        names = ", ".join(f"{k} ({v} bad)" for k, v in diagnostics.items())
        super().__init__(f"Non-finite gradients in: {names}")


class InvalidPoseError(VirusNerfError):
    """Raised when a sensor origin lies outside free space."""


class CollisionError(VirusNerfError):
    """Raised when a trajectory sample collides with the environment."""

    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"Trajectory pose {index}: {message}")


class CheckpointFormatError(VirusNerfError):
    """Raised for unreadable or version-mismatched checkpoint containers."""


class DatasetError(VirusNerfError):
    """Raised for missing or malformed dataset directories."""


def require(condition: bool, message: str):
    """Raise InvalidArgumentError with `message` unless `condition` holds."""
    if not condition:
        raise InvalidArgumentError(message)


def require_unit_cube(positions: np.ndarray, name: str = "positions", tol: float = 0.0):
    """
    Ensure every coordinate lies in [0, 1].

    Args:
        positions: Array of shape (B, 3)
        name: Quantity name used in the error message
        tol: Slack allowed outside the cube
    """
    positions = np.asarray(positions)
    require(
        positions.ndim == 2 and positions.shape[1] == 3,
        f"{name} must have shape (B, 3), got {positions.shape}",
    )
    if positions.size and (
        positions.min() < -tol or positions.max() > 1.0 + tol or not np.all(np.isfinite(positions))
    ):
        raise InvalidArgumentError(f"{name} must lie inside the unit cube")


def require_unit_vectors(directions: np.ndarray, name: str = "directions", tol: float = 1e-6):
    """Ensure every row has unit Euclidean norm within `tol`."""
    directions = np.asarray(directions)
    require(
        directions.ndim == 2 and directions.shape[1] == 3,
        f"{name} must have shape (B, 3), got {directions.shape}",
    )
    norms = np.sqrt(np.sum(np.asarray(directions, dtype=np.float64) ** 2, axis=1))
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise InvalidArgumentError(f"{name} must be unit length within {tol}")


def require_probability(values: Any, name: str):
    """Ensure every value lies in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size and (np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr))):
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")


def validate_shapes(**expected):
    """
    Decorator checking the trailing dimension of named array arguments.

    Usage:
        @validate_shapes(colors=3)
        def color_loss(colors, rendered): ...
    """

    def decorator(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            names = f.__code__.co_varnames[: f.__code__.co_argcount]
            bound = dict(zip(names, args))
            bound.update(kwargs)
            for name, width in expected.items():
                value = bound.get(name)
                if value is None:
                    continue
                arr = np.asarray(value)
                if arr.ndim != 2 or arr.shape[1] != width:
                    raise InvalidArgumentError(
                        f"{name} must have shape (N, {width}), got {arr.shape}"
                    )
            return f(*args, **kwargs)

        return decorated

    return decorator


def spawn_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for a (seed, stream...) substream."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def count_nonfinite(arrays: Iterable[tuple[str, np.ndarray]]) -> dict:
    """Map name -> number of non-finite entries, only for offending arrays."""
    bad = {}
    for name, arr in arrays:
        n = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        if n:
            bad[name] = n
    return bad


def as_float_array(values: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    """Convert to a floating ndarray, keeping float32/float64 when already floating."""
    arr = np.asarray(values)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    return arr
