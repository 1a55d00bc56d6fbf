"""Exact voxel traversal of a ray segment through a regular grid."""
import numpy as np


def cell_intervals(
    origin: np.ndarray,
    direction: np.ndarray,
    t_end: float,
    cell_size: float,
    lower: np.ndarray,
    shape: tuple,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cells crossed by origin + t * direction for t in [0, t_end].

    Boundary crossings are collected per axis, sorted, and every open
    interval between consecutive crossings is assigned the cell containing
    its midpoint. Cells outside `shape` are dropped.

    Args:
        origin: Ray origin (D,)
        direction: Ray direction (D,), not necessarily unit
        t_end: Segment end parameter
        cell_size: Edge length of a cell
        lower: Grid lower corner (D,)
        shape: Cells per axis

    Returns:
        (cells (K, D) int64, t_enter (K,), t_exit (K,)) ordered along the ray
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    ndim = origin.shape[0]

    if t_end <= 0:
        empty = np.zeros((0, ndim), dtype=np.int64)
        return empty, np.zeros(0), np.zeros(0)

    crossings = [np.array([0.0, float(t_end)])]
    end = origin + direction * t_end
    for axis in range(ndim):
        if direction[axis] == 0.0:
            continue
        lo = (min(origin[axis], end[axis]) - lower[axis]) / cell_size
        hi = (max(origin[axis], end[axis]) - lower[axis]) / cell_size
        planes = np.arange(np.ceil(lo), np.floor(hi) + 1.0)
        t = (lower[axis] + planes * cell_size - origin[axis]) / direction[axis]
        crossings.append(t[(t > 0.0) & (t < t_end)])

    ts = np.unique(np.concatenate(crossings))
    t_enter, t_exit = ts[:-1], ts[1:]
    keep = t_exit > t_enter
    t_enter, t_exit = t_enter[keep], t_exit[keep]

    mids = 0.5 * (t_enter + t_exit)
    points = origin[None, :] + mids[:, None] * direction[None, :]
    cells = np.floor((points - lower[None, :]) / cell_size).astype(np.int64)

    inside = np.all((cells >= 0) & (cells < np.asarray(shape)[None, :]), axis=1)
    return cells[inside], t_enter[inside], t_exit[inside]


def box_exit(origin: np.ndarray, direction: np.ndarray, lower=0.0, upper=1.0) -> float:
    """Parameter at which a ray starting inside [lower, upper]^D leaves the box."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(direction > 0, (upper - origin) / direction, np.inf)
        t_lo = np.where(direction < 0, (lower - origin) / direction, np.inf)
    return float(max(0.0, min(t_hi.min(), t_lo.min())))


def box_exit_many(origins: np.ndarray, directions: np.ndarray, lower=0.0, upper=1.0) -> np.ndarray:
    """Vectorized box_exit for (N, D) origins and directions."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(directions > 0, (upper - origins) / directions, np.inf)
        t_lo = np.where(directions < 0, (lower - origins) / directions, np.inf)
    return np.maximum(0.0, np.minimum(t_hi.min(axis=1), t_lo.min(axis=1)))
