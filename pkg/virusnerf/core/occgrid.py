"""Bayesian occupancy grid: NeRF-Update, Depth-Update and skip queries."""
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from virusnerf.core.traversal import cell_intervals
from virusnerf.core.utils import require
from virusnerf.models.grid import (
    P_FLOOR,
    DensityGrid,
    DensityProjectionParams,
    InverseSensorModelParams,
    OccupancyGrid,
)

logger = logging.getLogger(__name__)

# Cells queried per field call during grid updates
QUERY_CHUNK = 65536


def bayes_update(prior, p_m_occ, p_m_emp) -> np.ndarray:
    """
    Posterior occupancy after one measurement.

    posterior = p_m_occ * prior / (p_m_occ * prior + p_m_emp * (1 - prior)),
    clamped to [P_FLOOR, 1 - P_FLOOR]. Where both likelihoods vanish the
    prior is returned unchanged.
    """
    prior = np.asarray(prior, dtype=np.float64)
    p_m_occ = np.asarray(p_m_occ, dtype=np.float64)
    p_m_emp = np.asarray(p_m_emp, dtype=np.float64)

    numerator = p_m_occ * prior
    denominator = numerator + p_m_emp * (1.0 - prior)
    degenerate = denominator <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        posterior = np.where(degenerate, prior, numerator / np.where(degenerate, 1.0, denominator))
    posterior = np.where(degenerate, prior, np.clip(posterior, P_FLOOR, 1.0 - P_FLOOR))
    return posterior


def count_degenerate(p_m_occ, p_m_emp, prior) -> int:
    """Number of updates whose evidence denominator is zero."""
    prior = np.asarray(prior, dtype=np.float64)
    denominator = np.asarray(p_m_occ) * prior + np.asarray(p_m_emp) * (1.0 - prior)
    return int(np.count_nonzero(denominator <= 0.0))


def project_density(sigma, zeta: float, sigma_t: float) -> np.ndarray:
    """Map density in [0, inf) to P = 1 / (1 + (sigma_T / sigma)^zeta); P(0) = 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(sigma > 0.0, sigma_t / np.where(sigma > 0.0, sigma, 1.0), np.inf)
        projected = 1.0 / (1.0 + ratio**zeta)
    return np.where(sigma > 0.0, projected, 0.0)


def apply_update(grid: OccupancyGrid, cells: np.ndarray, p_m_occ, p_m_emp):
    """Bayes-update the given (K, 3) cells; duplicate cells must not appear."""
    if len(cells) == 0:
        return grid
    ix, iy, iz = cells[:, 0], cells[:, 1], cells[:, 2]
    prior = grid.probabilities[ix, iy, iz]
    anomalies = count_degenerate(p_m_occ, p_m_emp, prior)
    if anomalies:
        grid.anomalies += anomalies
        logger.warning("Degenerate occupancy evidence", extra={"cells": anomalies})
    grid.probabilities[ix, iy, iz] = bayes_update(prior, p_m_occ, p_m_emp)
    return grid


def cell_centers(grid_resolution: int, flat_indices: np.ndarray) -> np.ndarray:
    """Unit-cube centers of flat [x, y, z] cell indices."""
    ijk = np.stack(np.unravel_index(flat_indices, (grid_resolution,) * 3), axis=1)
    return (ijk + 0.5) / grid_resolution


def _query_sigma(field, positions: np.ndarray) -> np.ndarray:
    dtype = getattr(field, "dtype", np.float64)
    chunks = []
    for start in range(0, positions.shape[0], QUERY_CHUNK):
        sigma, _ = field.density(positions[start : start + QUERY_CHUNK].astype(dtype))
        chunks.append(np.asarray(sigma, dtype=np.float64))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def _sample_cells(occupied: np.ndarray, sample_count: int, rng: np.random.Generator) -> np.ndarray:
    """Half uniform, half among occupied cells (uniform when none are occupied)."""
    total = occupied.size
    n_uniform = sample_count // 2
    n_occupied = sample_count - n_uniform
    uniform = rng.integers(0, total, size=n_uniform)
    occupied_flat = np.flatnonzero(occupied)
    if occupied_flat.size:
        chosen = occupied_flat[rng.integers(0, occupied_flat.size, size=n_occupied)]
    else:
        chosen = rng.integers(0, total, size=n_occupied)
    return np.unique(np.concatenate([uniform, chosen]))


def nerf_update(
    grid: OccupancyGrid,
    field,
    sample_count: int,
    params: DensityProjectionParams,
    rng: np.random.Generator,
) -> float:
    """
    Project field densities of sampled cells into occupancy evidence.

    sigma_T <- min(sigma_Tmax, mean sigma of the batch); every sampled cell
    is Bayes-updated with P = project_density(sigma) and 1 - P.

    Returns:
        The sigma_T used for this update
    """
    require(sample_count >= 1, f"sample_count must be >= 1, got {sample_count}")
    flat = _sample_cells(grid.occupied(), sample_count, rng)
    sigma = _query_sigma(field, cell_centers(grid.resolution, flat))

    batch_mean = float(sigma.mean()) if sigma.size else 0.0
    if batch_mean > 0.0:
        params.sigma_t = min(params.sigma_t_max, batch_mean)

    p_occ = project_density(sigma, params.zeta, params.sigma_t)
    cells = np.stack(np.unravel_index(flat, (grid.resolution,) * 3), axis=1)
    apply_update(grid, cells, p_occ, 1.0 - p_occ)
    grid.nerf_updates += 1

    logger.debug(
        "NeRF-Update",
        extra={"cells": int(flat.size), "sigma_t": params.sigma_t, "mean_sigma": batch_mean},
    )
    return params.sigma_t


def classify_ray_cells(
    origin: np.ndarray,
    direction: np.ndarray,
    depth: float,
    resolution: int,
    thickness_cells: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Split the cells a range ray crosses into (free, surface).

    Free cells end at or before depth - thickness; surface cells overlap
    [depth - thickness, depth + thickness]; nothing beyond is returned.
    """
    thickness = thickness_cells / resolution
    cells, t_enter, t_exit = cell_intervals(
        origin,
        direction,
        depth + thickness,
        1.0 / resolution,
        np.zeros(3),
        (resolution,) * 3,
    )
    free = t_exit <= depth - thickness
    surface = (t_enter < depth + thickness) & (t_exit > depth - thickness)
    return cells[free], cells[surface]


def depth_update(
    grid: OccupancyGrid,
    origin: np.ndarray,
    directions: np.ndarray,
    depths: np.ndarray,
    valid: np.ndarray,
    params: Optional[InverseSensorModelParams] = None,
) -> OccupancyGrid:
    """
    Integrate IRS range rays with a beam inverse sensor model.

    Args:
        grid: Grid updated in place
        origin: Sensor origin in unit-cube coordinates (3,)
        directions: Unit ray directions (K, 3)
        depths: Measured ranges in unit-cube lengths (K,)
        valid: Validity mask (K,); invalid rays update nothing
        params: Inverse sensor model; rays longer than params.max_range update nothing
    """
    params = params or InverseSensorModelParams()
    origin = np.asarray(origin, dtype=np.float64)
    require(
        origin.shape == (3,) and np.all(origin >= 0.0) and np.all(origin <= 1.0),
        "sensor origin must lie inside the unit cube",
    )

    for direction, depth, ok in zip(np.asarray(directions), np.asarray(depths), np.asarray(valid)):
        if not ok or not np.isfinite(depth) or depth <= 0.0 or depth > params.max_range:
            continue
        free, surface = classify_ray_cells(
            origin, direction, float(depth), grid.resolution, params.thickness_cells
        )
        apply_update(grid, free, params.p_emp, 1.0 - params.p_emp)
        apply_update(grid, surface, params.p_occ, 1.0 - params.p_occ)

    grid.depth_updates += 1
    return grid


def positions_to_cells(positions: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Half-open binning of unit-cube positions; the closing face x = 1
    belongs to the last cell.

    Returns:
        (cells (B, 3), inside mask (B,))
    """
    positions = np.asarray(positions, dtype=np.float64)
    inside = np.all((positions >= 0.0) & (positions <= 1.0), axis=1)
    cells = np.floor(positions * resolution).astype(np.int64)
    cells = np.clip(cells, 0, resolution - 1)
    return cells, inside


def is_occupied(grid, positions: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
    """True where the containing cell is occupied; outside the cube is unoccupied."""
    positions = np.atleast_2d(positions)
    cells, inside = positions_to_cells(positions, grid.resolution)
    if threshold is None or not isinstance(grid, OccupancyGrid):
        occupied = grid.occupied()
    else:
        occupied = grid.probabilities >= threshold
    return inside & occupied[cells[:, 0], cells[:, 1], cells[:, 2]]


def ngp_update(grid: DensityGrid, field, step: int, rng: np.random.Generator) -> float:
    """
    Heuristic density-cache update of the Instant-NGP-style baseline.

    All cells are queried during the warm-up steps, afterwards a quarter of
    them (half uniform, half occupied). Cached values decay, then take the
    max with fresh densities.

    Returns:
        The occupancy threshold after the update
    """
    total = grid.resolution**3
    if step < grid.warmup_steps:
        flat = np.arange(total)
    else:
        flat = _sample_cells(grid.occupied(), total // 4, rng)

    sigma = _query_sigma(field, cell_centers(grid.resolution, flat))
    grid.densities *= grid.decay
    ix, iy, iz = np.unravel_index(flat, (grid.resolution,) * 3)
    current = grid.densities[ix, iy, iz]
    grid.densities[ix, iy, iz] = np.where(np.isfinite(current), np.maximum(current, sigma), sigma)
    grid.nerf_updates += 1
    return grid.threshold


def export_raster(grid, path, scene_box: Optional[dict] = None) -> tuple[Path, Path]:
    """
    Write the grid as little-endian float32, row-major [x, y, z], plus a JSON sidecar.

    Returns:
        (raster path, sidecar path)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = grid.probabilities if isinstance(grid, OccupancyGrid) else grid.densities
    values.astype("<f4").tofile(path)

    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "resolution": grid.resolution,
                "order": "x-major [x, y, z]",
                "dtype": "float32-le",
                "kind": "probability" if isinstance(grid, OccupancyGrid) else "density",
                "threshold": float(grid.threshold),
                "scene_box": scene_box,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return path, sidecar
