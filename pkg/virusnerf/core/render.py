"""Occupancy-accelerated ray marching and volume rendering of color and depth."""
import math
from typing import Optional, Protocol

import numpy as np

from virusnerf.core.occgrid import is_occupied
from virusnerf.core.traversal import box_exit_many
from virusnerf.core.utils import InvalidArgumentError, require
from virusnerf.models.rays import (
    DepthScan,
    Ray,
    RayBatch,
    RaySamples,
    RenderResult,
    RenderTape,
)

DEFAULT_STEP = math.sqrt(3.0) / 1024
MAX_SAMPLES = 1024
BACKGROUND = np.zeros(3)
RENDER_CHUNK = 4096


class FieldLike(Protocol):
    """Anything queryable for density and radiance at unit-cube positions."""

    def density(self, positions: np.ndarray): ...

    def radiance(self, positions: np.ndarray, directions: np.ndarray): ...


def march_rays(
    rays: RayBatch,
    grid=None,
    step: float = DEFAULT_STEP,
    max_samples: int = MAX_SAMPLES,
) -> RaySamples:
    """
    Fixed-step samples t_near + k * step, k < floor((t_far - t_near) / step),
    dropping positions whose grid cell is unoccupied and keeping at most
    `max_samples` per ray.
    """
    require(step > 0, f"step must be > 0, got {step}")
    n_rays = len(rays)
    span = np.maximum(rays.t_far - rays.t_near, 0.0)
    counts = np.floor(span / step + 1e-9).astype(np.int64)

    ray_index = np.repeat(np.arange(n_rays), counts)
    offsets = np.cumsum(counts) - counts
    k = np.arange(ray_index.size) - np.repeat(offsets, counts)
    depths = rays.t_near[ray_index] + k * step
    directions = rays.directions[ray_index]
    positions = rays.origins[ray_index] + depths[:, None] * directions

    if grid is not None and ray_index.size:
        keep = is_occupied(grid, positions)
        ray_index, depths, positions, directions = (
            ray_index[keep],
            depths[keep],
            positions[keep],
            directions[keep],
        )

    if ray_index.size:
        first = np.searchsorted(ray_index, ray_index, side="left")
        rank = np.arange(ray_index.size) - first
        keep = rank < max_samples
        ray_index, depths, positions, directions = (
            ray_index[keep],
            depths[keep],
            positions[keep],
            directions[keep],
        )

    # a sample never integrates across skipped cells: delta = min(gap to the next sample, step)
    deltas = np.full(depths.shape, step, dtype=np.float64)
    if depths.size > 1:
        same_ray = ray_index[1:] == ray_index[:-1]
        gaps = depths[1:] - depths[:-1]
        deltas[:-1] = np.where(same_ray, np.minimum(gaps, step), step)

    return RaySamples(
        depths=depths,
        deltas=deltas,
        positions=np.clip(positions, 0.0, 1.0),
        directions=directions,
        ray_index=ray_index,
        n_rays=n_rays,
    )


def march_ray(ray: Ray, grid=None, step: float = DEFAULT_STEP, max_samples: int = MAX_SAMPLES) -> RaySamples:
    """Samples of a single ray (see march_rays)."""
    return march_rays(RayBatch.from_rays([ray]), grid, step, max_samples)


def _segment_starts(ray_index: np.ndarray, n_rays: int) -> np.ndarray:
    return np.searchsorted(ray_index, np.arange(n_rays), side="left")


def _exclusive_segment_cumsum(values: np.ndarray, ray_index: np.ndarray, n_rays: int) -> np.ndarray:
    if values.size == 0:
        return values.copy()
    inclusive = np.cumsum(values)
    exclusive = inclusive - values
    starts = _segment_starts(ray_index, n_rays)
    base = np.zeros(n_rays)
    has_samples = starts < values.size
    base[has_samples] = exclusive[starts[has_samples]]
    return exclusive - base[ray_index]


def composite(
    samples: RaySamples,
    sigma: np.ndarray,
    rgb: np.ndarray,
    background: Optional[np.ndarray] = None,
) -> tuple[RenderResult, RenderTape]:
    """
    Volume rendering of packed samples.

    T_j = exp(-sum_{l<j} sigma_l delta_l), w_j = T_j (1 - exp(-sigma_j delta_j)),
    C = sum w_j c_j + T_final * background, D = sum w_j d_j (not renormalized).
    Rays without samples get the background color and a NaN depth.
    """
    background = BACKGROUND if background is None else np.asarray(background, dtype=np.float64)
    n = samples.n_rays
    sigma = np.asarray(sigma, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    if sigma.shape != (samples.count,) or rgb.shape != (samples.count, 3):
        raise InvalidArgumentError("sigma/rgb do not match the sample count")

    tau = sigma * samples.deltas
    transmittance = np.exp(-_exclusive_segment_cumsum(tau, samples.ray_index, n))
    weights = transmittance * -np.expm1(-tau)
    final_t = np.exp(-np.bincount(samples.ray_index, weights=tau, minlength=n))

    color = np.stack(
        [np.bincount(samples.ray_index, weights=weights * rgb[:, c], minlength=n) for c in range(3)],
        axis=1,
    )
    color += final_t[:, None] * background[None, :]
    depth = np.bincount(samples.ray_index, weights=weights * samples.depths, minlength=n)

    hit = samples.counts_per_ray() > 0
    depth = np.where(hit, depth, np.nan)

    result = RenderResult(
        color=color,
        depth=depth,
        weights=weights,
        transmittance=transmittance,
        final_transmittance=final_t,
        hit=hit,
    )
    tape = RenderTape(
        samples=samples,
        sigma=sigma,
        rgb=rgb,
        weights=weights,
        transmittance=transmittance,
        final_transmittance=final_t,
        background=background,
    )
    return result, tape


def composite_backward(
    tape: RenderTape,
    dcolor: Optional[np.ndarray] = None,
    ddepth: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a scalar loss wrt per-sample sigma and rgb.

    Args:
        dcolor: dL/dC per ray (N, 3)
        ddepth: dL/dD per ray (N,); NaN entries are treated as zero

    Returns:
        (dsigma (S,), drgb (S, 3))
    """
    samples = tape.samples
    n = samples.n_rays
    ray = samples.ray_index
    dcolor = np.zeros((n, 3)) if dcolor is None else np.asarray(dcolor, dtype=np.float64)
    ddepth = np.zeros(n) if ddepth is None else np.nan_to_num(np.asarray(ddepth, dtype=np.float64))

    values = np.sum(dcolor[ray] * tape.rgb, axis=1) + ddepth[ray] * samples.depths
    weighted = tape.weights * values

    inclusive = _exclusive_segment_cumsum(weighted, ray, n) + weighted
    totals = np.bincount(ray, weights=weighted, minlength=n)
    suffix = totals[ray] - inclusive
    background_term = (dcolor @ tape.background) * tape.final_transmittance

    tau = tape.sigma * samples.deltas
    dtau = tape.transmittance * np.exp(-tau) * values - suffix - background_term[ray]
    dsigma = dtau * samples.deltas
    drgb = tape.weights[:, None] * dcolor[ray]
    return dsigma, drgb


def render_rays(
    samples: RaySamples, field: FieldLike, background: Optional[np.ndarray] = None
) -> tuple[RenderResult, RenderTape]:
    """Query the field at every sample and composite."""
    dtype = getattr(field, "dtype", np.float64)
    sigma, rgb, field_tape = field.radiance(
        samples.positions.astype(dtype), samples.directions.astype(dtype)
    )
    result, tape = composite(samples, sigma, rgb, background)
    tape.field_tape = field_tape
    return result, tape


def render_ray(samples: RaySamples, field: FieldLike) -> tuple[RenderResult, RenderTape]:
    """Render the rays of `samples` (usually one) through `field`."""
    return render_rays(samples, field)


def render_batch(
    rays: RayBatch,
    field: FieldLike,
    grid=None,
    step: float = DEFAULT_STEP,
    max_samples: int = MAX_SAMPLES,
    chunk: int = RENDER_CHUNK,
) -> RenderResult:
    """Inference rendering of many rays in chunks; weights are not kept."""
    colors, depths, finals, hits = [], [], [], []
    for start in range(0, len(rays), chunk):
        part = RayBatch(
            origins=rays.origins[start : start + chunk],
            directions=rays.directions[start : start + chunk],
            t_near=rays.t_near[start : start + chunk],
            t_far=rays.t_far[start : start + chunk],
        )
        samples = march_rays(part, grid, step, max_samples)
        if samples.count:
            result, _ = render_rays(samples, field)
        else:
            result, _ = composite(samples, np.zeros(0), np.zeros((0, 3)))
        colors.append(result.color)
        depths.append(result.depth)
        finals.append(result.final_transmittance)
        hits.append(result.hit)

    empty = np.zeros(0)
    return RenderResult(
        color=np.concatenate(colors) if colors else np.zeros((0, 3)),
        depth=np.concatenate(depths) if depths else empty,
        weights=empty,
        transmittance=empty,
        final_transmittance=np.concatenate(finals) if finals else empty,
        hit=np.concatenate(hits) if hits else np.zeros(0, dtype=bool),
    )


def rays_from_world(
    origins_m: np.ndarray,
    directions: np.ndarray,
    scene_box,
    near_m: float = 0.0,
) -> RayBatch:
    """World-frame rays (metres) -> unit-cube rays clipped to the cube."""
    origins = scene_box.to_unit(np.atleast_2d(origins_m))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    t_far = box_exit_many(origins, directions)
    t_near = np.full(t_far.shape, scene_box.length_to_unit(near_m))
    return RayBatch(origins=origins, directions=directions, t_near=t_near, t_far=np.maximum(t_far, t_near))


def render_scan(
    field: FieldLike,
    grid,
    pose: tuple,
    height: float,
    angular_step: float,
    scene_box,
    step: float = DEFAULT_STEP,
    min_opacity: float = 0.5,
    near_m: float = 0.0,
) -> DepthScan:
    """
    Horizontal 360-degree depth scan rendered at a planar pose.

    Args:
        pose: (x, y, yaw) in metres / radians
        height: Scan height in metres
        angular_step: Degrees between azimuths, measured from the pose heading
        scene_box: World <-> unit-cube mapping
        min_opacity: Rays with less accumulated opacity report no return

    Returns:
        DepthScan with depths in metres
    """
    require(angular_step > 0, f"angular_step must be > 0, got {angular_step}")
    n = int(round(360.0 / angular_step))
    azimuths = np.arange(n) * angular_step
    x, y, yaw = pose
    angles = np.deg2rad(azimuths) + yaw

    directions = np.stack([np.cos(angles), np.sin(angles), np.zeros(n)], axis=1)
    origins = np.tile([x, y, height], (n, 1))
    rays = rays_from_world(origins, directions, scene_box, near_m)

    result = render_batch(rays, field, grid, step)
    valid = result.hit & (result.opacity >= min_opacity)
    depths_m = np.where(valid, result.depth * scene_box.size, np.nan)
    return DepthScan(
        azimuths_deg=azimuths,
        depths_m=depths_m,
        pose=(float(x), float(y), float(yaw)),
        height_m=float(height),
        angular_step_deg=float(angular_step),
    )


def gaussian_profile(
    center: float, std: float, peak: float, n_samples: int = 1000, t_max: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced depths on [0, t_max) and a Gaussian density around `center`."""
    depths = np.arange(n_samples) * (t_max / n_samples)
    return depths, peak * np.exp(-0.5 * ((depths - center) / std) ** 2)


def measure_rendering_bias(depths: np.ndarray, densities: np.ndarray) -> tuple[float, float]:
    """
    Rendered depth of a density profile along one ray next to its center.

    Args:
        depths: Increasing sample depths (M,)
        densities: Non-negative densities (M,), symmetric about their center

    Returns:
        (rendered depth, density-weighted center)
    """
    depths = np.asarray(depths, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    require(depths.shape == densities.shape and depths.size >= 1, "profile shapes must match")
    require(np.all(densities >= 0) and densities.sum() > 0, "profile must be positive")

    deltas = np.empty_like(depths)
    deltas[:-1] = np.diff(depths)
    deltas[-1] = deltas[-2] if depths.size > 1 else 1.0
    samples = RaySamples(
        depths=depths,
        deltas=deltas,
        positions=np.zeros((depths.size, 3)),
        directions=np.tile([1.0, 0.0, 0.0], (depths.size, 1)),
        ray_index=np.zeros(depths.size, dtype=np.int64),
        n_rays=1,
    )
    result, _ = composite(samples, densities, np.zeros((depths.size, 3)))
    center = float(np.sum(densities * depths) / np.sum(densities))
    return float(result.depth[0]), center
