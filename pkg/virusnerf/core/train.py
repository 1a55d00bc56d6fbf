"""Three-term loss, ray batching across modalities and the training loop."""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from virusnerf.core.diffnet import learning_rate_at, optim_step
from virusnerf.core.field import RadianceField, create_field
from virusnerf.core.occgrid import depth_update, nerf_update, ngp_update
from virusnerf.core.render import (
    DEFAULT_STEP,
    composite,
    composite_backward,
    march_rays,
    render_rays,
)
from virusnerf.core.simrig import camera_directions, irs_directions, rotate_z, stack_origins
from virusnerf.core.traversal import box_exit_many
from virusnerf.core.utils import (
    DatasetError,
    NonFiniteGradientError,
    require,
    spawn_rng,
    validate_shapes,
)
from virusnerf.models.grid import DensityGrid, DensityProjectionParams, OccupancyGrid
from virusnerf.models.network import OptimState
from virusnerf.models.rays import RayBatch
from virusnerf.models.sensors import Dataset
from virusnerf.models.training import LossReport, PixelBatch, RunConfig

logger = logging.getLogger(__name__)

TIMELINE_COLUMNS = [
    "step",
    "L_c",
    "L_IRS",
    "L_USS",
    "L_tot",
    "psnr",
    "nnd_acc_zone3",
    "nnd_cov_zone3",
]
# Wall-clock columns, kept apart so the timeline reproduces bit for bit
THROUGHPUT_COLUMNS = ["step", "wall_time_s", "steps_per_sec"]
# Random stream reserved for batch sampling and grid updates
TRAIN_STREAM = 1


# Losses
@validate_shapes(rendered=3, colors=3)
def color_loss(rendered: np.ndarray, colors: np.ndarray) -> float:
    """Sum over rays of the squared color error."""
    return float(np.sum((np.asarray(rendered) - np.asarray(colors)) ** 2))


def color_loss_grad(rendered: np.ndarray, colors: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(rendered) - np.asarray(colors))


def _depth_active(rendered_depth: np.ndarray, depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & np.isfinite(rendered_depth)


def irs_loss(rendered_depth: np.ndarray, depth: np.ndarray) -> float:
    """Squared depth error summed over rays with a point-like depth."""
    active = _depth_active(rendered_depth, depth)
    return float(np.sum((rendered_depth[active] - depth[active]) ** 2))


def irs_loss_grad(rendered_depth: np.ndarray, depth: np.ndarray) -> np.ndarray:
    active = _depth_active(rendered_depth, depth)
    grad = np.zeros(np.shape(rendered_depth))
    grad[active] = 2.0 * (rendered_depth[active] - depth[active])
    return grad


def uss_violators(rendered_depth: np.ndarray, depth: np.ndarray, eps: float) -> np.ndarray:
    """Rays rendering strictly closer than the echo minus the margin."""
    active = _depth_active(rendered_depth, depth)
    violating = np.zeros(active.shape, dtype=bool)
    violating[active] = rendered_depth[active] < depth[active] - eps
    return violating


def uss_loss(rendered_depth: np.ndarray, depth: np.ndarray, eps: float) -> float:
    """One-sided squared error on rays closer than the USS echo."""
    v = uss_violators(rendered_depth, depth, eps)
    return float(np.sum((rendered_depth[v] - depth[v]) ** 2))


def uss_loss_grad(rendered_depth: np.ndarray, depth: np.ndarray, eps: float) -> np.ndarray:
    v = uss_violators(rendered_depth, depth, eps)
    grad = np.zeros(np.shape(rendered_depth))
    grad[v] = 2.0 * (rendered_depth[v] - depth[v])
    return grad


def compute_losses(
    batch: PixelBatch,
    rendered_color: np.ndarray,
    rendered_depth_m: np.ndarray,
    run: RunConfig,
    color_enabled: bool = True,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """
    Per-term means over active rays and their gradients.

    Returns:
        (report, dL/dC (N, 3), dL/dD in metres (N,))
    """
    cfg = run.train
    n = len(batch)
    report = LossReport()
    dcolor = np.zeros((n, 3))
    ddepth = np.zeros(n)

    if "cam" in run.sensors:
        report.L_c = cfg.color_weight * color_loss(rendered_color, batch.colors) / n
        report.counts["color"] = n
        if color_enabled:
            dcolor = cfg.color_weight * color_loss_grad(rendered_color, batch.colors) / n

    point = _depth_active(rendered_depth_m, batch.point_depth)
    report.counts["irs"] = int(point.sum())
    if point.any():
        report.L_IRS = cfg.irs_weight * irs_loss(rendered_depth_m, batch.point_depth) / point.sum()
        ddepth += cfg.irs_weight * irs_loss_grad(rendered_depth_m, batch.point_depth) / point.sum()

    carriers = _depth_active(rendered_depth_m, batch.uss_depth)
    report.counts["uss"] = int(carriers.sum())
    if carriers.any():
        eps = cfg.eps_uss
        report.L_USS = cfg.uss_weight * uss_loss(rendered_depth_m, batch.uss_depth, eps) / carriers.sum()
        ddepth += cfg.uss_weight * uss_loss_grad(rendered_depth_m, batch.uss_depth, eps) / carriers.sum()

    return report, dcolor, ddepth


@dataclass
class RayBank:
    """
    Every camera pixel ray of a dataset, frame-major, in unit-cube coordinates.

    Depth supervision stays in metres; NaN marks no association.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    colors: np.ndarray
    point_depth: np.ndarray
    uss_depth: np.ndarray
    frame: np.ndarray
    stack: np.ndarray
    timestamp: np.ndarray
    frame_end: np.ndarray
    scale: float

    def __len__(self):
        return self.origins.shape[0]

    def batch(self, idx: np.ndarray) -> PixelBatch:
        return PixelBatch(
            rays=RayBatch(
                origins=self.origins[idx],
                directions=self.directions[idx],
                t_near=self.t_near[idx],
                t_far=self.t_far[idx],
            ),
            colors=self.colors[idx],
            point_depth=self.point_depth[idx],
            uss_depth=self.uss_depth[idx],
            frame=self.frame[idx],
            stack=self.stack[idx],
        )

    def pixel_indices(self, frame: int, stack: int) -> np.ndarray:
        start = 0 if frame == 0 else self.frame_end[frame - 1]
        idx = np.arange(start, self.frame_end[frame])
        return idx[self.stack[idx] == stack]


def irs_pixel_association(rig) -> np.ndarray:
    """Nearest camera pixel (by angle) of every IRS zone, using the nominal zone directions."""
    nominal = irs_directions(rig.model_copy(update={"irs_angular_error_deg": 0.0}), 0.0)
    return np.argmax(nominal @ camera_directions(rig).T, axis=1)


def uss_pixel_mask(rig) -> np.ndarray:
    """Pixels whose ray lies inside the USS cone."""
    return camera_directions(rig)[:, 0] >= math.cos(math.radians(rig.uss_half_angle_deg))


def build_ray_bank(dataset: Dataset, run: RunConfig) -> RayBank:
    """
    Cast every pixel ray and attach IRS / USS / dense depth supervision.

    Each IRS zone supervises its nearest pixel; a USS echo is shared by every
    pixel inside the cone; dense depth (RGB-D) covers every pixel it hit.
    Rays use the stored, possibly perturbed, poses.
    """
    if dataset is None or len(dataset) == 0:
        raise DatasetError("dataset has no frames")
    rig, box = dataset.rig, dataset.scene_box
    cam_dirs = camera_directions(rig)
    n_pix = len(cam_dirs)
    zone_pixels = irs_pixel_association(rig)
    cone = uss_pixel_mask(rig)

    total = len(dataset) * 2 * n_pix
    origins = np.empty((total, 3))
    directions = np.empty((total, 3))
    colors = np.empty((total, 3))
    point_depth = np.full(total, np.nan)
    uss_depth = np.full(total, np.nan)
    frame_ids = np.empty(total, dtype=np.int64)
    stack_ids = np.empty(total, dtype=np.int64)
    timestamps = np.empty(total)

    cursor = 0
    for frame in dataset.frames:
        for stack, (origin, yaw) in enumerate(stack_origins(rig, frame.pose)):
            sl = slice(cursor, cursor + n_pix)
            unit_origin = box.to_unit(origin)
            if np.any(unit_origin < 0.0) or np.any(unit_origin > 1.0):
                raise DatasetError(f"frame {frame.index}: sensor origin outside the scene box")
            origins[sl] = unit_origin
            directions[sl] = rotate_z(cam_dirs, yaw)
            colors[sl] = frame.images[stack].reshape(-1, 3) / 255.0
            frame_ids[sl] = frame.index
            stack_ids[sl] = stack
            timestamps[sl] = frame.timestamp

            depth = np.full(n_pix, np.nan)
            if "irs" in run.sensors:
                valid = np.isfinite(frame.irs[stack])
                depth[zone_pixels[valid]] = frame.irs[stack][valid]
            if "rgbd" in run.sensors and frame.depth is not None:
                dense = frame.depth[stack].ravel().astype(np.float64)
                depth = np.where(np.isfinite(dense), dense, depth)
            point_depth[sl] = depth

            if "uss" in run.sensors and np.isfinite(frame.uss[stack]):
                echo = np.full(n_pix, np.nan)
                echo[cone] = frame.uss[stack]
                uss_depth[sl] = echo
            cursor += n_pix

    t_near = np.full(total, float(box.length_to_unit(run.train.near_m)))
    t_far = np.maximum(box_exit_many(origins, directions), t_near + 1e-9)
    frame_end = np.cumsum(np.full(len(dataset), 2 * n_pix))
    return RayBank(
        origins=origins,
        directions=directions,
        t_near=t_near,
        t_far=t_far,
        colors=colors,
        point_depth=point_depth,
        uss_depth=uss_depth,
        frame=frame_ids,
        stack=stack_ids,
        timestamp=timestamps,
        frame_end=frame_end,
        scale=float(box.size),
    )


def irs_rays(dataset: Dataset, frame_index: int) -> list:
    """Per stack: (unit origin, nominal unit directions, unit depths, valid)."""
    rig, box = dataset.rig, dataset.scene_box
    frame = dataset.frames[frame_index]
    nominal = rig.model_copy(update={"irs_angular_error_deg": 0.0})
    rays = []
    for stack, (origin, yaw) in enumerate(stack_origins(rig, frame.pose)):
        ranges = frame.irs[stack]
        valid = np.isfinite(ranges) & (ranges <= rig.irs_max_range_m)
        rays.append(
            (
                box.to_unit(origin),
                irs_directions(nominal, yaw),
                box.length_to_unit(np.nan_to_num(ranges, nan=0.0)),
                valid,
            )
        )
    return rays


@dataclass
class TrainState:
    """Everything that evolves during training; checkpoints store all of it."""

    field: RadianceField
    grid: object
    optim: OptimState
    projection: DensityProjectionParams
    rng: np.random.Generator
    step: int = 0
    consumed: Optional[np.ndarray] = None

    def __repr__(self):
        return f"<TrainState step={self.step} grid={self.grid!r}>"


def init_state(run: RunConfig, n_frames: int) -> TrainState:
    dtype = np.float32 if run.train.dtype == "float32" else np.float64
    if run.grid.variant == "virus":
        grid = OccupancyGrid(resolution=run.grid.resolution, threshold=run.grid.threshold)
    else:
        grid = DensityGrid(resolution=run.grid.resolution, warmup_steps=run.grid.ngp_warmup_steps)
    return TrainState(
        field=create_field(run.hash_grid.to_config(), seed=run.seed, dtype=dtype),
        grid=grid,
        optim=OptimState(lr=run.train.lr_start),
        projection=run.grid.projection(),
        rng=spawn_rng(run.seed, TRAIN_STREAM),
        consumed=np.zeros(n_frames, dtype=bool),
    )


class PlaybackClock:
    """
    Simulated recording time at a training step.

    The "steps" clock advances seconds_per_step * speed per step and is
    deterministic; the "wall" clock follows elapsed real time times speed.
    """

    def __init__(self, timestamps: np.ndarray, run: RunConfig):
        cfg = run.train
        self.start = float(timestamps[0])
        duration = float(timestamps[-1] - timestamps[0])
        self.seconds_per_step = cfg.seconds_per_step or (
            duration / (0.8 * cfg.steps) if duration > 0 else 1.0
        )
        self.speed = cfg.playback_speed
        self.kind = cfg.clock
        self._wall_start = None

    def now(self, step: int) -> float:
        if self.kind == "wall":
            if self._wall_start is None:
                self._wall_start = time.perf_counter()
            return self.start + (time.perf_counter() - self._wall_start) * self.speed
        return self.start + step * self.seconds_per_step * self.speed


def visible_frame_count(timestamps: np.ndarray, now: float) -> int:
    """Frames recorded at or before `now`; at least the first frame."""
    return max(1, int(np.searchsorted(timestamps, now, side="right")))


def sample_rays(bank: RayBank, n_available: int, run: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform over the first `n_available` pixels, optionally enriching depth-supervised rays."""
    n = run.train.batch_size
    fraction = run.train.irs_ray_fraction
    if fraction:
        pool = np.flatnonzero(np.isfinite(bank.point_depth[:n_available]))
        k = int(round(n * fraction)) if pool.size else 0
        enriched = pool[rng.integers(0, pool.size, size=k)] if k else np.zeros(0, dtype=np.int64)
        uniform = rng.integers(0, n_available, size=n - k)
        return np.sort(np.concatenate([enriched, uniform]))
    return np.sort(rng.integers(0, n_available, size=n))


def train_step(state: TrainState, bank: RayBank, n_available: int, run: RunConfig) -> LossReport:
    """
    One optimization step on a fresh ray batch.

    Non-finite losses or gradients skip the update and are logged; the step
    counter advances either way.
    """
    cfg = run.train
    warmup = state.step < cfg.density_warmup_steps
    state.field.frozen = {"color"} if warmup else set()

    idx = sample_rays(bank, n_available, run, state.rng)
    batch = bank.batch(idx)
    grid = state.grid if cfg.skip_empty else None
    samples = march_rays(batch.rays, grid, DEFAULT_STEP, cfg.max_samples)

    if samples.count:
        result, tape = render_rays(samples, state.field)
    else:
        result, tape = composite(samples, np.zeros(0), np.zeros((0, 3)))

    report, dcolor, ddepth_m = compute_losses(
        batch, result.color, result.depth * bank.scale, run, color_enabled=not warmup
    )
    report.counts["samples"] = samples.count
    report.counts["max_frame"] = int(batch.frame.max())

    if not math.isfinite(report.L_tot):
        report.skipped = True
        logger.warning("Skipped step with non-finite loss", extra={"step": state.step, **report.as_row()})
    elif samples.count:
        dsigma, drgb = composite_backward(tape, dcolor, ddepth_m * bank.scale)
        dtype = state.field.dtype
        grads = state.field.backward(
            tape.field_tape, dsigma.astype(dtype), drgb.astype(dtype)
        ).as_dict()
        state.optim.lr = learning_rate_at(state.step, cfg.steps, cfg.lr_start, cfg.lr_end)
        try:
            optim_step(state.optim, state.field.parameters(), grads)
        except NonFiniteGradientError:
            report.skipped = True

    state.step += 1
    return report


def update_grid(state: TrainState, run: RunConfig):
    """Density-driven grid update at the configured cadence."""
    if state.step % run.train.grid_update_every:
        return
    if isinstance(state.grid, OccupancyGrid):
        nerf_update(
            state.grid, state.field, run.train.nerf_update_samples, state.projection, state.rng
        )
    else:
        ngp_update(state.grid, state.field, state.step, state.rng)


def integrate_depth(state: TrainState, dataset: Dataset, run: RunConfig, frames) -> int:
    """Depth-Update with the IRS rays of the given frames; returns the frame count used."""
    if not isinstance(state.grid, OccupancyGrid) or "irs" not in run.sensors:
        return 0
    params = run.grid.inverse_model(dataset.scene_box)
    for index in frames:
        for origin, directions, depths, valid in irs_rays(dataset, int(index)):
            depth_update(state.grid, origin, directions, depths, valid, params)
    return len(frames)


@dataclass
class TrainResult:
    """Trained state plus the metrics timeline and the frame-consumption log."""

    state: TrainState
    timeline: pd.DataFrame
    consumption: pd.DataFrame
    steps_per_sec: float
    last_report: Optional[LossReport] = None
    evaluations: list = field(default_factory=list)
    throughput: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=THROUGHPUT_COLUMNS))

    @property
    def field(self) -> RadianceField:
        return self.state.field

    @property
    def grid(self):
        return self.state.grid


def check_causality(consumption: pd.DataFrame) -> bool:
    """True when no step sampled a frame recorded after its simulated time."""
    if consumption.empty:
        return True
    return bool(np.all(consumption["max_timestamp"] <= consumption["now"] + 1e-9))


def run_training(
    dataset: Dataset,
    run: RunConfig,
    evaluator: Optional[Callable] = None,
    state: Optional[TrainState] = None,
    log_every: int = 50,
    checkpoint_every: Optional[int] = None,
    on_checkpoint: Optional[Callable] = None,
) -> TrainResult:
    """
    Train until run.train.steps, resuming from `state` when given.

    Args:
        dataset: Recorded frames
        run: Run configuration; run.train.mode selects offline or online
        evaluator: Called as evaluator(state, visible_frames) -> dict of metrics
        state: Previously checkpointed state
        log_every: Timeline/log row interval in steps
        checkpoint_every: Interval for on_checkpoint(state)
        on_checkpoint: Persists the state
    """
    if dataset is None or len(dataset) == 0:
        raise DatasetError("dataset has no frames")
    cfg = run.train
    require(log_every >= 1, f"log_every must be >= 1, got {log_every}")

    bank = build_ray_bank(dataset, run)
    state = state or init_state(run, len(dataset))
    timestamps = dataset.timestamps
    clock = PlaybackClock(timestamps, run)
    epoch_steps = max(1, math.ceil(len(bank) / cfg.batch_size))

    rows, throughput, consumption, evaluations = [], [], [], []
    started = time.perf_counter()
    last_time, last_step = started, state.step
    report = None

    def snapshot(visible: int) -> dict:
        if evaluator is None:
            return {}
        metrics = evaluator(state, np.arange(visible))
        evaluations.append({"step": state.step, **metrics})
        return metrics

    while state.step < cfg.steps:
        if cfg.mode == "online":
            now = clock.now(state.step)
            visible = visible_frame_count(timestamps, now)
            fresh = np.flatnonzero(~state.consumed[:visible])
            if fresh.size:
                integrate_depth(state, dataset, run, fresh)
                state.consumed[fresh] = True
        else:
            now = float(timestamps[-1])
            visible = len(dataset)
            if state.step % epoch_steps == 0:
                integrate_depth(state, dataset, run, range(len(dataset)))
                state.consumed[:] = True

        n_available = int(bank.frame_end[visible - 1])
        step = state.step
        report = train_step(state, bank, n_available, run)
        consumption.append(
            {
                "step": step,
                "now": now,
                "max_timestamp": float(timestamps[report.counts["max_frame"]]),
            }
        )
        update_grid(state, run)

        at_eval = state.step % cfg.eval_every == 0 or state.step == cfg.steps
        if state.step % log_every == 0 or at_eval:
            current = time.perf_counter()
            rate = (state.step - last_step) / max(current - last_time, 1e-12)
            last_time, last_step = current, state.step
            metrics = snapshot(visible) if at_eval else {}
            throughput.append({"step": state.step, "wall_time_s": current - started, "steps_per_sec": rate})
            row = {
                "step": state.step,
                **report.as_row(),
                "psnr": metrics.get("psnr", np.nan),
                "nnd_acc_zone3": metrics.get("nnd_acc_zone3", np.nan),
                "nnd_cov_zone3": metrics.get("nnd_cov_zone3", np.nan),
            }
            rows.append(row)
            logger.info(
                "Training step",
                extra={
                    "step": state.step,
                    "sigma_t": state.projection.sigma_t,
                    "samples": report.counts.get("samples", 0),
                    **report.as_row(),
                },
            )

        if checkpoint_every and on_checkpoint and state.step % checkpoint_every == 0:
            on_checkpoint(state)

    elapsed = time.perf_counter() - started
    steps_done = len(consumption)
    return TrainResult(
        state=state,
        timeline=pd.DataFrame(rows, columns=TIMELINE_COLUMNS),
        consumption=pd.DataFrame(consumption, columns=["step", "now", "max_timestamp"]),
        steps_per_sec=steps_done / elapsed if elapsed > 0 else float("inf"),
        last_report=report,
        evaluations=evaluations,
        throughput=pd.DataFrame(throughput, columns=THROUGHPUT_COLUMNS),
    )


def run_offline(dataset: Dataset, run: RunConfig, **kwargs) -> TrainResult:
    """Train with the whole recording visible from step 0."""
    run = run.model_copy(update={"train": run.train.model_copy(update={"mode": "offline"})})
    return run_training(dataset, run, **kwargs)


def run_online(dataset: Dataset, run: RunConfig, **kwargs) -> TrainResult:
    """Train on frames as the playback clock reaches their timestamps."""
    run = run.model_copy(update={"train": run.train.model_copy(update={"mode": "online"})})
    return run_training(dataset, run, **kwargs)
