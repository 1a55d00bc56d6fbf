"""Experiment orchestration: datasets, training runs, evaluation and ablations."""
import json
import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from virusnerf.core.checkpoint import load_checkpoint, save_checkpoint
from virusnerf.core.evaluation import (
    ablation_report,
    build_global_map,
    evaluate_field,
    evaluate_scan,
    gt_scan,
    psnr,
    sensor_baseline_scan,
    summarize,
)
from virusnerf.core.occgrid import export_raster
from virusnerf.core.render import render_batch, render_scan, rays_from_world
from virusnerf.core.report import (
    write_ablation,
    write_json,
    write_metrics,
    write_scans,
    write_timeline_charts,
)
from virusnerf.core.scenes import get_scene, make_trajectory
from virusnerf.core.simrig import camera_rays, generate_dataset, load_dataset, save_dataset, stack_origins
from virusnerf.core.train import THROUGHPUT_COLUMNS, TIMELINE_COLUMNS, TrainResult, run_training
from virusnerf.core.utils import DatasetError, InvalidArgumentError
from virusnerf.models.metrics import GlobalMap
from virusnerf.models.sensors import Dataset, RigConfig, SceneBox
from virusnerf.models.training import AblationConfig, RunConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.json"
CHECKPOINT_NAME = "checkpoint.vnrf"
BASELINE_SENSORS = ("lidar", "irs", "uss")


def _read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgumentError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            data = json.loads(text)
            # The echo a previous run wrote wraps the config with its hash
            return data.get("config", data) if isinstance(data, dict) else data
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise InvalidArgumentError(f"{path}: {e}") from e


def _set_dotted(data: dict, key: str, value):
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """
    Build a RunConfig from a TOML file (or a resolved JSON echo) plus overrides.

    Args:
        path: Config file; None starts from the defaults
        overrides: Dotted keys ("train.steps") -> value; None values are ignored

    Raises:
        pydantic.ValidationError: when the merged config breaks a constraint
    """
    data = _read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)
    return RunConfig(**data)


def load_ablation_config(path) -> AblationConfig:
    return AblationConfig(**_read_config_file(path))


def write_resolved_config(out_dir, run: RunConfig) -> Path:
    """Echo the exact config and its hash next to the run outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG
    payload = {"config": run.model_dump(mode="json"), "sha256": run.config_hash(), "seed": run.seed}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def build_dataset(run: RunConfig) -> Dataset:
    """Simulate the run's scene, trajectory and rig."""
    scene = get_scene(run.scene)
    trajectory = make_trajectory(scene, run.trajectory, run.n_poses)
    return generate_dataset(scene.env, trajectory, run.rig, run.seed, run.pose_noise)


def generate(run: RunConfig, out_dir) -> Dataset:
    dataset = build_dataset(run)
    save_dataset(dataset, out_dir)
    logger.info("Saved dataset", extra={"path": str(out_dir), "frames": len(dataset)})
    return dataset


def obtain_dataset(run: RunConfig) -> Dataset:
    """Load run.dataset when set, otherwise simulate in memory."""
    if run.dataset:
        dataset = load_dataset(run.dataset)
        if "rgbd" in run.sensors and not any(f.depth is not None for f in dataset.frames):
            raise DatasetError(f"{run.dataset}: the rgbd sensor needs a dataset with dense depth")
        return dataset
    return build_dataset(run)


def _read_meta(dataset_path) -> dict:
    meta_path = Path(dataset_path) / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"{dataset_path}: missing meta.json")
    return json.loads(meta_path.read_text())


def read_scene_box(dataset_path) -> SceneBox:
    return SceneBox.from_dict(_read_meta(dataset_path)["scene_box"])


def load_rig(dataset_path) -> RigConfig:
    return RigConfig(**_read_meta(dataset_path)["rig"])


def global_map_for(dataset: Dataset) -> GlobalMap:
    """Ground-truth map from every LiDAR frame of the recording at its true pose."""
    scans = [(f.lidar, f.true_pose) for f in dataset.frames if f.lidar is not None]
    if not scans:
        raise DatasetError("dataset holds no LiDAR frames to build the evaluation map")
    return build_global_map(scans, dataset.rig.sensor_height_m)


def eval_pose_indices(n_frames: int, stride: int, visible: Optional[np.ndarray] = None) -> np.ndarray:
    indices = np.arange(n_frames) if visible is None else np.asarray(visible)
    return indices[:: max(1, stride)]


def frame_psnr(radiance_field, grid, dataset: Dataset, frame_index: int, run: RunConfig) -> float:
    """PSNR of the rendered first-stack image against the recorded one."""
    rig = dataset.rig
    frame = dataset.frames[frame_index]
    origin, yaw = stack_origins(rig, frame.pose)[0]
    origins, directions = camera_rays(rig, origin, yaw)
    rays = rays_from_world(origins, directions, dataset.scene_box, run.train.near_m)
    result = render_batch(rays, radiance_field, grid, max_samples=run.train.max_samples)
    rendered = np.clip(result.color, 0.0, 1.0).reshape(rig.image_height, rig.image_width, 3)
    return psnr(rendered, frame.images[0] / 255.0)


def make_evaluator(
    dataset: Dataset, run: RunConfig, global_map: GlobalMap, stride: int, angular_step: float
):
    """Evaluator for run_training: PSNR on the newest visible frame plus zone NND on visible poses."""

    def evaluate(state, visible: np.ndarray) -> dict:
        metrics = {"psnr": frame_psnr(state.field, state.grid, dataset, int(visible[-1]), run)}
        poses = [dataset.frames[i].true_pose for i in eval_pose_indices(len(dataset), stride, visible)]
        scans = evaluate_field(
            state.field,
            state.grid,
            global_map,
            poses,
            dataset.scene_box,
            dataset.rig.sensor_height_m,
            angular_step,
            run.train.min_opacity,
        )
        metrics.update(summarize(scans))
        return metrics

    return evaluate


@dataclass
class RunOutcome:
    """A finished training run with its final evaluation."""

    result: TrainResult
    summary: dict
    out_dir: Path
    paths: dict = field(default_factory=dict)


def _merge_timeline(path: Path, timeline: pd.DataFrame, resumed_step: int, columns: list) -> pd.DataFrame:
    if resumed_step and path.is_file():
        previous = pd.read_csv(path)
        previous = previous[previous["step"] <= resumed_step]
        return pd.concat([previous, timeline], ignore_index=True)[columns]
    return timeline


def train_run(
    run: RunConfig,
    settings,
    out_dir=None,
    resume: bool = False,
    export_grid: bool = False,
    plots: bool = False,
    dataset: Optional[Dataset] = None,
) -> RunOutcome:
    """
    Train one run and evaluate the result.

    Writes the resolved config, periodic and final checkpoints, timeline.csv,
    consumption.csv, metrics.csv/json and per-pose scan CSVs, all of which
    repeat byte for byte for the same config. Wall-clock figures go to
    throughput.csv and throughput.json.

    Args:
        run: Resolved run configuration
        settings: Application Config (cadences, evaluation stride, output root)
        out_dir: Output directory; defaults to run.output_dir, then OUTPUT_DIR/<arm>/seed-<seed>
        resume: Continue from the checkpoint in out_dir when present
        export_grid: Also write the occupancy raster
        plots: Also write SVG timeline charts
        dataset: Pre-built dataset, skips loading / simulation
    """
    out = Path(out_dir or run.output_dir or Path(settings.OUTPUT_DIR) / slug(run.arm_name) / f"seed-{run.seed}")
    write_resolved_config(out, run)
    config_hash = run.config_hash()
    checkpoint_path = out / CHECKPOINT_NAME

    dataset = dataset or obtain_dataset(run)
    state = None
    if resume and checkpoint_path.is_file():
        state, meta = load_checkpoint(checkpoint_path)
        if meta["config_hash"] != config_hash:
            raise InvalidArgumentError(
                f"{checkpoint_path} was written by a different config ({meta['config_hash'][:12]})"
            )
        if state.consumed is None or len(state.consumed) != len(dataset):
            raise DatasetError(f"{checkpoint_path} does not match the dataset frame count")
        logger.info("Resuming run", extra={"step": state.step, "path": str(checkpoint_path)})
    resumed_step = state.step if state is not None else 0

    global_map = global_map_for(dataset)
    evaluator = make_evaluator(
        dataset, run, global_map, settings.EVAL_POSE_STRIDE, settings.SCAN_ANGULAR_STEP_DEG
    )
    result = run_training(
        dataset,
        run,
        evaluator=evaluator,
        state=state,
        log_every=settings.LOG_EVERY_STEPS,
        checkpoint_every=settings.CHECKPOINT_EVERY_STEPS,
        on_checkpoint=lambda s: save_checkpoint(checkpoint_path, s, config_hash),
    )
    save_checkpoint(checkpoint_path, result.state, config_hash)

    timeline_path = out / "timeline.csv"
    timeline = _merge_timeline(timeline_path, result.timeline, resumed_step, TIMELINE_COLUMNS)
    timeline.to_csv(timeline_path, index=False)
    throughput_path = out / "throughput.csv"
    _merge_timeline(throughput_path, result.throughput, resumed_step, THROUGHPUT_COLUMNS).to_csv(
        throughput_path, index=False
    )
    result.consumption.to_csv(out / "consumption.csv", index=False)

    poses = [dataset.frames[i].true_pose for i in eval_pose_indices(len(dataset), settings.EVAL_POSE_STRIDE)]
    scans = evaluate_field(
        result.field,
        result.grid,
        global_map,
        poses,
        dataset.scene_box,
        dataset.rig.sensor_height_m,
        settings.SCAN_ANGULAR_STEP_DEG,
        run.train.min_opacity,
    )
    summary = summarize(scans)
    summary["steps"] = result.state.step
    summary["seed"] = run.seed
    summary["config_sha256"] = config_hash

    paths = {"checkpoint": checkpoint_path, "timeline": timeline_path}
    paths["metrics_csv"], paths["metrics_json"] = write_metrics(out, scans, summary)
    write_scans(out, scans)
    # Throughput is wall-clock dependent and stays out of metrics.json
    write_json(out / "throughput.json", {"steps_per_sec": result.steps_per_sec})
    if export_grid:
        paths["grid"], _ = export_raster(result.grid, out / "grid.bin", dataset.scene_box.to_dict())
    if plots:
        write_timeline_charts(out, timeline)

    logger.info(
        "Finished run",
        extra={"arm": run.arm_name, "seed": run.seed, "steps": result.state.step, "out": str(out)},
    )
    return RunOutcome(result=result, summary=summary, out_dir=out, paths=paths)


def baseline_metrics(
    dataset: Dataset, global_map: GlobalMap, indices: np.ndarray, kind: str, angular_step: float
) -> list:
    """Momentary scans of one sensor kind scored like the rendered scans."""
    results = []
    for i in indices:
        frame = dataset.frames[int(i)]
        predicted = sensor_baseline_scan(frame, dataset.rig, kind, angular_step)
        truth = gt_scan(global_map, frame.true_pose, dataset.rig.sensor_height_m, angular_step)
        metrics = evaluate_scan(predicted, truth)
        metrics.extra["scan"] = predicted
        results.append(metrics)
    return results


def evaluate_run(
    checkpoint_path,
    dataset_path,
    out_dir,
    settings,
    min_opacity: float = 0.5,
    baselines: bool = True,
) -> dict:
    """
    Score a checkpoint on a dataset's test poses, plus the sensor baselines.

    Returns:
        Kind ("field", "lidar", "irs", "uss") -> summary dict
    """
    state, meta = load_checkpoint(checkpoint_path)
    dataset = load_dataset(dataset_path)
    global_map = global_map_for(dataset)
    indices = eval_pose_indices(len(dataset), settings.EVAL_POSE_STRIDE)
    out = Path(out_dir)

    scans = evaluate_field(
        state.field,
        state.grid,
        global_map,
        [dataset.frames[i].true_pose for i in indices],
        dataset.scene_box,
        dataset.rig.sensor_height_m,
        settings.SCAN_ANGULAR_STEP_DEG,
        min_opacity,
    )
    summary = summarize(scans)
    summary["steps"] = meta["step"]
    write_metrics(out, scans, summary)
    write_scans(out, scans)
    summaries = {"field": summary}

    if baselines:
        for kind in BASELINE_SENSORS:
            if kind == "lidar" and not any(f.lidar is not None for f in dataset.frames):
                continue
            results = baseline_metrics(dataset, global_map, indices, kind, settings.SCAN_ANGULAR_STEP_DEG)
            summaries[kind] = summarize(results)
            write_metrics(out, results, summaries[kind], prefix=f"baseline_{kind}")
    return summaries


def render_scan_file(
    checkpoint_path,
    dataset_path,
    pose: tuple,
    height: float,
    angular_step: float,
    out_path,
    min_opacity: float = 0.5,
) -> Path:
    """Render one 360-degree scan from a checkpoint and write it as CSV."""
    state, _ = load_checkpoint(checkpoint_path)
    scene_box = read_scene_box(dataset_path)
    scan = render_scan(state.field, state.grid, pose, height, angular_step, scene_box, min_opacity=min_opacity)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    scan.to_frame().to_csv(out, index=False)
    return out


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower()


def _median_summary(summaries: list) -> dict:
    keys = sorted({k for s in summaries for k in s})
    merged = {}
    for key in keys:
        values = [s.get(key) for s in summaries]
        values = [v for v in values if isinstance(v, (int, float))]
        merged[key] = float(np.median(values)) if values else None
    return merged


def ablate(config: AblationConfig, settings, out_dir) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run every arm over the shared seeds and compare the median summaries.

    Datasets are simulated once per distinct (seed, pose noise, rig) and
    shared by the arms that need them.
    """
    out = Path(out_dir)
    datasets = {}
    runs = {}
    throughput = []
    for arm in config.arms:
        summaries = []
        for seed in config.seeds:
            run = arm.apply(config.base, seed)
            key = json.dumps(
                [run.scene, run.dataset, run.trajectory, run.n_poses, seed, run.pose_noise, run.rig.model_dump()],
                sort_keys=True,
            )
            if key not in datasets:
                datasets[key] = obtain_dataset(run)
            outcome = train_run(
                run, settings, out_dir=out / slug(arm.label) / f"seed-{seed}", dataset=datasets[key]
            )
            summaries.append(outcome.summary)
            throughput.append({"arm": arm.label, "seed": seed, "steps_per_sec": outcome.result.steps_per_sec})
        runs[arm.label] = _median_summary(summaries)
        logger.info("Finished ablation arm", extra={"arm": arm.label, "seeds": len(config.seeds)})

    table, orderings = ablation_report(runs)
    write_ablation(out, table, orderings)
    pd.DataFrame(throughput, columns=["arm", "seed", "steps_per_sec"]).to_csv(out / "throughput.csv", index=False)
    return table, orderings

