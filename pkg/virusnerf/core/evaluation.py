"""Scan-based evaluation: global map, ground-truth scans, NND, zones, PSNR and ablation tables."""
import itertools
import logging
import math

import numpy as np
import pandas as pd
from sklearn.neighbors import KDTree

from virusnerf.core.render import render_scan
from virusnerf.core.simrig import irs_directions, lidar_points_world, stack_origins, uss_fan
from virusnerf.core.traversal import cell_intervals
from virusnerf.core.utils import InvalidArgumentError, require
from virusnerf.models.metrics import INLIER_THRESHOLD_M, ZONES, GlobalMap, ScanMetrics, ZoneMetrics
from virusnerf.models.rays import DepthScan

logger = logging.getLogger(__name__)

VOXEL_SIZE_M = 0.03
BAND_M = 0.05
# Rings searched in the spatial hash before falling back to the KD-tree
MAX_HASH_RINGS = 8


def build_global_map(
    scans: list, height: float, voxel: float = VOXEL_SIZE_M, min_points: int = 2
) -> GlobalMap:
    """
    Voxelize LiDAR frames in world coordinates.

    Args:
        scans: (lidar DataFrame, pose) pairs
        height: LiDAR mounting height in metres
        voxel: Voxel edge in metres
        min_points: Voxels with fewer points are dropped
    """
    clouds = [lidar_points_world(scan, pose, height) for scan, pose in scans if len(scan)]
    return voxelize(np.concatenate(clouds) if clouds else np.zeros((0, 3)), voxel, min_points)


def voxelize(points: np.ndarray, voxel: float = VOXEL_SIZE_M, min_points: int = 2) -> GlobalMap:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return GlobalMap(voxel, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64), min_points)
    keys = np.floor(points / voxel).astype(np.int64)
    voxels, counts = np.unique(keys, axis=0, return_counts=True)
    keep = counts >= min_points
    return GlobalMap(voxel, voxels[keep], counts[keep], min_points)


def gt_scan(
    global_map: GlobalMap,
    pose: tuple,
    height: float,
    angular_step: float = 1.0,
) -> DepthScan:
    """
    360-degree scan against the map layer at `height`.

    Each azimuth walks the 2D voxel layer and reports the entry distance of
    the first occupied voxel, or no-return.
    """
    require(angular_step > 0, f"angular_step must be > 0, got {angular_step}")
    n = int(round(360.0 / angular_step))
    azimuths = np.arange(n) * angular_step
    depths = np.full(n, np.nan)
    x, y, yaw = pose

    layer = global_map.layer(height)
    if layer.shape[0]:
        lower_idx = layer.min(axis=0)
        shape = tuple(layer.max(axis=0) - lower_idx + 1)
        occupied = np.zeros(shape, dtype=bool)
        occupied[layer[:, 0] - lower_idx[0], layer[:, 1] - lower_idx[1]] = True

        lower = lower_idx * global_map.voxel_size
        upper = (lower_idx + np.array(shape)) * global_map.voxel_size
        corners = np.array([[lower[0], lower[1]], [lower[0], upper[1]], [upper[0], lower[1]], upper])
        reach = float(np.max(np.linalg.norm(corners - np.array([x, y]), axis=1))) + global_map.voxel_size

        origin = np.array([x, y])
        for i, angle in enumerate(np.deg2rad(azimuths) + yaw):
            direction = np.array([math.cos(angle), math.sin(angle)])
            cells, t_enter, _ = cell_intervals(origin, direction, reach, global_map.voxel_size, lower, shape)
            hits = occupied[cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0, dtype=bool)
            if hits.any():
                depths[i] = t_enter[np.argmax(hits)]

    return DepthScan(
        azimuths_deg=azimuths,
        depths_m=depths,
        pose=(float(x), float(y), float(yaw)),
        height_m=float(height),
        angular_step_deg=float(angular_step),
    )


def collapse_to_2d(points: np.ndarray, height: float, band: float = BAND_M) -> np.ndarray:
    """Keep points with height - band <= z <= height + band, drop z."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = (points[:, 2] >= height - band) & (points[:, 2] <= height + band)
    return points[keep, :2]


def _pair_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(-1))


class SpatialHash:
    """
    Uniform bins over planar points for exact nearest-neighbour queries.

    A ring search stops once the best distance cannot be beaten by any
    farther ring; queries that find nothing nearby fall back to a KD-tree.
    """

    def __init__(self, points: np.ndarray, bin_size: float = VOXEL_SIZE_M):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.bin_size = bin_size
        self._tree = None
        keys = np.floor(self.points / bin_size).astype(np.int64)
        self.bins = {}
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        for key, group in itertools.groupby(order, key=lambda i: (int(keys[i, 0]), int(keys[i, 1]))):
            self.bins[key] = np.fromiter(group, dtype=np.int64)

    @property
    def tree(self) -> KDTree:
        if self._tree is None:
            self._tree = KDTree(self.points)
        return self._tree

    def _ring(self, cx: int, cy: int, r: int):
        if r == 0:
            yield cx, cy
            return
        for dx in range(-r, r + 1):
            yield cx + dx, cy - r
            yield cx + dx, cy + r
        for dy in range(-r + 1, r):
            yield cx - r, cy + dy
            yield cx + r, cy + dy

    def nearest(self, query: np.ndarray) -> float:
        cx, cy = (int(v) for v in np.floor(query / self.bin_size))
        best = math.inf
        for r in range(MAX_HASH_RINGS + 1):
            for key in self._ring(cx, cy, r):
                idx = self.bins.get(key)
                if idx is not None:
                    best = min(best, float(_pair_distance(self.points[idx], query).min()))
            if best <= r * self.bin_size:
                return best
        _, index = self.tree.query(query[None, :], k=1)
        return float(_pair_distance(self.points[index[0, 0]], query))

    def query(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.nearest(p) for p in np.asarray(points, dtype=np.float64).reshape(-1, 2)])


def nnd(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    Nearest-neighbour distance from every source point to the target set.

    An empty target leaves every distance undefined (NaN).
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if target.shape[0] == 0:
        return np.full(source.shape[0], np.nan)
    if source.shape[0] == 0:
        return np.zeros(0)
    return SpatialHash(target).query(source)


def _percent(mask: np.ndarray) -> float:
    return 100.0 * float(np.count_nonzero(mask)) / mask.size


def zone_metrics(
    accuracy_nnd: np.ndarray,
    accuracy_gt_depth: np.ndarray,
    accuracy_pred_depth: np.ndarray,
    coverage_nnd: np.ndarray,
    coverage_gt_depth: np.ndarray,
    inlier_threshold: float = INLIER_THRESHOLD_M,
    zones=ZONES,
) -> dict:
    """
    Zone statistics from paired depths and nearest-neighbour distances.

    Accuracy entries are prediction points (zone by the ground-truth depth at
    the same azimuth); coverage entries are ground-truth points. Outliers of
    the accuracy direction split into too close / too far by comparing the
    predicted and ground-truth depths.

    Returns:
        name -> ZoneMetrics
    """
    accuracy_nnd = np.asarray(accuracy_nnd, dtype=np.float64)
    accuracy_gt_depth = np.asarray(accuracy_gt_depth, dtype=np.float64)
    accuracy_pred_depth = np.asarray(accuracy_pred_depth, dtype=np.float64)
    coverage_nnd = np.asarray(coverage_nnd, dtype=np.float64)
    coverage_gt_depth = np.asarray(coverage_gt_depth, dtype=np.float64)

    result = {}
    for name, lower, upper in zones:
        metrics = ZoneMetrics(name=name, lower=lower, upper=upper)

        in_zone = (accuracy_gt_depth >= lower) & (accuracy_gt_depth < upper) & np.isfinite(accuracy_nnd)
        if in_zone.any():
            d = accuracy_nnd[in_zone]
            inlier = d < inlier_threshold
            closer = accuracy_pred_depth[in_zone] < accuracy_gt_depth[in_zone]
            metrics.n_accuracy = int(in_zone.sum())
            metrics.accuracy_mean = float(d.mean())
            metrics.accuracy_inliers = _percent(inlier)
            metrics.too_close = _percent(~inlier & closer)
            metrics.too_far = _percent(~inlier & ~closer)

        in_zone = (coverage_gt_depth >= lower) & (coverage_gt_depth < upper) & np.isfinite(coverage_nnd)
        if in_zone.any():
            d = coverage_nnd[in_zone]
            metrics.n_coverage = int(in_zone.sum())
            metrics.coverage_mean = float(d.mean())
            metrics.coverage_inliers = _percent(d < inlier_threshold)

        result[name] = metrics
    return result


def evaluate_scan(
    prediction: DepthScan, ground_truth: DepthScan, inlier_threshold: float = INLIER_THRESHOLD_M
) -> ScanMetrics:
    """
    Bidirectional NND metrics of a predicted scan against its ground truth.

    Both scans share the azimuth grid; prediction azimuths without a
    ground-truth return (and no-return predictions) are excluded and counted.
    """
    require(
        prediction.azimuths_deg.shape == ground_truth.azimuths_deg.shape,
        "prediction and ground truth must share the azimuth grid",
    )
    pred_valid = prediction.valid
    gt_valid = ground_truth.valid
    paired = pred_valid & gt_valid

    pred_points = prediction.points(valid_only=False)
    gt_points = ground_truth.points(valid_only=False)

    accuracy = nnd(pred_points[paired], gt_points[gt_valid])
    coverage = nnd(gt_points[gt_valid], pred_points[pred_valid])

    zones = zone_metrics(
        accuracy,
        ground_truth.depths_m[paired],
        prediction.depths_m[paired],
        coverage,
        ground_truth.depths_m[gt_valid],
        inlier_threshold,
    )
    return ScanMetrics(
        zones=zones,
        excluded_prediction=int(np.count_nonzero(~pred_valid | ~gt_valid)),
        excluded_ground_truth=int(np.count_nonzero(~gt_valid)),
        pose=prediction.pose,
    )


def psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; +inf when identical."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise InvalidArgumentError(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    mse = float(np.mean((rendered - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def points_to_scan(points: np.ndarray, pose: tuple, height: float, angular_step: float = 1.0) -> DepthScan:
    """Bin planar points by azimuth around the pose, keeping the nearest per bin."""
    n = int(round(360.0 / angular_step))
    depths = np.full(n, np.nan)
    x, y, yaw = pose
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0]:
        rel = points - np.array([x, y])
        ranges = np.hypot(rel[:, 0], rel[:, 1])
        angles = np.rad2deg(np.arctan2(rel[:, 1], rel[:, 0]) - yaw)
        bins = np.mod(np.round(angles / angular_step).astype(np.int64), n)
        order = np.argsort(-ranges)
        depths[bins[order]] = ranges[order]
    return DepthScan(
        azimuths_deg=np.arange(n) * angular_step,
        depths_m=depths,
        pose=(float(x), float(y), float(yaw)),
        height_m=float(height),
        angular_step_deg=float(angular_step),
    )


def sensor_baseline_points(frame, rig, kind: str, band: float = BAND_M) -> np.ndarray:
    """
    Momentary planar point set of one sensor kind at a frame.

    USS echoes become an arc of points across the cone at the measured
    range; IRS zones and LiDAR beams are collapsed to the camera-height band.
    """
    height = rig.sensor_height_m
    if kind == "lidar":
        if frame.lidar is None or not len(frame.lidar):
            return np.zeros((0, 2))
        return collapse_to_2d(lidar_points_world(frame.lidar, frame.true_pose, height), height, band)

    points = []
    nominal = rig.model_copy(update={"irs_angular_error_deg": 0.0})
    for stack, (origin, yaw) in enumerate(stack_origins(rig, frame.true_pose)):
        if kind == "uss":
            if np.isfinite(frame.uss[stack]):
                points.append(origin[None, :] + frame.uss[stack] * uss_fan(rig, yaw))
        elif kind == "irs":
            valid = np.isfinite(frame.irs[stack])
            directions = irs_directions(nominal, yaw)[valid]
            points.append(origin[None, :] + frame.irs[stack][valid, None] * directions)
        else:
            raise InvalidArgumentError(f"Unknown sensor kind '{kind}'")
    if not points:
        return np.zeros((0, 2))
    return collapse_to_2d(np.concatenate(points), height, band)


def sensor_baseline_scan(frame, rig, kind: str, angular_step: float = 1.0) -> DepthScan:
    return points_to_scan(
        sensor_baseline_points(frame, rig, kind), frame.true_pose, rig.sensor_height_m, angular_step
    )


def evaluate_field(
    field,
    grid,
    global_map: GlobalMap,
    poses: list,
    scene_box,
    height: float,
    angular_step: float = 1.0,
    min_opacity: float = 0.5,
) -> list:
    """
    Render and score 360-degree scans at the given poses.

    Poses outside the scene box or the mapped area are skipped with a warning.
    """
    lower = (global_map.voxels.min(axis=0) * global_map.voxel_size) if len(global_map) else None
    upper = ((global_map.voxels.max(axis=0) + 1) * global_map.voxel_size) if len(global_map) else None

    results = []
    for pose in poses:
        unit = scene_box.to_unit(np.array([pose[0], pose[1], height]))
        outside_box = np.any(unit < 0.0) or np.any(unit > 1.0)
        outside_map = lower is None or np.any(np.array(pose[:2]) < lower[:2]) or np.any(
            np.array(pose[:2]) > upper[:2]
        )
        if outside_box or outside_map:
            logger.warning("Skipped evaluation pose outside the map", extra={"pose": list(pose)})
            continue
        predicted = render_scan(
            field, grid, pose, height, angular_step, scene_box, min_opacity=min_opacity
        )
        truth = gt_scan(global_map, pose, height, angular_step)
        metrics = evaluate_scan(predicted, truth)
        metrics.extra["scan"] = predicted
        results.append(metrics)
    return results


def summarize(scan_metrics: list) -> dict:
    """Mean of every zone metric over scans, ignoring zones a scan did not populate."""
    summary = {}
    for name, _, _ in ZONES:
        for key, column in (
            ("accuracy_mean", "nnd_acc"),
            ("coverage_mean", "nnd_cov"),
            ("accuracy_inliers", "inliers_acc"),
            ("coverage_inliers", "inliers_cov"),
            ("too_close", "too_close"),
            ("too_far", "too_far"),
        ):
            values = [getattr(m.zone(name), key) for m in scan_metrics]
            values = [v for v in values if v is not None]
            summary[f"{column}_{name}"] = float(np.mean(values)) if values else None
    summary["poses"] = len(scan_metrics)
    return summary


def metrics_frame(scan_metrics: list) -> pd.DataFrame:
    rows = []
    for i, m in enumerate(scan_metrics):
        for row in m.to_rows():
            rows.append({"pose_index": i, "x": m.pose[0], "y": m.pose[1], "yaw": m.pose[2], **row})
    return pd.DataFrame(rows)


# Lower is better for mean distances, higher for inlier percentages
ABLATION_METRICS = (
    ("nnd_acc_zone3", "lower"),
    ("inliers_acc_zone3", "higher"),
    ("nnd_cov_zone3", "lower"),
    ("inliers_cov_zone3", "higher"),
)


def ablation_report(runs: dict) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Zone-3 comparison table over arms and their pairwise orderings.

    Args:
        runs: arm name -> summary dict (as produced by summarize)

    Returns:
        (table indexed by arm, orderings with one row per arm pair and metric)
    """
    require(len(runs) >= 2, f"ablation needs at least 2 runs, got {len(runs)}")
    columns = [m for m, _ in ABLATION_METRICS]
    table = pd.DataFrame(
        [{"arm": name, **{c: summary.get(c) for c in columns}} for name, summary in runs.items()],
        columns=["arm"] + columns,
    ).set_index("arm")

    orderings = []
    for a, b in itertools.combinations(runs, 2):
        for metric, better in ABLATION_METRICS:
            va, vb = runs[a].get(metric), runs[b].get(metric)
            if va is None or vb is None:
                outcome = "undefined"
            elif va == vb:
                outcome = "tied"
            elif (va < vb) == (better == "lower"):
                outcome = f"{a} better"
            else:
                outcome = f"{b} better"
            orderings.append({"arm_a": a, "arm_b": b, "metric": metric, "outcome": outcome})
    return table, pd.DataFrame(orderings, columns=["arm_a", "arm_b", "metric", "outcome"])
