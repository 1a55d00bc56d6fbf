"""Analytic sensor simulation over 2.5D environments and dataset persistence."""
import json
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from virusnerf.core.utils import (
    CollisionError,
    DatasetError,
    InvalidPoseError,
    require,
    spawn_rng,
)
from virusnerf.models.sensors import (
    Dataset,
    Environment,
    RigConfig,
    SceneBox,
    SensorFrame,
    TimedPose,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
# Minimum distance between a pose and any wall
ROBOT_CLEARANCE_M = 0.1
TEXTURE_PERIOD_M = 0.4


def rotate_z(vectors: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    vectors = np.asarray(vectors, dtype=np.float64)
    out = vectors.copy()
    out[..., 0] = c * vectors[..., 0] - s * vectors[..., 1]
    out[..., 1] = s * vectors[..., 0] + c * vectors[..., 1]
    return out


def raycast_many(
    env: Environment, origins: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Nearest wall hit for every ray.

    Distances are in units of |direction|; walls only count where the hit
    height lies inside the segment's extrusion.

    Returns:
        (distance (N,) inf on miss, segment index (N,) -1 on miss, along-wall position (N,) metres)
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    require(
        np.all(np.linalg.norm(directions, axis=1) > 0.0), "ray direction must be nonzero"
    )

    a = env.segments[None, :, 0, :]
    e = env.segments[None, :, 1, :] - env.segments[None, :, 0, :]
    d = directions[:, None, :2]
    ao = a - origins[:, None, :2]

    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    parallel = denom == 0.0
    safe = np.where(parallel, 1.0, denom)
    t = (ao[..., 0] * e[..., 1] - ao[..., 1] * e[..., 0]) / safe
    s = (ao[..., 0] * d[..., 1] - ao[..., 1] * d[..., 0]) / safe
    z = origins[:, None, 2] + t * directions[:, None, 2]

    valid = (
        ~parallel
        & (t > 0.0)
        & (s >= 0.0)
        & (s <= 1.0)
        & (z >= env.heights[None, :, 0])
        & (z <= env.heights[None, :, 1])
    )
    t = np.where(valid, t, np.inf)
    segment = np.argmin(t, axis=1)
    rows = np.arange(len(origins))
    distance = t[rows, segment]
    hit = np.isfinite(distance)

    lengths = np.linalg.norm(e[0], axis=1)
    along = s[rows, segment] * lengths[segment]
    return distance, np.where(hit, segment, -1), np.where(hit, along, 0.0)


def surface_colors(
    env: Environment, segment: np.ndarray, along: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """Segment color modulated by a checker texture; misses are black."""
    hit = segment >= 0
    colors = np.zeros((len(segment), 3))
    colors[hit] = env.colors[segment[hit]]
    if env.textured:
        u = np.floor(along / TEXTURE_PERIOD_M) + np.floor(z / TEXTURE_PERIOD_M)
        shade = np.where(np.mod(u, 2.0) == 0.0, 1.0, 0.7)
        colors *= shade[:, None]
    return colors


def raycast(env: Environment, origin, direction) -> Optional[tuple[float, np.ndarray]]:
    """
    Distance and surface color of the nearest hit, or None.

    Raises:
        InvalidPoseError: when the origin is not in free space
    """
    origin = np.asarray(origin, dtype=np.float64)
    check_pose(env, origin[0], origin[1])
    direction = np.asarray(direction, dtype=np.float64)
    distance, segment, along = raycast_many(env, origin[None, :], direction[None, :])
    if segment[0] < 0:
        return None
    z = origin[2] + distance * direction[2]
    color = surface_colors(env, segment, along, z)[0]
    return float(distance[0]), color


def check_pose(env: Environment, x: float, y: float):
    if not env.is_free(x, y):
        raise InvalidPoseError(f"pose ({x:.3f}, {y:.3f}) is not in free space of {env.name}")


def stack_origins(rig: RigConfig, pose) -> list[tuple[np.ndarray, float]]:
    """World origin and yaw of each sensor stack at a planar robot pose."""
    x, y, yaw = pose
    stacks = []
    for lateral, yaw_offset in rig.stack_mounts():
        offset = rotate_z(np.array([0.0, lateral, 0.0]), yaw)
        origin = np.array([x, y, rig.sensor_height_m]) + offset
        stacks.append((origin, yaw + yaw_offset))
    return stacks


def camera_directions(rig: RigConfig) -> np.ndarray:
    """
    Unit pixel ray directions in the stack frame (x forward, y left, z up).

    Rows are ordered row-major over (v, u); pixel centers sit at +0.5.
    """
    u = np.arange(rig.image_width) + 0.5 - 0.5 * rig.image_width
    v = np.arange(rig.image_height) + 0.5 - 0.5 * rig.image_height
    vv, uu = np.meshgrid(v, u, indexing="ij")
    dirs = np.stack(
        [np.full(uu.size, rig.focal_px), -uu.ravel(), -vv.ravel()], axis=1
    )
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def camera_rays(rig: RigConfig, origin: np.ndarray, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    directions = rotate_z(camera_directions(rig), yaw)
    return np.tile(origin, (len(directions), 1)), directions


def sense_camera(
    env: Environment,
    origin: np.ndarray,
    yaw: float,
    rig: RigConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """RGB image (H, W, 3) in [0, 1] with optional Gaussian pixel noise."""
    origins, directions = camera_rays(rig, origin, yaw)
    distance, segment, along = raycast_many(env, origins, directions)
    z = origins[:, 2] + np.where(np.isfinite(distance), distance, 0.0) * directions[:, 2]
    colors = surface_colors(env, segment, along, z)
    if rng is not None and rig.camera_noise > 0.0:
        colors = colors + rng.normal(0.0, rig.camera_noise, size=colors.shape)
    return np.clip(colors, 0.0, 1.0).reshape(rig.image_height, rig.image_width, 3)


def sense_depth(env: Environment, origin: np.ndarray, yaw: float, rig: RigConfig) -> np.ndarray:
    """Dense per-pixel ray length (H, W) in metres; NaN where nothing is hit."""
    origins, directions = camera_rays(rig, origin, yaw)
    distance, _, _ = raycast_many(env, origins, directions)
    depth = np.where(np.isfinite(distance), distance, np.nan)
    return depth.reshape(rig.image_height, rig.image_width).astype(np.float32)


def uss_fan(rig: RigConfig, yaw: float) -> np.ndarray:
    half = math.radians(rig.uss_half_angle_deg)
    angles = yaw + np.linspace(-half, half, rig.uss_fan_rays)
    return np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)


def sense_uss(
    env: Environment,
    origin: np.ndarray,
    yaw: float,
    rig: RigConfig,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Nearest echo over the horizontal cone fan; NaN for no echo."""
    directions = uss_fan(rig, yaw)
    distance, _, _ = raycast_many(env, np.tile(origin, (len(directions), 1)), directions)
    nearest = float(distance.min())
    if not nearest <= rig.uss_max_range_m:
        return float("nan")
    if rng is not None and rig.uss_noise_m > 0.0:
        nearest += float(rng.normal(0.0, rig.uss_noise_m))
    return max(nearest, 1e-3)


def irs_directions(rig: RigConfig, yaw: float) -> np.ndarray:
    """
    Zone-center directions (Z*Z, 3), zone = row * Z + col.

    Rows run top to bottom, columns left to right; the optional angular
    error rotates the whole array about the vertical axis.
    """
    fov = math.radians(rig.irs_fov_deg)
    centers = (np.arange(rig.irs_zones) + 0.5) / rig.irs_zones * fov - 0.5 * fov
    elevation, azimuth = np.meshgrid(-centers, -centers, indexing="ij")
    elevation, azimuth = elevation.ravel(), azimuth.ravel()
    dirs = np.stack(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ],
        axis=1,
    )
    return rotate_z(dirs, yaw + math.radians(rig.irs_angular_error_deg))


def sense_irs(
    env: Environment,
    origin: np.ndarray,
    yaw: float,
    rig: RigConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Per-zone range in metres; NaN for out-of-range, missed or dropped zones."""
    directions = irs_directions(rig, yaw)
    distance, _, _ = raycast_many(env, np.tile(origin, (len(directions), 1)), directions)
    valid = distance <= rig.irs_max_range_m
    ranges = np.where(valid, distance, np.nan)
    if rng is not None:
        if rig.irs_noise_m > 0.0:
            ranges = ranges + rng.normal(0.0, rig.irs_noise_m, size=ranges.shape)
        if rig.irs_dropout > 0.0:
            ranges = np.where(rng.random(ranges.shape) < rig.irs_dropout, np.nan, ranges)
    return np.where(np.isfinite(ranges), np.maximum(ranges, 1e-3), np.nan)


def sense_lidar(
    env: Environment, pose, rig: RigConfig, rng: Optional[np.random.Generator] = None
) -> pd.DataFrame:
    """360-degree rings at sensor height; beams beyond max range are left out."""
    x, y, yaw = pose
    n = int(round(360.0 / rig.lidar_angular_step_deg))
    azimuths = np.arange(n) * rig.lidar_angular_step_deg

    frames = []
    for elevation_deg in rig.lidar_elevations_deg:
        el = math.radians(elevation_deg)
        angles = np.deg2rad(azimuths) + yaw
        directions = np.stack(
            [np.cos(el) * np.cos(angles), np.cos(el) * np.sin(angles), np.full(n, np.sin(el))],
            axis=1,
        )
        origins = np.tile([x, y, rig.sensor_height_m], (n, 1))
        distance, _, _ = raycast_many(env, origins, directions)
        if rng is not None and rig.lidar_noise_m > 0.0:
            noisy = distance + rng.normal(0.0, rig.lidar_noise_m, size=n)
        else:
            noisy = distance
        keep = distance <= rig.lidar_max_range_m
        frames.append(
            pd.DataFrame(
                {
                    "angle_deg": azimuths[keep],
                    "range_m": noisy[keep],
                    "elevation_deg": np.full(int(keep.sum()), float(elevation_deg)),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def lidar_points_world(scan: pd.DataFrame, pose, height: float) -> np.ndarray:
    """World-frame (K, 3) points of a LiDAR frame."""
    x, y, yaw = pose
    angles = np.deg2rad(scan["angle_deg"].to_numpy()) + yaw
    el = np.deg2rad(scan["elevation_deg"].to_numpy())
    r = scan["range_m"].to_numpy()
    return np.stack(
        [x + r * np.cos(el) * np.cos(angles), y + r * np.cos(el) * np.sin(angles), height + r * np.sin(el)],
        axis=1,
    )


def sense_frame(
    env: Environment,
    pose: TimedPose,
    rig: RigConfig,
    rng: np.random.Generator,
    index: int,
    stored_pose: Optional[tuple] = None,
) -> SensorFrame:
    """All sensors of both stacks plus the LiDAR at one pose."""
    check_pose(env, pose.x, pose.y)
    true_pose = (pose.x, pose.y, pose.yaw)
    images, uss, irs, depth = [], [], [], []
    for origin, yaw in stack_origins(rig, true_pose):
        images.append(sense_camera(env, origin, yaw, rig, rng))
        uss.append(sense_uss(env, origin, yaw, rig, rng))
        irs.append(sense_irs(env, origin, yaw, rig, rng))
        if rig.dense_depth:
            depth.append(sense_depth(env, origin, yaw, rig))

    images = np.round(np.stack(images) * 255.0).astype(np.uint8)
    return SensorFrame(
        index=index,
        timestamp=float(pose.t),
        pose=stored_pose if stored_pose is not None else true_pose,
        true_pose=true_pose,
        images=images,
        uss=np.array(uss, dtype=np.float64),
        irs=np.stack(irs),
        depth=np.stack(depth) if depth else None,
        lidar=sense_lidar(env, true_pose, rig, rng),
    )


def generate_dataset(
    env: Environment,
    trajectory: list,
    rig: Optional[RigConfig] = None,
    seed: int = 0,
    pose_noise: Optional[tuple[float, float]] = None,
) -> Dataset:
    """
    Simulate one frame per trajectory sample.

    Args:
        env: Environment to sense
        trajectory: TimedPose list with strictly increasing timestamps
        rig: Sensor rig
        seed: Every frame draws from its own (seed, index) stream
        pose_noise: (sigma_xy metres, sigma_yaw degrees) applied to the stored poses

    Raises:
        CollisionError: when a pose leaves free space
    """
    rig = rig or RigConfig()
    require(len(trajectory) > 0, "trajectory must not be empty")

    previous_t = -math.inf
    for i, pose in enumerate(trajectory):
        if not env.is_free(pose.x, pose.y, clearance=ROBOT_CLEARANCE_M):
            raise CollisionError(i, f"({pose.x:.3f}, {pose.y:.3f}) collides with {env.name}")
        if not pose.t > previous_t:
            raise CollisionError(i, "timestamps must be strictly increasing")
        previous_t = pose.t

    frames = []
    for i, pose in enumerate(trajectory):
        rng = spawn_rng(seed, i)
        stored = None
        if pose_noise is not None:
            noise_rng = spawn_rng(seed, i, 1)
            sigma_xy, sigma_yaw_deg = pose_noise
            dx, dy = noise_rng.normal(0.0, sigma_xy, size=2) if sigma_xy > 0 else (0.0, 0.0)
            dyaw = noise_rng.normal(0.0, math.radians(sigma_yaw_deg)) if sigma_yaw_deg > 0 else 0.0
            stored = (pose.x + float(dx), pose.y + float(dy), pose.yaw + float(dyaw))
        frames.append(sense_frame(env, pose, rig, rng, i, stored))

    dataset = Dataset(
        scene=env.name,
        scene_box=env.scene_box(),
        rig=rig,
        seed=seed,
        frames=frames,
        meta={"pose_noise": list(pose_noise) if pose_noise is not None else None},
    )
    logger.info(
        "Generated dataset",
        extra={"scene": env.name, "frames": len(frames), "irs_validity": dataset.irs_validity()},
    )
    return dataset


def write_ppm(path: Path, image: np.ndarray):
    """Binary P6 with maxval 255."""
    h, w, _ = image.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise DatasetError(f"{path}: not a binary 8-bit PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write the dataset directory layout; the output is a pure function of `dataset`."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)

    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "scene": dataset.scene,
        "scene_box": dataset.scene_box.to_dict(),
        "rig": dataset.rig.model_dump(),
        "units": "m",
        "seed": dataset.seed,
        "frames": len(dataset),
        "irs_validity": dataset.irs_validity(),
        **dataset.meta,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    dataset.poses_frame().to_csv(out / "poses.csv", index=False)

    for frame in dataset.frames:
        frame_dir = out / "frames" / f"{frame.index:04d}"
        frame_dir.mkdir(exist_ok=True)
        for stack, image in enumerate(frame.images):
            write_ppm(frame_dir / f"cam{stack}.ppm", image)
        pd.DataFrame(
            {
                "stack": np.arange(len(frame.uss)),
                "range_m": np.nan_to_num(frame.uss, nan=0.0),
                "valid": np.isfinite(frame.uss).astype(int),
            }
        ).to_csv(frame_dir / "uss.csv", index=False)
        stacks, zones = np.indices(frame.irs.shape)
        pd.DataFrame(
            {
                "stack": stacks.ravel(),
                "zone": zones.ravel(),
                "range_m": np.nan_to_num(frame.irs, nan=0.0).ravel(),
                "valid": frame.irs_valid.astype(int).ravel(),
            }
        ).to_csv(frame_dir / "irs.csv", index=False)
        if frame.depth is not None:
            for stack, depth in enumerate(frame.depth):
                depth.astype("<f4").tofile(frame_dir / f"depth{stack}.bin")
        if frame.lidar is not None:
            frame.lidar.to_csv(frame_dir / "lidar.csv", index=False)
    return out


def load_dataset(path) -> Dataset:
    """Read a dataset directory written by save_dataset."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"{root}: unsupported dataset format {meta.get('format_version')}")

    rig = RigConfig(**meta["rig"])
    poses = pd.read_csv(root / "poses.csv")
    frames = []
    for i, row in enumerate(poses.itertuples(index=False)):
        frame_dir = root / "frames" / f"{i:04d}"
        if not frame_dir.is_dir():
            raise DatasetError(f"{root}: missing frame directory {frame_dir.name}")
        images = np.stack([read_ppm(frame_dir / f"cam{s}.ppm") for s in range(2)])

        uss = pd.read_csv(frame_dir / "uss.csv").sort_values("stack")
        uss_ranges = np.where(uss["valid"].to_numpy() == 1, uss["range_m"].to_numpy(), np.nan)

        irs = pd.read_csv(frame_dir / "irs.csv").sort_values(["stack", "zone"])
        irs_ranges = np.where(irs["valid"].to_numpy() == 1, irs["range_m"].to_numpy(), np.nan)
        irs_ranges = irs_ranges.reshape(2, -1)

        depth = None
        if (frame_dir / "depth0.bin").is_file():
            depth = np.stack(
                [
                    np.fromfile(frame_dir / f"depth{s}.bin", dtype="<f4").reshape(
                        rig.image_height, rig.image_width
                    )
                    for s in range(2)
                ]
            )
        lidar_path = frame_dir / "lidar.csv"
        lidar = pd.read_csv(lidar_path) if lidar_path.is_file() else None

        frames.append(
            SensorFrame(
                index=i,
                timestamp=float(row.t),
                pose=(float(row.x_noisy), float(row.y_noisy), float(row.yaw_noisy)),
                true_pose=(float(row.x), float(row.y), float(row.yaw)),
                images=images,
                uss=uss_ranges.astype(np.float64),
                irs=irs_ranges.astype(np.float64),
                depth=depth,
                lidar=lidar,
            )
        )

    extra = {k: meta[k] for k in ("pose_noise",) if k in meta}
    return Dataset(
        scene=meta["scene"],
        scene_box=SceneBox.from_dict(meta["scene_box"]),
        rig=rig,
        seed=int(meta["seed"]),
        frames=frames,
        meta=extra,
    )
