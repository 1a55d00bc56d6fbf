"""Environments, the sensor rig, recorded frames and datasets."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union


@dataclass
class SceneBox:
    """
    Isotropic world <-> unit-cube mapping.

    The cube side is the largest world extent plus a margin on each side,
    so directions are preserved and every length scales by 1 / size.
    """

    lower: np.ndarray
    size: float

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        if not self.size > 0:
            raise ValueError(f"scene box size must be > 0, got {self.size}")

    @classmethod
    def around(cls, bounds_min, bounds_max, margin: float = 0.25) -> "SceneBox":
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        size = float(np.max(bounds_max - bounds_min)) + 2.0 * margin
        center = 0.5 * (bounds_min + bounds_max)
        return cls(lower=center - 0.5 * size, size=size)

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.lower) / self.size

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(points, dtype=np.float64) * self.size

    def length_to_unit(self, meters):
        return np.asarray(meters, dtype=np.float64) / self.size

    def length_to_world(self, units):
        return np.asarray(units, dtype=np.float64) * self.size

    def to_dict(self) -> dict:
        return {"lower": [float(v) for v in self.lower], "size": float(self.size)}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneBox":
        return cls(lower=np.array(data["lower"], dtype=np.float64), size=float(data["size"]))


@dataclass
class Environment:
    """
    2.5D scene: wall segments extruded over [z_min, z_max] with one color each.

    `outer` is the room boundary polygon, `obstacles` the polygons the robot
    cannot enter. Segments are built from both.
    """

    name: str
    segments: np.ndarray
    colors: np.ndarray
    heights: np.ndarray
    outer: list
    obstacles: list = field(default_factory=list)
    floor_z: float = 0.0
    ceiling_z: float = 2.5
    textured: bool = True

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2, 2)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.heights = np.asarray(self.heights, dtype=np.float64).reshape(-1, 2)
        lengths = np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError(f"{self.name}: degenerate wall segment")
        if not (len(self.segments) == len(self.colors) == len(self.heights)):
            raise ValueError(f"{self.name}: segments, colors and heights differ in length")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        xy = self.segments.reshape(-1, 2)
        lower = np.array([xy[:, 0].min(), xy[:, 1].min(), self.floor_z])
        upper = np.array([xy[:, 0].max(), xy[:, 1].max(), self.ceiling_z])
        return lower, upper

    def scene_box(self, margin: float = 0.25) -> SceneBox:
        return SceneBox.around(*self.bounds, margin=margin)

    @property
    def free_space(self) -> Polygon:
        room = Polygon(self.outer)
        if not self.obstacles:
            return room
        return room.difference(unary_union([Polygon(p) for p in self.obstacles]))

    def is_free(self, x: float, y: float, clearance: float = 0.0) -> bool:
        point = Point(float(x), float(y))
        space = self.free_space
        if clearance > 0.0:
            return space.buffer(-clearance).contains(point)
        return space.contains(point)

    def __repr__(self):
        return f"<Environment {self.name} segments={len(self.segments)}>"


class RigConfig(BaseModel):
    """Two sensor stacks (camera, USS, IRS) plus a LiDAR on the robot base."""

    stack_offset_m: float = 0.135
    stack_yaw_deg: float = 14.5
    sensor_height_m: float = 0.5

    image_width: int = Field(default=64, ge=1)
    image_height: int = Field(default=48, ge=1)
    hfov_deg: float = Field(default=60.0, gt=0.0, lt=180.0)
    camera_noise: float = Field(default=0.01, ge=0.0)

    uss_half_angle_deg: float = Field(default=25.0, gt=0.0, lt=90.0)
    uss_max_range_m: float = Field(default=5.0, gt=0.0)
    uss_fan_rays: int = Field(default=129, ge=1)
    uss_noise_m: float = Field(default=0.02, ge=0.0)

    irs_zones: int = Field(default=8, ge=1)
    irs_fov_deg: float = Field(default=45.0, gt=0.0, lt=180.0)
    irs_max_range_m: float = Field(default=4.0, gt=0.0)
    irs_noise_m: float = Field(default=0.01, ge=0.0)
    irs_dropout: float = Field(default=0.05, ge=0.0, le=1.0)
    irs_angular_error_deg: float = 0.0

    lidar_angular_step_deg: float = Field(default=1.0, gt=0.0)
    lidar_max_range_m: float = Field(default=12.0, gt=0.0)
    lidar_noise_m: float = Field(default=0.01, ge=0.0)
    lidar_elevations_deg: list[float] = Field(default_factory=lambda: [0.0])

    dense_depth: bool = False

    @field_validator("lidar_elevations_deg")
    @classmethod
    def validate_elevations(cls, value):
        if not value:
            raise ValueError("at least one LiDAR ring is required")
        return value

    @property
    def focal_px(self) -> float:
        return 0.5 * self.image_width / math.tan(math.radians(self.hfov_deg) / 2.0)

    def stack_mounts(self) -> list[tuple[float, float]]:
        """(lateral offset, yaw offset) per stack; stack 0 points left."""
        yaw = math.radians(self.stack_yaw_deg)
        return [(self.stack_offset_m, yaw), (-self.stack_offset_m, -yaw)]


@dataclass
class TimedPose:
    """Planar robot pose at a timestamp."""

    t: float
    x: float
    y: float
    yaw: float


@dataclass
class SensorFrame:
    """
    Synchronized measurements of both stacks at one pose.

    Ranges are metres; NaN marks no-echo / invalid zones.
    """

    index: int
    timestamp: float
    pose: tuple
    true_pose: tuple
    images: np.ndarray
    uss: np.ndarray
    irs: np.ndarray
    depth: Optional[np.ndarray] = None
    lidar: Optional[pd.DataFrame] = None

    @property
    def irs_valid(self) -> np.ndarray:
        return np.isfinite(self.irs)

    def __repr__(self):
        return f"<SensorFrame {self.index} t={self.timestamp:.2f}>"


@dataclass
class Dataset:
    """A generated recording: scene metadata, rig and timestamped frames."""

    scene: str
    scene_box: SceneBox
    rig: RigConfig
    seed: int
    frames: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.float64)

    def irs_validity(self) -> float:
        """Fraction of valid IRS zones over the whole recording."""
        if not self.frames:
            return 0.0
        return float(np.mean([f.irs_valid.mean() for f in self.frames]))

    def poses_frame(self) -> pd.DataFrame:
        rows = []
        for f in self.frames:
            rows.append(
                {
                    "t": f.timestamp,
                    "x": f.true_pose[0],
                    "y": f.true_pose[1],
                    "yaw": f.true_pose[2],
                    "x_noisy": f.pose[0],
                    "y_noisy": f.pose[1],
                    "yaw_noisy": f.pose[2],
                }
            )
        return pd.DataFrame(rows, columns=["t", "x", "y", "yaw", "x_noisy", "y_noisy", "yaw_noisy"])

    def __repr__(self):
        return f"<Dataset {self.scene} frames={len(self.frames)} seed={self.seed}>"
