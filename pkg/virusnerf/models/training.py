"""Training batches, loss reports and the run configuration tree."""
import hashlib
import json
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from virusnerf.models.encoding import HashGridConfig
from virusnerf.models.grid import DensityProjectionParams, InverseSensorModelParams
from virusnerf.models.rays import RayBatch
from virusnerf.models.sensors import RigConfig, SceneBox

SENSORS = ("cam", "uss", "irs", "rgbd")


@dataclass
class PixelBatch:
    """
    N training rays with their supervision.

    Depths are metres; NaN marks a missing association.
    """

    rays: RayBatch
    colors: np.ndarray
    point_depth: np.ndarray
    uss_depth: np.ndarray
    frame: np.ndarray
    stack: np.ndarray

    def __post_init__(self):
        n = len(self.rays)
        if n == 0:
            raise ValueError("a pixel batch needs at least one ray")
        for name in ("point_depth", "uss_depth"):
            values = getattr(self, name)
            if values.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {values.shape}")
            present = values[np.isfinite(values)]
            if np.any(present <= 0.0):
                raise ValueError(f"{name} must be positive where present")

    def __len__(self):
        return len(self.rays)

    @property
    def has_point_depth(self) -> np.ndarray:
        return np.isfinite(self.point_depth)

    @property
    def has_uss_depth(self) -> np.ndarray:
        return np.isfinite(self.uss_depth)


@dataclass
class LossReport:
    """Mean loss per active ray of every term; L_tot is their sum."""

    L_c: float = 0.0
    L_IRS: float = 0.0
    L_USS: float = 0.0
    counts: dict = field(default_factory=dict)
    skipped: bool = False

    @property
    def L_tot(self) -> float:
        return self.L_c + self.L_IRS + self.L_USS

    def as_row(self) -> dict:
        return {"L_c": self.L_c, "L_IRS": self.L_IRS, "L_USS": self.L_USS, "L_tot": self.L_tot}


class TrainConfig(BaseModel):
    """Optimization, sampling and scheduling settings."""

    batch_size: int = Field(default=1024, ge=1)
    steps: int = Field(default=1000, ge=1)
    lr_start: float = Field(default=1e-2, gt=0.0)
    lr_end: float = Field(default=1e-3, gt=0.0)
    eps_uss: float = Field(default=0.1, ge=0.0)
    grid_update_every: int = Field(default=16, ge=1)
    nerf_update_samples: int = Field(default=1024, ge=1)
    mode: Literal["offline", "online"] = "offline"
    playback_speed: float = Field(default=1.0, gt=0.0)
    clock: Literal["steps", "wall"] = "steps"
    # None spreads the recording over 80% of the steps
    seconds_per_step: Optional[float] = Field(default=None, gt=0.0)
    irs_ray_fraction: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    color_weight: float = Field(default=1.0, ge=0.0)
    irs_weight: float = Field(default=1.0, ge=0.0)
    uss_weight: float = Field(default=1.0, ge=0.0)
    density_warmup_steps: int = Field(default=0, ge=0)
    skip_empty: bool = True
    max_samples: int = Field(default=1024, ge=1)
    near_m: float = Field(default=0.05, ge=0.0)
    min_opacity: float = Field(default=0.5, ge=0.0, le=1.0)
    eval_every: int = Field(default=100, ge=1)
    dtype: Literal["float32", "float64"] = "float32"


class GridConfig(BaseModel):
    """Occupancy grid variant and its update parameters."""

    variant: Literal["virus", "instantngp-style"] = "virus"
    resolution: int = Field(default=128, ge=1)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    zeta: float = Field(default=4.0, gt=0.0)
    sigma_t_max: float = Field(default=10.0, gt=0.0)
    p_occ: float = 0.7
    p_emp: float = 0.35
    thickness_cells: float = Field(default=1.0, ge=0.0)
    max_range_m: float = Field(default=4.0, gt=0.0)
    ngp_warmup_steps: int = Field(default=256, ge=0)

    @model_validator(mode="after")
    def validate_likelihoods(self):
        if not 0.5 < self.p_occ <= 1.0:
            raise ValueError(f"p_occ must lie in (0.5, 1], got {self.p_occ}")
        if not 0.0 <= self.p_emp < 0.5:
            raise ValueError(f"p_emp must lie in [0, 0.5), got {self.p_emp}")
        return self

    def projection(self) -> DensityProjectionParams:
        return DensityProjectionParams(
            zeta=self.zeta, sigma_t_max=self.sigma_t_max, sigma_t=self.sigma_t_max
        )

    def inverse_model(self, scene_box: SceneBox) -> InverseSensorModelParams:
        """Sensor model with the range limit expressed in the scene box's unit lengths."""
        return InverseSensorModelParams(
            p_occ=self.p_occ,
            p_emp=self.p_emp,
            thickness_cells=self.thickness_cells,
            max_range=float(scene_box.length_to_unit(self.max_range_m)),
        )


class HashGridSettings(BaseModel):
    levels: int = Field(default=8, ge=1)
    table_size_log2: int = Field(default=15, ge=1, le=24)
    features: int = Field(default=2, ge=1)
    min_resolution: int = Field(default=16, ge=1)
    max_resolution: int = Field(default=256, ge=1)

    def to_config(self) -> HashGridConfig:
        return HashGridConfig(
            levels=self.levels,
            table_size=2**self.table_size_log2,
            features=self.features,
            min_resolution=self.min_resolution,
            max_resolution=self.max_resolution,
        )


class RunConfig(BaseModel):
    """
    Everything a run depends on.

    `scene` names a bundled scene; `dataset` points at an existing dataset
    directory and takes precedence for training.
    """

    scene: str = "mini-office"
    dataset: Optional[str] = None
    trajectory: Literal["straight", "patrol", "out-and-back"] = "patrol"
    n_poses: int = Field(default=100, ge=2)
    pose_noise: Optional[tuple[float, float]] = None
    sensors: list[str] = Field(default_factory=lambda: ["cam", "uss", "irs"])
    seed: int = 0
    output_dir: Optional[str] = None
    rig: RigConfig = Field(default_factory=RigConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    hash_grid: HashGridSettings = Field(default_factory=HashGridSettings)

    @field_validator("sensors")
    @classmethod
    def validate_sensors(cls, value):
        if not value:
            raise ValueError("at least one sensor must be enabled")
        unknown = sorted(set(value) - set(SENSORS))
        if unknown:
            raise ValueError(f"unknown sensors {unknown}, expected a subset of {list(SENSORS)}")
        return sorted(set(value), key=SENSORS.index)

    @model_validator(mode="after")
    def validate_run(self):
        if "rgbd" in self.sensors and not self.rig.dense_depth:
            self.rig = self.rig.model_copy(update={"dense_depth": True})
        return self

    @property
    def arm_name(self) -> str:
        sensors = "+".join(s.upper() for s in self.sensors)
        return f"{self.grid.variant}/{sensors}"

    def config_hash(self) -> str:
        """SHA-256 of everything that shapes the results; the output location is left out."""
        payload = json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


class ArmConfig(BaseModel):
    """One row of the ablation matrix."""

    name: Optional[str] = None
    sensors: list[str] = Field(default_factory=lambda: ["cam", "uss", "irs"])
    grid: Literal["virus", "instantngp-style"] = "virus"
    pose_noise: Optional[tuple[float, float]] = None

    def apply(self, base: RunConfig, seed: int) -> RunConfig:
        data = base.model_dump()
        data["sensors"] = list(self.sensors)
        data["grid"]["variant"] = self.grid
        data["pose_noise"] = self.pose_noise
        data["seed"] = seed
        return RunConfig(**data)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        noise = " (noisy poses)" if self.pose_noise else ""
        return f"{self.grid}/{'+'.join(s.upper() for s in self.sensors)}{noise}"


class AblationConfig(BaseModel):
    """Arms x shared seeds over one base run configuration."""

    base: RunConfig = Field(default_factory=RunConfig)
    arms: list[ArmConfig] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def validate_matrix(self):
        if len(self.arms) < 2:
            raise ValueError("an ablation needs at least 2 arms")
        if not self.seeds:
            raise ValueError("an ablation needs at least one seed")
        labels = [arm.label for arm in self.arms]
        if len(set(labels)) != len(labels):
            raise ValueError(f"arm names must be unique, got {labels}")
        return self
