"""Rays, marched samples, render results and planar depth scans."""
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class Ray:
    """Unit-cube ray with its marching interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        from virusnerf.core.utils import require, require_unit_vectors

        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        require(self.t_near < self.t_far, f"t_near {self.t_near} must be < t_far {self.t_far}")
        require_unit_vectors(self.direction[None, :], "ray direction")


@dataclass
class RayBatch:
    """N rays as arrays."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays: list) -> "RayBatch":
        return cls(
            origins=np.stack([r.origin for r in rays]),
            directions=np.stack([r.direction for r in rays]),
            t_near=np.array([r.t_near for r in rays], dtype=np.float64),
            t_far=np.array([r.t_far for r in rays], dtype=np.float64),
        )


@dataclass
class RaySamples:
    """
    Packed samples of one or more rays.

    Samples of ray i are contiguous and ordered by depth; `ray_index`
    maps every sample back to its ray.
    """

    depths: np.ndarray
    deltas: np.ndarray
    positions: np.ndarray
    directions: np.ndarray
    ray_index: np.ndarray
    n_rays: int

    @property
    def count(self) -> int:
        return int(self.depths.shape[0])

    def counts_per_ray(self) -> np.ndarray:
        return np.bincount(self.ray_index, minlength=self.n_rays)


@dataclass
class RenderResult:
    """Composited color, depth (unit-cube lengths), weights and final transmittance."""

    color: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray
    hit: np.ndarray

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 - self.final_transmittance


@dataclass
class DepthScan:
    """360-degree planar depth profile; NaN depth marks a no-return."""

    azimuths_deg: np.ndarray
    depths_m: np.ndarray
    pose: tuple
    height_m: float
    angular_step_deg: float

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depths_m)

    def points(self, valid_only: bool = True) -> np.ndarray:
        """World-frame (K, 2) end points of the scan rays."""
        x, y, yaw = self.pose
        angles = np.deg2rad(self.azimuths_deg) + yaw
        pts = np.stack(
            [x + self.depths_m * np.cos(angles), y + self.depths_m * np.sin(angles)], axis=1
        )
        return pts[self.valid] if valid_only else pts

    def world_angles(self, valid_only: bool = True) -> np.ndarray:
        angles = np.deg2rad(self.azimuths_deg) + self.pose[2]
        return angles[self.valid] if valid_only else angles

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(
            {
                "azimuth_deg": self.azimuths_deg,
                "depth_m": np.where(self.valid, self.depths_m, 0.0),
                "valid": self.valid.astype(int),
            }
        )

    def __repr__(self):
        return f"<DepthScan n={self.azimuths_deg.size} valid={int(self.valid.sum())}>"


@dataclass
class RenderTape:
    """What the render backward pass needs for one packed batch."""

    samples: RaySamples
    sigma: np.ndarray
    rgb: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray
    background: np.ndarray
    field_tape: Optional[object] = None
