"""Evaluation data: the LiDAR global map and per-scan zone metrics."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# (name, lower, upper) in metres of ground-truth depth, half-open
ZONES = (("zone1", 0.0, 1.0), ("zone2", 0.0, 2.0), ("zone3", 0.0, 100.0))
INLIER_THRESHOLD_M = 0.10


@dataclass
class GlobalMap:
    """Occupied voxels (integer indices of voxel_size cubes) with their point counts."""

    voxel_size: float
    voxels: np.ndarray
    counts: np.ndarray
    min_points: int = 2

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < self.min_points):
            raise ValueError("global map keeps only voxels with >= min_points points")

    def __len__(self):
        return self.voxels.shape[0]

    def centers(self) -> np.ndarray:
        return (self.voxels + 0.5) * self.voxel_size

    def layer(self, height: float) -> np.ndarray:
        """(K, 2) xy indices of voxels in the horizontal layer containing `height`."""
        k = int(np.floor(height / self.voxel_size))
        return self.voxels[self.voxels[:, 2] == k][:, :2]

    def __repr__(self):
        return f"<GlobalMap voxels={len(self)} size={self.voxel_size}>"


@dataclass
class ZoneMetrics:
    """
    Metrics of one depth zone; None where the zone is empty.

    Percentages are in [0, 100]; inliers + too_close + too_far is 100
    over the accuracy points of the zone.
    """

    name: str
    lower: float
    upper: float
    n_accuracy: int = 0
    n_coverage: int = 0
    accuracy_mean: Optional[float] = None
    coverage_mean: Optional[float] = None
    accuracy_inliers: Optional[float] = None
    coverage_inliers: Optional[float] = None
    too_close: Optional[float] = None
    too_far: Optional[float] = None


@dataclass
class ScanMetrics:
    """Zone metrics of one test pose plus the excluded azimuth counts."""

    zones: dict
    excluded_prediction: int = 0
    excluded_ground_truth: int = 0
    pose: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    def zone(self, name: str) -> ZoneMetrics:
        return self.zones[name]

    def to_rows(self) -> list:
        rows = []
        for z in self.zones.values():
            rows.append(
                {
                    "zone": z.name,
                    "n_accuracy": z.n_accuracy,
                    "n_coverage": z.n_coverage,
                    "accuracy_mean": z.accuracy_mean,
                    "coverage_mean": z.coverage_mean,
                    "accuracy_inliers": z.accuracy_inliers,
                    "coverage_inliers": z.coverage_inliers,
                    "too_close": z.too_close,
                    "too_far": z.too_far,
                    "excluded_prediction": self.excluded_prediction,
                    "excluded_ground_truth": self.excluded_ground_truth,
                }
            )
        return rows
