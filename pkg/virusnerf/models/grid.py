"""Occupancy grids over the unit cube."""
import enum
import math
from dataclasses import dataclass, field

import numpy as np

P_FLOOR = 1e-4


class GridVariant(enum.Enum):
    """Which grid drives ray-marching skips."""

    VIRUS = "virus"
    INSTANTNGP = "instantngp-style"


@dataclass
class DensityProjectionParams:
    """Slope zeta, ceiling sigma_Tmax and the running threshold sigma_T."""

    zeta: float = 4.0
    sigma_t_max: float = 10.0
    sigma_t: float = 10.0

    def __post_init__(self):
        from virusnerf.core.utils import require

        require(self.zeta > 0, f"zeta must be > 0, got {self.zeta}")
        require(self.sigma_t_max > 0, f"sigma_t_max must be > 0, got {self.sigma_t_max}")
        require(
            0 < self.sigma_t <= self.sigma_t_max,
            f"sigma_t must lie in (0, {self.sigma_t_max}], got {self.sigma_t}",
        )


@dataclass
class InverseSensorModelParams:
    """Beam inverse model: hit/miss likelihoods, surface thickness and range."""

    p_occ: float = 0.7
    p_emp: float = 0.35
    thickness_cells: float = 1.0
    # unit-cube lengths; longer readings update nothing
    max_range: float = math.inf

    def __post_init__(self):
        from virusnerf.core.utils import require

        require(0.5 < self.p_occ <= 1.0, f"p_occ must lie in (0.5, 1], got {self.p_occ}")
        require(0.0 <= self.p_emp < 0.5, f"p_emp must lie in [0, 0.5), got {self.p_emp}")
        require(self.thickness_cells >= 0, "thickness_cells must be >= 0")
        require(self.max_range > 0, f"max_range must be > 0, got {self.max_range}")


@dataclass
class OccupancyGrid:
    """Per-cell occupancy probability in [P_FLOOR, 1 - P_FLOOR], indexed [x, y, z]."""

    resolution: int = 128
    threshold: float = 0.5
    probabilities: np.ndarray = None
    nerf_updates: int = 0
    depth_updates: int = 0
    anomalies: int = 0

    def __post_init__(self):
        if self.probabilities is None:
            shape = (self.resolution,) * 3
            self.probabilities = np.full(shape, 0.5, dtype=np.float64)
        elif self.probabilities.shape != (self.resolution,) * 3:
            raise ValueError(f"probabilities shape {self.probabilities.shape} != R^3")

    variant = GridVariant.VIRUS

    def occupied(self) -> np.ndarray:
        return self.probabilities >= self.threshold

    def __repr__(self):
        return f"<OccupancyGrid R={self.resolution} occupied={int(self.occupied().sum())}>"


# Instant-NGP heuristic constants
NGP_DECAY = 0.95
NGP_WARMUP_STEPS = 256
NGP_THRESHOLD = 0.01 * 1024 / math.sqrt(3.0)


@dataclass
class DensityGrid:
    """Non-negative density cache with a mean-or-fixed threshold."""

    resolution: int = 128
    densities: np.ndarray = None
    decay: float = NGP_DECAY
    density_threshold: float = NGP_THRESHOLD
    warmup_steps: int = NGP_WARMUP_STEPS
    nerf_updates: int = 0
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.densities is None:
            # start fully occupied, as the probabilistic grid does
            self.densities = np.full((self.resolution,) * 3, np.inf, dtype=np.float64)

    variant = GridVariant.INSTANTNGP

    @property
    def threshold(self) -> float:
        finite = self.densities[np.isfinite(self.densities)]
        mean = float(finite.mean()) if finite.size else self.density_threshold
        return min(mean, self.density_threshold)

    def occupied(self) -> np.ndarray:
        return self.densities > self.threshold

    def __repr__(self):
        return f"<DensityGrid R={self.resolution} occupied={int(self.occupied().sum())}>"
