"""Multiresolution hash-grid configuration and encode records."""
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HashGridConfig:
    """Level count L, table size T, features F and the resolution range."""

    levels: int = 8
    table_size: int = 2**15
    features: int = 2
    min_resolution: int = 16
    max_resolution: int = 256

    def __post_init__(self):
        # imported lazily to keep models free of core at import time
        from virusnerf.core.utils import require

        require(self.levels >= 1, f"levels must be >= 1, got {self.levels}")
        require(
            self.table_size > 0 and self.table_size & (self.table_size - 1) == 0,
            f"table_size must be a power of two, got {self.table_size}",
        )
        require(self.features >= 1, f"features must be >= 1, got {self.features}")
        require(
            1 <= self.min_resolution <= self.max_resolution,
            f"need 1 <= min_resolution <= max_resolution, got "
            f"{self.min_resolution}, {self.max_resolution}",
        )

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.min_resolution)) / (self.levels - 1)
        )

    @property
    def resolutions(self) -> tuple:
        b = self.growth_factor
        return tuple(int(math.floor(self.min_resolution * b**level + 1e-9)) for level in range(self.levels))

    @property
    def output_width(self) -> int:
        return self.levels * self.features

    def table_shape(self) -> tuple:
        return (self.levels, self.table_size, self.features)


@dataclass
class EncodeRecord:
    """Per-level corner rows (B, 8) and trilinear weights (B, 8) of one encode call."""

    indices: list
    weights: list
    features: int

    @property
    def batch_size(self) -> int:
        return self.indices[0].shape[0] if self.indices else 0


@dataclass
class SparseTableGrad:
    """Gradient rows of one level: unique row ids and their (R, F) values."""

    level: int
    rows: np.ndarray
    values: np.ndarray
