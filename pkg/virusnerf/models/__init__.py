"""Models package initialization."""
# Typed domain data shared by the core operations
from virusnerf.models.encoding import HashGridConfig
from virusnerf.models.grid import DensityGrid, OccupancyGrid
from virusnerf.models.metrics import GlobalMap, ScanMetrics, ZoneMetrics
from virusnerf.models.network import Activation, GradientTape, MlpParams, OptimState
from virusnerf.models.rays import DepthScan, Ray, RayBatch, RaySamples, RenderResult
from virusnerf.models.sensors import Dataset, Environment, RigConfig, SceneBox, SensorFrame, TimedPose
from virusnerf.models.training import (
    AblationConfig,
    ArmConfig,
    GridConfig,
    HashGridSettings,
    LossReport,
    PixelBatch,
    RunConfig,
    TrainConfig,
)

__all__ = [
    "AblationConfig",
    "Activation",
    "ArmConfig",
    "Dataset",
    "DensityGrid",
    "DepthScan",
    "Environment",
    "GlobalMap",
    "GradientTape",
    "GridConfig",
    "HashGridConfig",
    "HashGridSettings",
    "LossReport",
    "MlpParams",
    "OccupancyGrid",
    "OptimState",
    "PixelBatch",
    "Ray",
    "RayBatch",
    "RaySamples",
    "RenderResult",
    "RigConfig",
    "RunConfig",
    "ScanMetrics",
    "SceneBox",
    "SensorFrame",
    "TimedPose",
    "TrainConfig",
    "ZoneMetrics",
]
