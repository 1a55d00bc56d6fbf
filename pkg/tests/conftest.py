"""Test configuration and fixtures."""
import numpy as np
import pytest

from virusnerf import create_app
from virusnerf.core.field import create_field
from virusnerf.core.scenes import box_room, get_scene, make_trajectory
from virusnerf.core.simrig import generate_dataset
from virusnerf.models.encoding import HashGridConfig
from virusnerf.models.grid import OccupancyGrid
from virusnerf.models.sensors import RigConfig
from virusnerf.models.training import GridConfig, HashGridSettings, RunConfig, TrainConfig

TINY_RIG = dict(
    image_width=8,
    image_height=6,
    uss_fan_rays=17,
    irs_zones=4,
    lidar_angular_step_deg=2.0,
)


@pytest.fixture
def runtime():
    """Runtime with the testing settings."""
    return create_app("testing")


@pytest.fixture
def settings(runtime):
    return runtime.config


@pytest.fixture
def tiny_hash_config():
    """Two dense levels small enough for finite differences."""
    return HashGridConfig(levels=2, table_size=2**10, features=2, min_resolution=4, max_resolution=8)


@pytest.fixture
def field64(tiny_hash_config):
    """Float64 field for gradient checks."""
    return create_field(tiny_hash_config, seed=3, dtype=np.float64)


@pytest.fixture
def fresh_grid():
    return OccupancyGrid(resolution=16)


@pytest.fixture
def tiny_rig():
    return RigConfig(**TINY_RIG)


@pytest.fixture
def square_room():
    """Empty untextured 4 m x 4 m room."""
    return box_room(4.0, 4.0)


@pytest.fixture
def tiny_run(tiny_rig):
    """Smoke-room run that trains in a few steps."""
    return RunConfig(
        scene="smoke-room",
        n_poses=6,
        rig=tiny_rig,
        train=TrainConfig(
            batch_size=64,
            steps=4,
            grid_update_every=2,
            nerf_update_samples=64,
            max_samples=64,
            eval_every=2,
            dtype="float64",
        ),
        grid=GridConfig(resolution=16),
        hash_grid=HashGridSettings(levels=2, table_size_log2=10, min_resolution=4, max_resolution=8),
    )


@pytest.fixture
def tiny_dataset(tiny_run):
    """Six frames of the smoke room."""
    scene = get_scene(tiny_run.scene)
    trajectory = make_trajectory(scene, tiny_run.trajectory, tiny_run.n_poses)
    return generate_dataset(scene.env, trajectory, tiny_run.rig, seed=0)


TINY_TOML = """
scene = "smoke-room"
n_poses = 3
seed = 1

[rig]
image_width = 8
image_height = 6
uss_fan_rays = 17
irs_zones = 4
lidar_angular_step_deg = 2.0

[train]
batch_size = 32
steps = 2
grid_update_every = 1
nerf_update_samples = 32
max_samples = 32
eval_every = 2

[grid]
resolution = 8

[hash_grid]
levels = 2
table_size_log2 = 10
min_resolution = 4
max_resolution = 8
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    """TOML run config for command tests."""
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path
