"""Test the simulated sensor rig, scenes and dataset files."""
import math

import numpy as np
import pytest
from shapely.geometry import LineString, Point

from virusnerf.core.scenes import (
    SCENES,
    TRAJECTORY_PRESETS,
    build_environment,
    get_scene,
    make_trajectory,
    rectangle,
)
from virusnerf.core.simrig import (
    ROBOT_CLEARANCE_M,
    camera_directions,
    generate_dataset,
    load_dataset,
    raycast,
    raycast_many,
    save_dataset,
    sense_frame,
    sense_irs,
    sense_lidar,
    sense_uss,
    uss_fan,
)
from virusnerf.core.utils import CollisionError, InvalidArgumentError, InvalidPoseError
from virusnerf.models.sensors import RigConfig, TimedPose


def test_raycast_unit_square():
    env = build_environment("unit", rectangle(0.0, 0.0, 1.0, 1.0), [], textured=False)
    distance, color = raycast(env, [0.5, 0.5, 0.5], [1.0, 0.0, 0.0])
    assert distance == pytest.approx(0.5)
    assert color.shape == (3,)


def test_raycast_miss():
    env = build_environment("unit", rectangle(0.0, 0.0, 1.0, 1.0), [], textured=False)
    assert raycast(env, [0.5, 0.5, 2.4], [0.6, 0.0, 0.8]) is None
    assert raycast(env, [0.5, 0.5, 0.5], [0.0, 0.0, 1.0]) is None


def test_raycast_matches_shapely_oracle():
    """Test horizontal hits against per-wall segment intersections."""
    env = get_scene("mini-office").env
    rng = np.random.default_rng(0)
    origins, directions = [], []
    while len(origins) < 40:
        x, y = rng.uniform(0.3, 8.7), rng.uniform(0.3, 7.7)
        if env.is_free(x, y, clearance=0.1):
            angle = rng.uniform(0, 2 * math.pi)
            origins.append([x, y, 0.5])
            directions.append([math.cos(angle), math.sin(angle), 0.0])
    distance, _, _ = raycast_many(env, np.array(origins), np.array(directions))

    for origin, direction, measured in zip(origins, directions, distance):
        ray = LineString([origin[:2], (origin[0] + 30 * direction[0], origin[1] + 30 * direction[1])])
        expected = math.inf
        for segment, (z0, z1) in zip(env.segments, env.heights):
            if not z0 <= 0.5 <= z1:
                continue
            hit = ray.intersection(LineString(segment))
            if not hit.is_empty:
                expected = min(expected, Point(origin[:2]).distance(hit))
        assert measured == pytest.approx(expected, abs=1e-9)


def test_center_pixel_is_optical_axis():
    rig = RigConfig(image_width=3, image_height=3)
    np.testing.assert_allclose(camera_directions(rig)[4], [1.0, 0.0, 0.0])


def test_uss_sees_facing_wall(square_room):
    rig = RigConfig(uss_fan_rays=17)
    echo = sense_uss(square_room.env, np.array([2.0, 2.0, 0.5]), 0.0, rig)
    assert echo == pytest.approx(2.0)


def test_uss_fan_spans_opening():
    fan = uss_fan(RigConfig(uss_fan_rays=5), 0.0)
    angles = np.degrees(np.arctan2(fan[:, 1], fan[:, 0]))
    np.testing.assert_allclose(angles[[0, -1]], [-25.0, 25.0])


def test_irs_beyond_max_range_is_invalid():
    env = build_environment("hall", rectangle(0.0, 0.0, 12.0, 12.0), [], textured=False)
    ranges = sense_irs(env, np.array([6.0, 6.0, 0.5]), 0.0, RigConfig())
    assert ranges.shape == (64,)
    assert np.isnan(ranges).all()


def test_lidar_full_ring(square_room):
    scan = sense_lidar(square_room.env, (2.0, 2.0, 0.0), RigConfig())
    assert len(scan) == 360
    assert scan["range_m"].min() == pytest.approx(2.0)
    assert scan["range_m"].max() <= 2.0 * math.sqrt(2.0) + 1e-9


def test_raycast_from_inside_wall(square_room):
    """Test an origin beyond the room boundary is reported instead of hitting the far side of the wall."""
    with pytest.raises(InvalidPoseError):
        raycast(square_room.env, [5.0, 2.0, 0.5], [-1.0, 0.0, 0.0])
    with pytest.raises(InvalidPoseError):
        raycast(square_room.env, [4.0, 2.0, 0.5], [-1.0, 0.0, 0.0])


def test_sense_frame_inside_obstacle(tiny_rig):
    env = get_scene("smoke-room").env
    with pytest.raises(InvalidPoseError):
        sense_frame(env, TimedPose(0.0, 3.0, 2.1, 0.0), tiny_rig, None, 0)


def test_generated_dataset(tiny_dataset, tiny_rig):
    """Test frame count, strictly increasing timestamps and sensor shapes."""
    assert len(tiny_dataset) == 6
    assert np.all(np.diff(tiny_dataset.timestamps) > 0)
    frame = tiny_dataset.frames[0]
    assert frame.images.shape == (2, tiny_rig.image_height, tiny_rig.image_width, 3)
    assert frame.images.dtype == np.uint8
    assert frame.irs.shape == (2, tiny_rig.irs_zones**2)
    assert frame.uss.shape == (2,)
    assert frame.pose == frame.true_pose
    assert 0.0 <= tiny_dataset.irs_validity() <= 1.0


def test_generation_is_deterministic(tiny_run, tiny_dataset):
    scene = get_scene(tiny_run.scene)
    again = generate_dataset(scene.env, make_trajectory(scene, "patrol", 6), tiny_run.rig, seed=0)
    for a, b in zip(tiny_dataset.frames, again.frames):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.irs, b.irs)


def test_pose_noise(tiny_run):
    scene = get_scene("smoke-room")
    trajectory = make_trajectory(scene, "patrol", 4)
    exact = generate_dataset(scene.env, trajectory, tiny_run.rig, seed=1, pose_noise=(0.0, 0.0))
    noisy = generate_dataset(scene.env, trajectory, tiny_run.rig, seed=1, pose_noise=(0.05, 2.0))
    for a, b in zip(exact.frames, noisy.frames):
        assert a.pose == a.true_pose
        assert b.true_pose == a.true_pose
        assert b.pose != b.true_pose


def test_collision_reports_index(tiny_rig):
    scene = get_scene("smoke-room")
    trajectory = [TimedPose(0.0, 0.8, 0.8, 0.0), TimedPose(1.0, 3.0, 2.1, 0.0)]
    with pytest.raises(CollisionError) as error:
        generate_dataset(scene.env, trajectory, tiny_rig)
    assert error.value.index == 1


def test_save_and_load(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded) == len(tiny_dataset)
    assert loaded.rig == tiny_dataset.rig
    np.testing.assert_allclose(loaded.timestamps, tiny_dataset.timestamps)
    for a, b in zip(loaded.frames, tiny_dataset.frames):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_allclose(a.irs, b.irs, equal_nan=True)
        np.testing.assert_allclose(a.uss, b.uss, equal_nan=True)
        np.testing.assert_allclose(a.pose, b.pose)
        assert len(a.lidar) == len(b.lidar)


def test_unknown_scene_and_preset():
    with pytest.raises(InvalidArgumentError):
        get_scene("atrium")
    with pytest.raises(InvalidArgumentError):
        make_trajectory(get_scene("smoke-room"), "zigzag", 10)


@pytest.mark.parametrize("name", sorted(SCENES))
@pytest.mark.parametrize("preset", TRAJECTORY_PRESETS)
def test_trajectories_stay_in_free_space(name, preset):
    scene = get_scene(name)
    poses = make_trajectory(scene, preset, 40)
    assert len(poses) == 40
    for pose in poses:
        assert scene.env.is_free(pose.x, pose.y, clearance=ROBOT_CLEARANCE_M)
