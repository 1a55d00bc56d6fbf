"""Test the global map, ground-truth scans, NND metrics and ablation tables."""
import math

import numpy as np
import pytest

from virusnerf.core.evaluation import (
    BAND_M,
    ablation_report,
    build_global_map,
    collapse_to_2d,
    evaluate_scan,
    gt_scan,
    nnd,
    points_to_scan,
    psnr,
    sensor_baseline_points,
    sensor_baseline_scan,
    summarize,
    voxelize,
    zone_metrics,
)
from virusnerf.core.scenes import build_environment, rectangle
from virusnerf.core.simrig import sense_frame
from virusnerf.core.utils import InvalidArgumentError
from virusnerf.models.metrics import GlobalMap
from virusnerf.models.rays import DepthScan
from virusnerf.models.sensors import RigConfig, TimedPose


def _layer_map(cells, voxel=0.1, k=5):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    voxels = np.column_stack([cells, np.full(len(cells), k)])
    return GlobalMap(voxel, voxels, np.full(len(cells), 2))


def _scan(depths, pose=(0.0, 0.0, 0.0)):
    depths = np.asarray(depths, dtype=np.float64)
    step = 360.0 / depths.size
    return DepthScan(
        azimuths_deg=np.arange(depths.size) * step,
        depths_m=depths,
        pose=pose,
        height_m=0.5,
        angular_step_deg=step,
    )


def test_voxelize_min_points():
    assert len(voxelize(np.array([[0.01, 0.01, 0.01]]))) == 0
    voxel_map = voxelize(np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]]))
    assert len(voxel_map) == 1
    assert voxel_map.counts.tolist() == [2]
    assert len(voxelize(np.zeros((0, 3)))) == 0


def test_global_map_rejects_sparse_voxels():
    with pytest.raises(ValueError):
        GlobalMap(0.03, np.zeros((1, 3)), np.array([1]))


def test_gt_scan_square_ring():
    """Test a ring of voxels around the pose returns the same depth on all four axes."""
    ring = [(i, j) for i in range(-5, 5) for j in range(-5, 5) if max(abs(i + 0.5), abs(j + 0.5)) == 4.5]
    scan = gt_scan(_layer_map(ring), (0.0, 0.0, 0.0), 0.55, angular_step=90.0)
    np.testing.assert_allclose(scan.depths_m, 0.4, atol=1e-9)

    fine = gt_scan(_layer_map(ring), (0.0, 0.0, 0.0), 0.55, angular_step=10.0)
    assert fine.valid.all()
    np.testing.assert_allclose(fine.depths_m[:9], fine.depths_m[9:18], atol=1e-9)


def test_gt_scan_empty_map():
    scan = gt_scan(voxelize(np.zeros((0, 3))), (0.0, 0.0, 0.0), 0.5, angular_step=1.0)
    assert scan.depths_m.size == 360
    assert not scan.valid.any()


def test_gt_scan_matches_slab_oracle():
    """Test first-hit entry distances against a per-voxel box intersection."""
    rng = np.random.default_rng(4)
    cells = {tuple(c) for c in rng.integers(-10, 10, size=(40, 2))} - {(0, 0)}
    cells = np.array(sorted(cells))
    pose = (0.013, 0.027, 0.0)
    scan = gt_scan(_layer_map(cells), pose, 0.55, angular_step=3.0)

    lo, hi = cells * 0.1, (cells + 1) * 0.1
    origin = np.array(pose[:2])
    for azimuth, depth in zip(scan.azimuths_deg, scan.depths_m):
        direction = np.array([math.cos(math.radians(azimuth)), math.sin(math.radians(azimuth))])
        with np.errstate(divide="ignore", invalid="ignore"):
            t_a = (lo - origin) / direction
            t_b = (hi - origin) / direction
        t0 = np.minimum(t_a, t_b).max(axis=1)
        t1 = np.maximum(t_a, t_b).min(axis=1)
        hit = (t1 > t0) & (t1 > 0)
        if hit.any():
            assert depth == pytest.approx(max(t0[hit].min(), 0.0), abs=1e-9)
        else:
            assert math.isnan(depth)


def test_collapse_band_is_closed():
    h = 0.5
    points = np.array([[0, 0, h + BAND_M], [1, 1, h - BAND_M], [2, 2, h + BAND_M + 1e-6], [3, 3, h]])
    np.testing.assert_allclose(collapse_to_2d(points, h), [[0, 0], [1, 1], [3, 3]])


def test_nnd_hand_value():
    assert nnd(np.array([[0.0, 0.0]]), np.array([[0.05, 0.0]]))[0] == pytest.approx(0.05)


def test_nnd_empty_sets():
    assert np.isnan(nnd(np.array([[0.0, 0.0]]), np.zeros((0, 2)))).all()
    assert nnd(np.zeros((0, 2)), np.array([[0.0, 0.0]])).size == 0


@pytest.mark.parametrize("extent", [3.0, 100.0])
def test_nnd_matches_brute_force(extent):
    """Test hash queries, including the far fallback, against exhaustive search."""
    rng = np.random.default_rng(int(extent))
    source = rng.uniform(0, extent, size=(300, 2))
    target = rng.uniform(0, extent, size=(200, 2))
    expected = np.sqrt(((source[:, None, :] - target[None, :, :]) ** 2).sum(-1)).min(axis=1)
    np.testing.assert_allclose(nnd(source, target), expected)


def test_zone_metrics_hand_fixture():
    """Test twelve paired azimuths and three coverage points worked out by hand."""
    acc_nnd = [0.02, 0.05, 0.15, 0.30, 0.01, 0.12, 0.08, 0.20, 0.03, 0.50, 0.04, 0.11]
    gt = [0.5, 0.8, 0.6, 0.9, 1.2, 1.5, 1.8, 1.1, 3.0, 4.0, 2.5, 6.0]
    pred = [0.5, 0.8, 0.45, 1.2, 1.2, 1.3, 1.8, 1.3, 3.0, 3.5, 2.5, 6.2]
    zones = zone_metrics(acc_nnd, gt, pred, [0.01, 0.2, 0.05], [0.5, 1.5, 5.0])

    z1, z2, z3 = zones["zone1"], zones["zone2"], zones["zone3"]
    assert (z1.n_accuracy, z2.n_accuracy, z3.n_accuracy) == (4, 8, 12)
    assert z1.accuracy_mean == pytest.approx(0.13)
    assert z2.accuracy_mean == pytest.approx(0.11625)
    assert z3.accuracy_mean == pytest.approx(1.61 / 12)
    for z in (z1, z2, z3):
        assert z.accuracy_inliers == pytest.approx(50.0)
        assert z.too_close == pytest.approx(25.0)
        assert z.too_far == pytest.approx(25.0)

    assert z1.coverage_mean == pytest.approx(0.01)
    assert z2.coverage_mean == pytest.approx(0.105)
    assert z3.coverage_mean == pytest.approx(0.26 / 3)
    assert z1.coverage_inliers == pytest.approx(100.0)
    assert z2.coverage_inliers == pytest.approx(50.0)
    assert z3.coverage_inliers == pytest.approx(200.0 / 3)


def test_zone_metrics_empty_zone():
    zones = zone_metrics([0.02], [1.5], [1.5], [0.02], [1.5])
    assert zones["zone1"].n_accuracy == 0
    assert zones["zone1"].accuracy_mean is None
    assert zones["zone2"].n_accuracy == 1


def test_evaluate_identical_scans():
    """Test a scan scored against itself is perfect and counts its no-returns."""
    depths = np.full(36, 1.5)
    depths[[3, 7]] = np.nan
    metrics = evaluate_scan(_scan(depths), _scan(depths))
    zone3 = metrics.zone("zone3")
    assert zone3.accuracy_mean == pytest.approx(0.0)
    assert zone3.coverage_mean == pytest.approx(0.0)
    assert zone3.accuracy_inliers == 100.0
    assert metrics.excluded_prediction == 2
    assert metrics.excluded_ground_truth == 2


def test_evaluate_rejects_different_grids():
    with pytest.raises(InvalidArgumentError):
        evaluate_scan(_scan(np.ones(36)), _scan(np.ones(360)))


def test_psnr():
    image = np.zeros((4, 4, 3))
    assert psnr(image, image) == math.inf
    assert psnr(image, image + 0.1) == pytest.approx(20.0, rel=1e-9)
    with pytest.raises(InvalidArgumentError):
        psnr(image, np.zeros((4, 4)))


def test_points_to_scan_keeps_nearest():
    scan = points_to_scan(np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 3.0]]), (0.0, 0.0, 0.0), 0.5)
    assert scan.depths_m[0] == pytest.approx(1.0)
    assert scan.depths_m[90] == pytest.approx(3.0)
    assert scan.valid.sum() == 2


def _center_frame(env, rig):
    return sense_frame(env, TimedPose(0.0, 2.0, 2.0, 0.0), rig, None, 0)


def test_lidar_baseline_matches_ground_truth(square_room):
    """Test the momentary LiDAR scan agrees with a map built from the same beams."""
    rig = RigConfig(image_width=4, image_height=3, lidar_angular_step_deg=0.25, lidar_noise_m=0.0)
    frame = _center_frame(square_room.env, rig)
    global_map = build_global_map([(frame.lidar, frame.true_pose)], rig.sensor_height_m)
    truth = gt_scan(global_map, frame.true_pose, rig.sensor_height_m, 1.0)
    metrics = evaluate_scan(sensor_baseline_scan(frame, rig, "lidar", 1.0), truth)
    assert metrics.zone("zone3").accuracy_mean < 0.05


def test_uss_baseline_is_an_arc(square_room):
    rig = RigConfig(image_width=4, image_height=3, uss_fan_rays=17)
    frame = _center_frame(square_room.env, rig)
    points = sensor_baseline_points(frame, rig, "uss")
    assert points.shape == (34, 2)


def test_irs_baseline_out_of_range():
    env = build_environment("hall", rectangle(0.0, 0.0, 12.0, 12.0), [], textured=False)
    rig = RigConfig(image_width=4, image_height=3)
    frame = sense_frame(env, TimedPose(0.0, 6.0, 6.0, 0.0), rig, None, 0)
    assert sensor_baseline_points(frame, rig, "irs").shape == (0, 2)


def test_baseline_rejects_unknown_kind(square_room):
    rig = RigConfig(image_width=4, image_height=3)
    with pytest.raises(InvalidArgumentError):
        sensor_baseline_points(_center_frame(square_room.env, rig), rig, "radar")


def test_summarize_skips_empty_zones():
    full = evaluate_scan(_scan(np.full(36, 0.5)), _scan(np.full(36, 0.5)))
    far = evaluate_scan(_scan(np.full(36, 3.0)), _scan(np.full(36, 3.0)))
    summary = summarize([full, far])
    assert summary["nnd_acc_zone1"] == pytest.approx(0.0)
    assert summary["inliers_acc_zone3"] == pytest.approx(100.0)
    assert summary["poses"] == 2
    assert summarize([far])["nnd_acc_zone1"] is None


def test_ablation_report_tied_and_verbatim():
    """Test identical arms tie on every metric and values pass through unchanged."""
    summary = {"nnd_acc_zone3": 0.123, "inliers_acc_zone3": 80.0, "nnd_cov_zone3": 0.2, "inliers_cov_zone3": 70.0}
    table, orderings = ablation_report({"a": summary, "b": dict(summary)})
    assert table.loc["a", "nnd_acc_zone3"] == 0.123
    assert (orderings["outcome"] == "tied").all()
    assert len(orderings) == 4


def test_ablation_report_orderings():
    a = {"nnd_acc_zone3": 0.1, "inliers_acc_zone3": 90.0, "nnd_cov_zone3": None, "inliers_cov_zone3": 60.0}
    b = {"nnd_acc_zone3": 0.2, "inliers_acc_zone3": 95.0, "nnd_cov_zone3": 0.3, "inliers_cov_zone3": 60.0}
    _, orderings = ablation_report({"a": a, "b": b})
    outcomes = dict(zip(orderings["metric"], orderings["outcome"]))
    assert outcomes == {
        "nnd_acc_zone3": "a better",
        "inliers_acc_zone3": "b better",
        "nnd_cov_zone3": "undefined",
        "inliers_cov_zone3": "tied",
    }


def test_ablation_report_needs_two_arms():
    with pytest.raises(InvalidArgumentError):
        ablation_report({"a": {}})
