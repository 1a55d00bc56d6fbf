"""Test the loss terms, the ray bank and the training loop."""
import numpy as np
import pandas as pd
import pytest

from virusnerf.core.field import create_field
from virusnerf.core.train import (
    TIMELINE_COLUMNS,
    PlaybackClock,
    build_ray_bank,
    check_causality,
    color_loss,
    color_loss_grad,
    compute_losses,
    init_state,
    integrate_depth,
    irs_loss,
    run_offline,
    run_online,
    run_training,
    uss_loss,
    uss_pixel_mask,
    visible_frame_count,
)
from virusnerf.core.utils import DatasetError, InvalidArgumentError
from virusnerf.models.rays import RayBatch
from virusnerf.models.training import PixelBatch, RunConfig


def _batch(point_depth, uss_depth):
    n = len(point_depth)
    return PixelBatch(
        rays=RayBatch(
            origins=np.full((n, 3), 0.5),
            directions=np.tile([1.0, 0.0, 0.0], (n, 1)),
            t_near=np.zeros(n),
            t_far=np.full(n, 0.5),
        ),
        colors=np.zeros((n, 3)),
        point_depth=np.asarray(point_depth, dtype=np.float64),
        uss_depth=np.asarray(uss_depth, dtype=np.float64),
        frame=np.zeros(n, dtype=np.int64),
        stack=np.zeros(n, dtype=np.int64),
    )


def test_color_loss_hand_value():
    assert color_loss(np.array([[0.1, 0.0, 0.0]]), np.zeros((1, 3))) == pytest.approx(0.01)
    np.testing.assert_allclose(color_loss_grad(np.array([[0.1, 0.0, 0.0]]), np.zeros((1, 3))), [[0.2, 0.0, 0.0]])


def test_color_loss_rejects_wrong_width():
    with pytest.raises(InvalidArgumentError):
        color_loss(np.zeros((2, 4)), np.zeros((2, 4)))


def test_irs_loss_hand_value():
    assert irs_loss(np.array([1.2, 5.0]), np.array([1.0, np.nan])) == pytest.approx(0.04)


def test_uss_loss_one_sided():
    """Test only renders strictly closer than echo minus margin are penalized."""
    depth = np.array([2.0])
    assert uss_loss(np.array([1.5]), depth, 0.1) == pytest.approx(0.25)
    assert uss_loss(depth - 0.1, depth, 0.1) == 0.0
    assert uss_loss(np.array([2.5]), depth, 0.1) == 0.0


def test_compute_losses_means_per_active_ray():
    """Test every term is averaged over its own active rays."""
    batch = _batch([1.0, np.nan, 2.0, np.nan], [np.nan, 2.0, 2.0, 2.0])
    rendered_color = np.tile([0.1, 0.0, 0.0], (4, 1))
    rendered_depth = np.array([1.2, 1.0, 1.7, 3.0])

    report, dcolor, ddepth = compute_losses(batch, rendered_color, rendered_depth, RunConfig())

    assert report.L_c == pytest.approx(0.01)
    assert report.L_IRS == pytest.approx((0.04 + 0.09) / 2)
    assert report.L_USS == pytest.approx((1.0 + 0.09) / 3)
    assert report.L_tot == pytest.approx(0.01 + 0.065 + 1.09 / 3)
    assert report.counts == {"color": 4, "irs": 2, "uss": 3}
    np.testing.assert_allclose(dcolor[:, 0], 0.05)
    assert ddepth[3] == 0.0


def test_compute_losses_without_camera():
    batch = _batch([1.0], [np.nan])
    run = RunConfig(sensors=["irs"])
    report, dcolor, _ = compute_losses(batch, np.ones((1, 3)), np.array([1.1]), run)
    assert report.L_c == 0.0
    assert "color" not in report.counts
    np.testing.assert_array_equal(dcolor, 0.0)


def test_pixel_batch_rejects_negative_depth():
    with pytest.raises(ValueError):
        _batch([-1.0], [np.nan])


def test_visible_frame_count():
    timestamps = np.array([0.0, 1.0, 2.0])
    assert visible_frame_count(timestamps, -5.0) == 1
    assert visible_frame_count(timestamps, 1.0) == 2
    assert visible_frame_count(timestamps, 10.0) == 3


def test_playback_clock_starts_at_first_frame(tiny_run):
    clock = PlaybackClock(np.array([3.0, 4.0, 7.0]), tiny_run)
    assert clock.now(0) == 3.0
    assert clock.seconds_per_step == pytest.approx(4.0 / (0.8 * tiny_run.train.steps))


def test_ray_bank_layout(tiny_dataset, tiny_run):
    """Test pixel rays are frame-major and carry USS echoes only inside the cone."""
    bank = build_ray_bank(tiny_dataset, tiny_run)
    n_pix = tiny_run.rig.image_width * tiny_run.rig.image_height
    assert len(bank) == len(tiny_dataset) * 2 * n_pix
    assert np.all(np.diff(bank.frame) >= 0)
    assert np.all((bank.origins >= 0) & (bank.origins <= 1))

    cone = uss_pixel_mask(tiny_run.rig)
    first = bank.pixel_indices(0, 0)
    echo = tiny_dataset.frames[0].uss[0]
    if np.isfinite(echo):
        np.testing.assert_allclose(bank.uss_depth[first][cone], echo)
    assert np.all(np.isnan(bank.uss_depth[first][~cone]))
    assert np.isfinite(bank.point_depth[first]).sum() <= tiny_run.rig.irs_zones**2


def test_training_rejects_empty_dataset(tiny_dataset, tiny_run):
    tiny_dataset.frames = []
    with pytest.raises(DatasetError):
        run_training(tiny_dataset, tiny_run)


def test_training_is_deterministic(tiny_dataset, tiny_run):
    """Test two runs with the same seed produce identical timelines and weights."""
    first = run_offline(tiny_dataset, tiny_run)
    second = run_offline(tiny_dataset, tiny_run)

    assert list(first.timeline.columns) == TIMELINE_COLUMNS
    pd.testing.assert_frame_equal(first.timeline, second.timeline)
    assert first.throughput["step"].tolist() == first.timeline["step"].tolist()
    np.testing.assert_array_equal(first.field.tables, second.field.tables)
    np.testing.assert_array_equal(first.grid.probabilities, second.grid.probabilities)
    assert first.state.step == tiny_run.train.steps


def test_online_training_is_causal(tiny_dataset, tiny_run):
    """Test no step samples a frame recorded after the simulated time."""
    result = run_online(tiny_dataset, tiny_run)
    assert check_causality(result.consumption)
    assert result.consumption["max_timestamp"].iloc[0] == tiny_dataset.timestamps[0]
    assert not result.state.consumed.all()


def test_check_causality_flags_future_frames():
    consumption = pd.DataFrame({"step": [0], "now": [1.0], "max_timestamp": [2.0]})
    assert not check_causality(consumption)


def test_camera_only_run_has_no_depth_terms(tiny_dataset, tiny_run):
    run = tiny_run.model_copy(update={"sensors": ["cam"]})
    result = run_offline(tiny_dataset, run)
    assert result.last_report.L_IRS == 0.0
    assert result.last_report.L_USS == 0.0
    assert result.last_report.counts["irs"] == 0


def test_density_warmup_freezes_color(tiny_dataset, tiny_run):
    """Test the color head stays at its initialization during density warm-up."""
    run = tiny_run.model_copy(
        update={"train": tiny_run.train.model_copy(update={"density_warmup_steps": 100})}
    )
    result = run_offline(tiny_dataset, run)
    initial = create_field(run.hash_grid.to_config(), seed=run.seed, dtype=np.float64)
    for trained, fresh in zip(result.field.color_mlp.weights, initial.color_mlp.weights):
        np.testing.assert_array_equal(trained, fresh)
    assert not np.array_equal(result.field.tables, initial.tables)


def test_density_cache_variant_trains(tiny_dataset, tiny_run):
    run = tiny_run.model_copy(
        update={"grid": tiny_run.grid.model_copy(update={"variant": "instantngp-style"})}
    )
    result = run_offline(tiny_dataset, run)
    assert result.grid.nerf_updates == tiny_run.train.steps // tiny_run.train.grid_update_every
    assert np.isfinite(result.grid.densities).all()


def test_evaluator_results_land_in_timeline(tiny_dataset, tiny_run):
    calls = []

    def evaluator(state, visible):
        calls.append((state.step, len(visible)))
        return {"psnr": 12.5}

    result = run_offline(tiny_dataset, tiny_run, evaluator=evaluator)
    assert calls == [(2, 6), (4, 6)]
    assert result.timeline["psnr"].tolist() == [12.5, 12.5]


def test_integrate_depth_respects_grid_range(tiny_dataset, tiny_run):
    """Test the configured Depth-Update range filters IRS readings."""
    short = tiny_run.model_copy(update={"grid": tiny_run.grid.model_copy(update={"max_range_m": 1e-3})})
    state = init_state(short, len(tiny_dataset))
    integrate_depth(state, tiny_dataset, short, range(len(tiny_dataset)))
    np.testing.assert_array_equal(state.grid.probabilities, 0.5)

    state = init_state(tiny_run, len(tiny_dataset))
    integrate_depth(state, tiny_dataset, tiny_run, range(len(tiny_dataset)))
    assert np.any(state.grid.probabilities != 0.5)
