"""Test the command-line entry points end to end on tiny runs."""
import json

import pandas as pd
import pytest
from click.testing import CliRunner

from cli import cli
from conftest import TINY_TOML
from virusnerf.tasks import load_run_config

ABLATION_TOML = """
seeds = [0]

[[arms]]
sensors = ["cam", "uss", "irs"]

[[arms]]
sensors = ["cam"]
""" + TINY_TOML.replace("[rig]", "[base.rig]").replace("[train]", "[base.train]").replace(
    "[grid]", "[base.grid]"
).replace("[hash_grid]", "[base.hash_grid]").replace(
    'scene = "smoke-room"\nn_poses = 3\nseed = 1\n', '[base]\nscene = "smoke-room"\nn_poses = 3\n'
)


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, ["--env", "testing", *[str(a) for a in args]])


@pytest.fixture
def dataset_dir(runner, tmp_path):
    out = tmp_path / "dataset"
    result = invoke(runner, "generate", "--scene", "smoke-room", "--n-poses", 3, "--seed", 2, "--out", out)
    assert result.exit_code == 0, result.output
    return out


def test_generate_is_deterministic(runner, tmp_path, dataset_dir):
    """Test the same seed writes byte-identical dataset files."""
    again = tmp_path / "again"
    result = invoke(runner, "generate", "--scene", "smoke-room", "--n-poses", 3, "--seed", 2, "--out", again)
    assert result.exit_code == 0, result.output
    assert "Frames: 3" in result.output

    first = sorted(p.relative_to(dataset_dir) for p in dataset_dir.rglob("*") if p.is_file())
    second = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (dataset_dir / rel).read_bytes() == (again / rel).read_bytes()


def test_generate_rejects_unknown_trajectory(runner, tmp_path):
    result = invoke(runner, "generate", "--trajectory", "zigzag", "--out", tmp_path / "x")
    assert result.exit_code == 2


def test_train_writes_outputs(runner, tmp_path, tiny_config_file):
    """Test a tiny simulated run writes its checkpoint, timeline, metrics and config echo."""
    out = tmp_path / "run"
    result = invoke(runner, "train", "--config", tiny_config_file, "--out", out, "--export-grid", "--plots")
    assert result.exit_code == 0, result.output
    assert "Trained virus/CAM+USS+IRS (offline) for 2 steps" in result.output

    for name in ("checkpoint.vnrf", "timeline.csv", "consumption.csv", "metrics.csv", "metrics.json",
                 "throughput.json", "throughput.csv", "grid.bin", "grid.json"):
        assert (out / name).is_file(), name
    assert list(out.glob("*.svg"))

    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["sha256"] == load_run_config(out / "config.resolved.json").config_hash()
    timeline = pd.read_csv(out / "timeline.csv")
    assert timeline["step"].tolist() == [1, 2]

    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["steps"] == 2
    assert "steps_per_sec" not in metrics


RESULT_FILES = ("timeline.csv", "consumption.csv", "metrics.csv", "metrics.json")


def test_train_is_deterministic(runner, tmp_path, tiny_config_file):
    """Test rerunning the same config writes byte-identical timeline, metrics and scans."""
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        result = invoke(runner, "--threads", 1, "train", "--config", tiny_config_file, "--out", out)
        assert result.exit_code == 0, result.output

    scans = sorted(p.relative_to(first) for p in (first / "scans").glob("*.csv"))
    assert scans
    for rel in [*RESULT_FILES, *scans]:
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel

    timeline = pd.read_csv(first / "timeline.csv")
    assert "steps_per_sec" not in timeline.columns
    assert "wall_time_s" not in timeline.columns
    throughput = pd.read_csv(first / "throughput.csv")
    assert throughput["step"].tolist() == [1, 2]
    assert (throughput["steps_per_sec"] > 0).all()


def test_train_rejects_invalid_config(runner, tmp_path, tiny_config_file):
    result = invoke(runner, "train", "--config", tiny_config_file, "--steps", 0, "--out", tmp_path / "run")
    assert result.exit_code == 2
    assert not (tmp_path / "run").exists()


def test_train_rejects_unknown_sensor(runner, tmp_path, tiny_config_file):
    result = invoke(runner, "train", "--config", tiny_config_file, "--sensors", "cam,radar", "--out", tmp_path / "r")
    assert result.exit_code == 2


def test_resume_checks_config_hash(runner, tmp_path, tiny_config_file):
    """Test resuming continues the same config and refuses a different one."""
    out = tmp_path / "run"
    assert invoke(runner, "train", "--config", tiny_config_file, "--out", out).exit_code == 0

    resumed = invoke(runner, "train", "--config", tiny_config_file, "--out", out, "--resume")
    assert resumed.exit_code == 0, resumed.output
    assert pd.read_csv(out / "timeline.csv")["step"].tolist() == [1, 2]

    changed = invoke(runner, "train", "--config", tiny_config_file, "--seed", 5, "--out", out, "--resume")
    assert changed.exit_code == 1
    assert "different config" in changed.output


def test_evaluate_and_render_scan(runner, tmp_path, tiny_config_file, dataset_dir):
    """Test a checkpoint trained on a saved dataset can be scored and rendered."""
    out = tmp_path / "run"
    trained = invoke(runner, "train", "--config", tiny_config_file, "--dataset", dataset_dir, "--out", out)
    assert trained.exit_code == 0, trained.output

    evaluated = invoke(
        runner, "evaluate", "--checkpoint", out / "checkpoint.vnrf", "--dataset", dataset_dir, "--out", tmp_path / "eval"
    )
    assert evaluated.exit_code == 0, evaluated.output
    for name in ("metrics.csv", "metrics.json", "baseline_lidar.csv", "baseline_irs.json", "baseline_uss.json"):
        assert (tmp_path / "eval" / name).is_file(), name

    scan_path = tmp_path / "scan.csv"
    rendered = invoke(
        runner, "render-scan", "--checkpoint", out / "checkpoint.vnrf", "--dataset", dataset_dir,
        "--pose", 1.5, 1.5, 0.0, "--out", scan_path,
    )
    assert rendered.exit_code == 0, rendered.output
    scan = pd.read_csv(scan_path)
    assert len(scan) == 36
    assert list(scan.columns) == ["azimuth_deg", "depth_m", "valid"]


def test_evaluate_refuses_foreign_checkpoint(runner, tmp_path, dataset_dir):
    bogus = tmp_path / "bogus.vnrf"
    bogus.write_bytes(b"not a checkpoint at all")
    result = invoke(runner, "evaluate", "--checkpoint", bogus, "--dataset", dataset_dir, "--out", tmp_path / "e")
    assert result.exit_code == 1


def test_ablate_two_arms(runner, tmp_path):
    """Test an arm matrix writes one table row per arm and pairwise orderings."""
    config = tmp_path / "ablation.toml"
    config.write_text(ABLATION_TOML)
    result = invoke(runner, "ablate", "--config", config, "--out", tmp_path / "ablation")
    assert result.exit_code == 0, result.output

    table = pd.read_csv(tmp_path / "ablation" / "ablation.csv")
    assert table["arm"].tolist() == ["virus/CAM+USS+IRS", "virus/CAM"]
    assert "steps_per_sec" not in table.columns
    orderings = pd.read_csv(tmp_path / "ablation" / "orderings.csv")
    assert len(orderings) == 4
    throughput = pd.read_csv(tmp_path / "ablation" / "throughput.csv")
    assert throughput["arm"].tolist() == ["virus/CAM+USS+IRS", "virus/CAM"]

    again = invoke(runner, "ablate", "--config", config, "--out", tmp_path / "again")
    assert again.exit_code == 0, again.output
    for name in ("ablation.csv", "ablation.txt", "orderings.csv"):
        assert (tmp_path / "ablation" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_ablate_needs_two_arms(runner, tmp_path):
    config = tmp_path / "one.toml"
    config.write_text('seeds = [0]\n\n[[arms]]\nsensors = ["cam"]\n')
    result = invoke(runner, "ablate", "--config", config, "--out", tmp_path / "a")
    assert result.exit_code == 2
