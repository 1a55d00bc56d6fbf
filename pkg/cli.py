"""Command-line entry points: generate, train, evaluate, ablate, render-scan."""
import functools
import math

import click
from pydantic import ValidationError

from virusnerf import create_app
from virusnerf.core.scenes import SCENES, TRAJECTORY_PRESETS
from virusnerf.core.utils import InvalidArgumentError, VirusNerfError
from virusnerf.models.training import SENSORS
from virusnerf import tasks


def handle_errors(command):
    """Runtime failures exit 1 with their message; bad configuration exits 2."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            raise click.UsageError(str(e)) from e
        except VirusNerfError as e:
            raise click.ClickException(str(e)) from e

    return wrapper


def resolve_run(config_path, overrides: dict):
    """Load and validate the run config before any compute."""
    try:
        return tasks.load_run_config(config_path, overrides)
    except (ValidationError, InvalidArgumentError) as e:
        raise click.UsageError(str(e)) from e


def parse_sensors(value):
    if value is None:
        return None
    sensors = [s.strip() for s in value.split(",") if s.strip()]
    unknown = sorted(set(sensors) - set(SENSORS))
    if unknown or not sensors:
        raise click.BadParameter(f"expected a comma list of {', '.join(SENSORS)}, got '{value}'")
    return sensors


@click.group()
@click.option("--threads", type=click.IntRange(min=1), default=None, help="BLAS/OpenMP thread limit")
@click.option("--env", "env_name", default=None, help="Settings environment (development, testing, production)")
@click.pass_context
def cli(ctx, threads, env_name):
    """Desk-scale neural field mapping with low-cost range sensors."""
    ctx.obj = create_app(env_name, threads)


@cli.command()
@click.option("--scene", type=click.Choice(sorted(SCENES)), default="mini-office", show_default=True)
@click.option("--trajectory", type=click.Choice(TRAJECTORY_PRESETS), default="patrol", show_default=True)
@click.option("--n-poses", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pose-noise", type=(float, float), default=None, help="sigma_xy [m] and sigma_yaw [deg]")
@click.option("--dense-depth", is_flag=True, help="Also record dense depth images (RGB-D arm)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@handle_errors
def generate(scene, trajectory, n_poses, seed, pose_noise, dense_depth, out_dir):
    """Simulate a dataset along a trajectory preset."""
    run = resolve_run(
        None,
        {
            "scene": scene,
            "trajectory": trajectory,
            "n_poses": n_poses,
            "seed": seed,
            "pose_noise": list(pose_noise) if pose_noise else None,
            "rig.dense_depth": dense_depth or None,
        },
    )
    dataset = tasks.generate(run, out_dir)
    click.echo(f"✅ Dataset written to {out_dir}")
    click.echo(f"   Scene: {dataset.scene}")
    click.echo(f"   Frames: {len(dataset)}")
    click.echo(f"   IRS validity: {dataset.irs_validity():.3f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--dataset", type=click.Path(file_okay=False), default=None)
@click.option("--scene", type=click.Choice(sorted(SCENES)), default=None)
@click.option("--sensors", default=None, help="Comma list, e.g. cam,uss,irs")
@click.option("--grid", type=click.Choice(["virus", "instantngp-style"]), default=None)
@click.option("--mode", type=click.Choice(["offline", "online"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output directory")
@click.option("--export-grid", is_flag=True, help="Write the occupancy raster")
@click.option("--plots", is_flag=True, help="Write SVG timeline charts")
@click.pass_obj
@handle_errors
def train(
    runtime,
    config_path,
    dataset,
    scene,
    sensors,
    grid,
    mode,
    steps,
    batch_size,
    seed,
    out_dir,
    resume,
    export_grid,
    plots,
):
    """Train a field offline or online and evaluate it."""
    run = resolve_run(
        config_path,
        {
            "dataset": dataset,
            "scene": scene,
            "sensors": parse_sensors(sensors),
            "grid.variant": grid,
            "train.mode": mode,
            "train.steps": steps,
            "train.batch_size": batch_size,
            "seed": seed,
            "output_dir": out_dir,
        },
    )
    outcome = tasks.train_run(run, runtime.config, resume=resume, export_grid=export_grid, plots=plots)
    report = outcome.result.last_report
    click.echo(f"✅ Trained {run.arm_name} ({run.train.mode}) for {outcome.result.state.step} steps")
    if report is not None:
        click.echo(f"   Final L_tot: {report.L_tot:.5f}")
    acc = outcome.summary.get("nnd_acc_zone3")
    if acc is not None:
        click.echo(f"   Zone-3 NND accuracy: {acc:.3f} m")
    click.echo(f"   Outputs: {outcome.out_dir}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--min-opacity", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--no-baselines", is_flag=True, help="Skip the momentary sensor baselines")
@click.pass_obj
@handle_errors
def evaluate(runtime, checkpoint, dataset, out_dir, min_opacity, no_baselines):
    """Render scans at the test poses and compute the zone metrics."""
    summaries = tasks.evaluate_run(
        checkpoint, dataset, out_dir, runtime.config, min_opacity=min_opacity, baselines=not no_baselines
    )
    click.echo(f"✅ Metrics written to {out_dir}")
    for kind, summary in summaries.items():
        acc, cov = summary.get("nnd_acc_zone3"), summary.get("nnd_cov_zone3")
        acc_text = f"{acc:.3f}" if acc is not None else "-"
        cov_text = f"{cov:.3f}" if cov is not None else "-"
        click.echo(f"   {kind}: zone-3 accuracy {acc_text} m, coverage {cov_text} m")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@handle_errors
def ablate(runtime, config_path, out_dir):
    """Run an arm matrix over shared seeds and write the comparison."""
    try:
        config = tasks.load_ablation_config(config_path)
    except (ValidationError, InvalidArgumentError) as e:
        raise click.UsageError(str(e)) from e
    table, _ = tasks.ablate(config, runtime.config, out_dir)
    click.echo(f"✅ Ablation of {len(table)} arms over {len(config.seeds)} seeds written to {out_dir}")
    click.echo(table.to_string(na_rep="-"))


@cli.command("render-scan")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--pose", type=(float, float, float), required=True, help="x [m], y [m], yaw [deg]")
@click.option("--height", type=float, default=None, help="Scan height [m], defaults to the rig height")
@click.option("--angular-step", type=click.FloatRange(min=0.0, min_open=True), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
@handle_errors
def render_scan(runtime, checkpoint, dataset, pose, height, angular_step, out_path):
    """Render one 360-degree depth scan to CSV."""
    if height is None:
        height = tasks.load_rig(dataset).sensor_height_m
    x, y, yaw_deg = pose
    path = tasks.render_scan_file(
        checkpoint,
        dataset,
        (x, y, math.radians(yaw_deg)),
        height,
        angular_step or runtime.config.SCAN_ANGULAR_STEP_DEG,
        out_path,
    )
    click.echo(f"✅ Scan written to {path}")


if __name__ == "__main__":
    cli()
