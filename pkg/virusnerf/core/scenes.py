"""Bundled scenes and trajectory presets."""
import math
from dataclasses import dataclass

import numpy as np

from virusnerf.core.utils import InvalidArgumentError, require
from virusnerf.models.sensors import Environment, TimedPose

TRAJECTORY_PRESETS = ("straight", "patrol", "out-and-back")
DEFAULT_SPEED_MPS = 0.3

WALL_HEIGHT = 2.5
PALETTE = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.65, 0.25],
        [0.20, 0.35, 0.85],
        [0.90, 0.75, 0.20],
        [0.70, 0.30, 0.75],
        [0.20, 0.75, 0.80],
        [0.95, 0.55, 0.25],
        [0.55, 0.55, 0.55],
    ]
)


@dataclass
class Scene:
    """An environment with a closed patrol loop through its free space."""

    env: Environment
    waypoints: list


def rectangle(x0, y0, x1, y1) -> list:
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def polygon_segments(polygon: list) -> np.ndarray:
    pts = np.asarray(polygon, dtype=np.float64)
    return np.stack([pts, np.roll(pts, -1, axis=0)], axis=1)


def build_environment(name: str, outer: list, obstacles: list, textured: bool = True) -> Environment:
    """
    Assemble wall segments from an outer boundary and (polygon, height) obstacles.

    Outer walls take one palette color per edge, each obstacle one color.
    """
    segments, colors, heights = [], [], []
    for i, seg in enumerate(polygon_segments(outer)):
        segments.append(seg)
        colors.append(PALETTE[i % len(PALETTE)])
        heights.append((0.0, WALL_HEIGHT))
    for j, (polygon, height) in enumerate(obstacles):
        color = PALETTE[(j + 3) % len(PALETTE)] * 0.8 + 0.1
        for seg in polygon_segments(polygon):
            segments.append(seg)
            colors.append(color)
            heights.append((0.0, height))
    return Environment(
        name=name,
        segments=np.array(segments),
        colors=np.array(colors),
        heights=np.array(heights),
        outer=list(outer),
        obstacles=[list(p) for p, _ in obstacles],
        ceiling_z=WALL_HEIGHT,
        textured=textured,
    )


def box_room(width: float, depth: float, name: str = "box-room", textured: bool = False) -> Scene:
    """Empty rectangular room with a loop at a quarter of its size from the walls."""
    env = build_environment(name, rectangle(0.0, 0.0, width, depth), [], textured=textured)
    mx, my = width / 4.0, depth / 4.0
    return Scene(env=env, waypoints=rectangle(mx, my, width - mx, depth - my))


def smoke_room() -> Scene:
    env = build_environment(
        "smoke-room",
        rectangle(0.0, 0.0, 4.0, 3.0),
        [(rectangle(2.7, 1.8, 3.3, 2.4), 0.8)],
    )
    return Scene(env=env, waypoints=rectangle(0.8, 0.8, 2.2, 2.2))


def mini_office() -> Scene:
    obstacles = [
        (rectangle(4.45, 0.0, 4.55, 4.5), WALL_HEIGHT),
        (rectangle(0.5, 0.5, 2.0, 1.3), 0.75),
        (rectangle(2.5, 0.5, 4.0, 1.3), 0.75),
        (rectangle(5.2, 0.5, 6.7, 1.3), 0.75),
        (rectangle(7.0, 2.0, 8.5, 3.2), 0.75),
        (rectangle(0.2, 5.5, 0.8, 7.5), 1.8),
        (rectangle(6.0, 7.4, 8.8, 7.8), 2.0),
        (rectangle(2.5, 3.5, 2.9, 3.9), WALL_HEIGHT),
    ]
    env = build_environment("mini-office", rectangle(0.0, 0.0, 9.0, 8.0), obstacles)
    loop = [(1.5, 2.3), (3.6, 2.3), (3.6, 5.0), (6.3, 5.0), (6.3, 6.5), (1.5, 6.5)]
    return Scene(env=env, waypoints=loop)


def mini_commons() -> Scene:
    obstacles = [
        (rectangle(5.0, 4.0, 5.5, 4.5), WALL_HEIGHT),
        (rectangle(5.0, 8.0, 5.5, 8.5), WALL_HEIGHT),
        (rectangle(13.0, 4.0, 13.5, 4.5), WALL_HEIGHT),
        (rectangle(13.0, 8.0, 13.5, 8.5), WALL_HEIGHT),
        (rectangle(8.0, 5.8, 10.0, 6.2), 0.45),
        (rectangle(15.0, 0.3, 17.5, 1.5), 1.1),
    ]
    env = build_environment("mini-commons", rectangle(0.0, 0.0, 18.0, 12.0), obstacles)
    return Scene(env=env, waypoints=rectangle(3.0, 3.0, 15.0, 9.0))


SCENES = {
    "smoke-room": smoke_room,
    "mini-office": mini_office,
    "mini-commons": mini_commons,
}


def get_scene(name: str) -> Scene:
    try:
        return SCENES[name]()
    except KeyError:
        raise InvalidArgumentError(
            f"Unknown scene '{name}', expected one of: {', '.join(sorted(SCENES))}"
        ) from None


def _path_points(waypoints: list, preset: str) -> np.ndarray:
    pts = np.asarray(waypoints, dtype=np.float64)
    if preset == "straight":
        return pts[:2]
    loop = np.vstack([pts, pts[:1]])
    if preset == "patrol":
        return loop
    return np.vstack([loop, loop[-2::-1]])


def make_trajectory(
    scene: Scene,
    preset: str = "patrol",
    n_poses: int = 100,
    speed: float = DEFAULT_SPEED_MPS,
) -> list:
    """
    Evenly spaced poses along a preset path, heading along the path.

    straight: first leg of the loop; patrol: one closed loop;
    out-and-back: the loop, then the same loop driven backwards.
    """
    if preset not in TRAJECTORY_PRESETS:
        raise InvalidArgumentError(
            f"Unknown trajectory preset '{preset}', expected one of: {', '.join(TRAJECTORY_PRESETS)}"
        )
    require(n_poses >= 2, f"n_poses must be >= 2, got {n_poses}")
    require(speed > 0, f"speed must be > 0, got {speed}")

    pts = _path_points(scene.waypoints, preset)
    legs = np.diff(pts, axis=0)
    lengths = np.linalg.norm(legs, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cumulative[-1]

    if preset == "patrol":
        s = np.arange(n_poses) * (total / n_poses)
    else:
        s = np.linspace(0.0, total, n_poses)

    leg = np.clip(np.searchsorted(cumulative, s, side="right") - 1, 0, len(legs) - 1)
    frac = (s - cumulative[leg]) / lengths[leg]
    xy = pts[leg] + frac[:, None] * legs[leg]
    yaw = np.arctan2(legs[leg, 1], legs[leg, 0])

    return [
        TimedPose(t=float(si / speed), x=float(p[0]), y=float(p[1]), yaw=float(math.remainder(a, 2 * math.pi)))
        for si, p, a in zip(s, xy, yaw)
    ]
