"""2D world for the navigation task: stage geometry, LIDAR raycasting,
differential-drive kinematics and goal sampling.

Everything here is a pure function of immutable stage data, except goal
sampling which consumes a caller-owned ``numpy.random.Generator``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

SCHEMA_VERSION = "v1"
MAX_GOAL_REJECTIONS = 10_000
_MIN_RANGE = 1e-6


class StageError(ValueError):
    """Raised when a stage file cannot be parsed or violates an invariant."""


class GoalSamplingError(RuntimeError):
    """Raised when no admissible goal is found; the stage is over-constrained."""


def wrap_angle(angle: float) -> float:
    """Wrap into (-pi, pi]. An angle of exactly +-pi maps to +pi."""
    return math.pi - (math.pi - angle) % (2.0 * math.pi)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def contains_rect(self, other: "Rect") -> bool:
        return (self.xmin <= other.xmin and self.ymin <= other.ymin
                and other.xmax <= self.xmax and other.ymax <= self.ymax)


@dataclass(frozen=True)
class StageSpec:
    name: str
    bounds: Rect
    walls: np.ndarray  # (W, 4) rows x1, y1, x2, y2
    circles: np.ndarray  # (C, 3) rows cx, cy, r
    spawn: Pose
    goal_region: tuple[Rect, ...]
    goal_clearance: float
    t_max: int
    obstacle_count: int = field(default=0)

    def clearance(self, x: float, y: float) -> float:
        """Distance from a point to the nearest wall segment or circle boundary."""
        return float(clearance(np.array([[x, y]]), self.walls, self.circles)[0])


@dataclass(frozen=True)
class LidarScan:
    distances: np.ndarray
    max_range: float

    @property
    def n_beams(self) -> int:
        return len(self.distances)


def clearance(points: np.ndarray, walls: np.ndarray, circles: np.ndarray) -> np.ndarray:
    """Vectorised point-to-obstacle distance for an array of points (P, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    best = np.full(len(points), np.inf)
    if len(walls):
        a = walls[None, :, 0:2]
        ab = walls[None, :, 2:4] - walls[None, :, 0:2]
        ap = points[:, None, :] - a
        s = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
        nearest = a + s[..., None] * ab
        best = np.minimum(best, np.linalg.norm(points[:, None, :] - nearest, axis=-1).min(1))
    if len(circles):
        d = np.linalg.norm(points[:, None, :] - circles[None, :, 0:2], axis=-1) - circles[None, :, 2]
        # Points inside a cylinder have zero clearance.
        best = np.minimum(best, np.maximum(d, 0.0).min(1))
    return best


def _bounds_walls(b: Rect) -> np.ndarray:
    return np.array([
        [b.xmin, b.ymin, b.xmax, b.ymin],
        [b.xmax, b.ymin, b.xmax, b.ymax],
        [b.xmax, b.ymax, b.xmin, b.ymax],
        [b.xmin, b.ymax, b.xmin, b.ymin],
    ])


def _field(data: dict, key: str):
    if key not in data:
        raise StageError(f"missing field '{key}'")
    return data[key]


def _floats(value, n: int, what: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise StageError(f"{what}: expected a list of {n} numbers, got {value!r}")
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise StageError(f"{what}: non-numeric entry in {value!r}") from None


def load_stage(text: str) -> StageSpec:
    """Parse and validate a stage file.

    The file is JSON. ``walls`` lists interior segments; the four sides of
    ``bounds`` are always added as walls. If ``bounds_walls`` is false the
    outer walls are omitted (used for open test arenas).
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StageError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise StageError("stage file must contain a JSON object")
    version = _field(data, "version")
    if version != SCHEMA_VERSION:
        raise StageError(f"unsupported schema version {version!r}, expected {SCHEMA_VERSION!r}")

    name = str(_field(data, "name"))
    bounds = Rect(*_floats(_field(data, "bounds"), 4, "bounds"))
    if bounds.xmax <= bounds.xmin or bounds.ymax <= bounds.ymin:
        raise StageError("bounds must have xmax > xmin and ymax > ymin")

    walls = [_floats(w, 4, f"walls[{i}]") for i, w in enumerate(_field(data, "walls"))]
    for i, (x1, y1, x2, y2) in enumerate(walls):
        if math.hypot(x2 - x1, y2 - y1) == 0.0:
            raise StageError(f"walls[{i}]: segment must have nonzero length")
    circles = [_floats(c, 3, f"circles[{i}]") for i, c in enumerate(_field(data, "circles"))]
    for i, (_, _, r) in enumerate(circles):
        if r <= 0.0:
            raise StageError(f"circles[{i}]: radius must be positive")

    spawn = Pose(*_floats(_field(data, "spawn"), 3, "spawn"))
    regions_raw = _field(data, "goal_region")
    if regions_raw and not isinstance(regions_raw[0], (list, tuple)):
        regions_raw = [regions_raw]
    regions = tuple(Rect(*_floats(r, 4, f"goal_region[{i}]")) for i, r in enumerate(regions_raw))
    if not regions:
        raise StageError("goal_region must contain at least one rectangle")
    for i, r in enumerate(regions):
        if r.xmax <= r.xmin or r.ymax <= r.ymin:
            raise StageError(f"goal_region[{i}]: rectangle must have positive area")
        if not bounds.contains_rect(r):
            raise StageError(f"goal_region[{i}] lies outside bounds")

    goal_clearance = float(_field(data, "goal_clearance"))
    if goal_clearance < 0:
        raise StageError("goal_clearance must be non-negative")
    t_max = _field(data, "t_max")
    if not isinstance(t_max, int) or t_max <= 0:
        raise StageError("t_max must be a positive integer")

    all_walls = np.array(walls, dtype=np.float64).reshape(-1, 4)
    if data.get("bounds_walls", True):
        all_walls = np.vstack([_bounds_walls(bounds), all_walls])
    circle_arr = np.array(circles, dtype=np.float64).reshape(-1, 3)

    if not bounds.contains(spawn.x, spawn.y):
        raise StageError("spawn lies outside bounds")
    spawn_clear = float(clearance(np.array([[spawn.x, spawn.y]]), all_walls, circle_arr)[0])
    if spawn_clear <= goal_clearance:
        raise StageError(
            f"spawn clearance {spawn_clear:.3f} m must exceed goal_clearance {goal_clearance} m")

    return StageSpec(
        name=name, bounds=bounds, walls=all_walls, circles=circle_arr, spawn=spawn,
        goal_region=regions, goal_clearance=goal_clearance, t_max=t_max,
        obstacle_count=len(walls) + len(circles),
    )


def builtin_stage(stage_id: int) -> StageSpec:
    """Load one of the six packaged arenas."""
    return load_stage(builtin_stage_text(stage_id))


def builtin_stage_text(stage_id: int) -> str:
    if stage_id not in range(1, 7):
        raise StageError(f"no built-in stage {stage_id}; expected 1-6")
    return resources.files("wmnav.stages").joinpath(f"stage{stage_id}.json").read_text("utf-8")


def beam_angles(n_beams: int) -> np.ndarray:
    """Beam offsets from the heading; beam 0 is straight ahead, counter-clockwise."""
    return np.arange(n_beams) * (2.0 * math.pi / n_beams)


def raycast_rays(origin: np.ndarray, angles: np.ndarray, walls: np.ndarray,
                 circles: np.ndarray, max_range: float) -> np.ndarray:
    """Nearest hit distance along each world-frame ray angle, clipped to max_range."""
    ox, oy = float(origin[0]), float(origin[1])
    dx = np.cos(angles)[:, None]
    dy = np.sin(angles)[:, None]
    best = np.full(len(angles), float(max_range))

    if len(walls):
        ax, ay = walls[:, 0], walls[:, 1]
        ex, ey = walls[:, 2] - ax, walls[:, 3] - ay
        # Solve origin + t*d = a + s*e for (t, s).
        denom = dx * ey - dy * ex
        wx, wy = ax - ox, ay - oy
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (wx * ey - wy * ex) / denom
            s = (wx * dy - wy * dx) / denom
        hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
        t = np.where(hit, t, np.inf)
        best = np.minimum(best, t.min(1))

    if len(circles):
        fx, fy = ox - circles[:, 0], oy - circles[:, 1]
        b = dx * fx + dy * fy
        c = fx * fx + fy * fy - circles[:, 2] ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near = -b - root
        far = -b + root
        t = np.where(near >= 0.0, near, far)
        t = np.where((disc >= 0.0) & (t >= 0.0), t, np.inf)
        best = np.minimum(best, t.min(1))

    return np.clip(best, _MIN_RANGE, max_range)


def raycast(pose: Pose, stage: StageSpec, n_beams: int, max_range: float = 3.5,
            noise_std: float = 0.0, rng: np.random.Generator | None = None) -> LidarScan:
    """Simulated LIDAR scan of ``n_beams`` equally spaced beams.

    ``noise_std`` adds Gaussian range noise (requires ``rng``); results are
    re-clipped into (0, max_range].
    """
    if n_beams < 1:
        raise ValueError("n_beams must be >= 1")
    angles = pose.theta + beam_angles(n_beams)
    d = raycast_rays(np.array([pose.x, pose.y]), angles, stage.walls, stage.circles, max_range)
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        d = np.clip(d + rng.normal(0.0, noise_std, size=d.shape), _MIN_RANGE, max_range)
    return LidarScan(distances=d, max_range=float(max_range))


def step_kinematics(pose: Pose, v_lin: float, v_ang: float, dt: float) -> Pose:
    """Exact unicycle integration over ``dt`` at constant velocities."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    half = 0.5 * v_ang * dt
    # chord of the arc: length v*dt*sin(half)/half along the mid-arc heading,
    # free of the cancellation in the sin(th + w dt) - sin(th) form
    chord = v_lin * dt * (math.sin(half) / half if half != 0.0 else 1.0)
    mid = pose.theta + half
    return Pose(pose.x + chord * math.cos(mid), pose.y + chord * math.sin(mid), pose.theta + v_ang * dt)


def sample_goal(stage: StageSpec, rng: np.random.Generator, robot: Pose,
                min_robot_distance: float = 0.8) -> tuple[float, float]:
    """Rejection-sample a goal uniformly over the stage's goal region.

    A candidate is kept when its obstacle clearance is at least
    ``stage.goal_clearance`` and it is at least ``min_robot_distance`` from
    the robot (twice the success radius by default).
    """
    areas = np.array([r.area for r in stage.goal_region])
    probs = areas / areas.sum()
    for _ in range(MAX_GOAL_REJECTIONS):
        rect = stage.goal_region[rng.choice(len(probs), p=probs)] if len(probs) > 1 else stage.goal_region[0]
        gx = rng.uniform(rect.xmin, rect.xmax)
        gy = rng.uniform(rect.ymin, rect.ymax)
        if math.hypot(gx - robot.x, gy - robot.y) < min_robot_distance:
            continue
        if stage.clearance(gx, gy) >= stage.goal_clearance:
            return float(gx), float(gy)
    raise GoalSamplingError(
        f"stage '{stage.name}': no admissible goal after {MAX_GOAL_REJECTIONS} samples")
