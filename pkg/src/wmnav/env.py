"""The navigation MDP: observation, action scaling, sparse reward, termination.

The control period is simulated: each ``step`` advances the robot by ``dt``
seconds of physics. With ``realtime=True`` the call additionally blocks so
consecutive steps are at least ``dt`` seconds apart on the wall clock.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from wmnav.sim import LidarScan, Pose, StageSpec, raycast, sample_goal, step_kinematics, wrap_angle

RUNNING, SUCCESS, COLLISION, TIMEOUT = "running", "success", "collision", "timeout"


class EpisodeFinishedError(RuntimeError):
    """``step`` was called on an episode that already terminated."""


@dataclass
class EnvConfig:
    n_beams: int = 10
    d_max: float = 3.5
    d_goal: float = 0.4
    d_collision: float = 0.2
    r_success: float = 100.0
    r_fail: float = -10.0
    t_max: int | None = None  # None: take the stage's budget
    dt: float = 0.15
    v_lin_max: float = 0.22
    v_ang_max: float = 2.0
    realtime: bool = False
    random_heading: bool = False
    lidar_noise: float = 0.0

    def __post_init__(self):
        if not (0 < self.d_collision < self.d_goal < self.d_max):
            raise ValueError("require 0 < d_collision < d_goal < d_max")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_max is not None and self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.n_beams < 1:
            raise ValueError("n_beams must be >= 1")


@dataclass(frozen=True)
class Observation:
    distances: np.ndarray
    delta: float
    alpha: float
    prev_v_lin: float
    prev_v_ang: float

    def vector(self) -> np.ndarray:
        """Flat layout [d_1..d_N, delta, alpha, prev_v_lin, prev_v_ang]."""
        return np.concatenate([self.distances, [self.delta, self.alpha, self.prev_v_lin, self.prev_v_ang]])

    def __len__(self) -> int:
        return len(self.distances) + 4


@dataclass(frozen=True)
class StepResult:
    obs: Observation
    reward: float
    done: bool
    outcome: str


def denormalize_action(a, v_lin_max: float = 0.22, v_ang_max: float = 2.0) -> tuple[float, float]:
    """Map a normalized action in [0,1]x[-1,1] to (m/s, rad/s). Inputs are clamped."""
    a1 = min(max(float(a[0]), 0.0), 1.0)
    a2 = min(max(float(a[1]), -1.0), 1.0)
    return a1 * v_lin_max, a2 * v_ang_max


def compute_reward(delta: float, min_d: float, t: int, t_max: int,
                   d_goal: float = 0.4, d_collision: float = 0.2,
                   r_success: float = 100.0, r_fail: float = -10.0) -> tuple[float, bool, str]:
    """Sparse reward. Success is tested first, so reaching the goal while
    touching an obstacle still counts as success."""
    if delta < d_goal:
        return r_success, True, SUCCESS
    if min_d < d_collision:
        return r_fail, True, COLLISION
    if t >= t_max:
        return r_fail, True, TIMEOUT
    return 0.0, False, RUNNING


def build_observation(scan: LidarScan, pose: Pose, goal, prev_action) -> Observation:
    gx, gy = goal
    delta = math.hypot(gx - pose.x, gy - pose.y)
    alpha = wrap_angle(math.atan2(gy - pose.y, gx - pose.x) - pose.theta)
    return Observation(distances=scan.distances, delta=delta, alpha=alpha,
                       prev_v_lin=float(prev_action[0]), prev_v_ang=float(prev_action[1]))


@dataclass
class NavEnv:
    """One navigation episode at a time on a fixed stage.

    Owns its random generator; ``reset(seed)`` reseeds it, ``reset()``
    continues the current stream.
    """

    stage: StageSpec
    config: EnvConfig = field(default_factory=EnvConfig)
    seed: int | None = None

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.t_max = self.config.t_max or self.stage.t_max
        self.clamp_count = 0
        self.pose: Pose | None = None
        self.goal: tuple[float, float] | None = None
        self.t = 0
        self.done = True
        self.prev_action = (0.0, 0.0)
        self._last_step_time: float | None = None

    @property
    def obs_dim(self) -> int:
        return self.config.n_beams + 4

    def reset(self, seed: int | None = None, goal: tuple[float, float] | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        spawn = self.stage.spawn
        if self.config.random_heading:
            spawn = Pose(spawn.x, spawn.y, self.rng.uniform(-math.pi, math.pi))
        self.pose = spawn
        self.goal = goal if goal is not None else sample_goal(
            self.stage, self.rng, spawn, min_robot_distance=2.0 * self.config.d_goal)
        self.t = 0
        self.done = False
        self.prev_action = (0.0, 0.0)
        self._last_step_time = None
        return build_observation(self._scan(), self.pose, self.goal, self.prev_action)

    def _scan(self) -> LidarScan:
        return raycast(self.pose, self.stage, self.config.n_beams, self.config.d_max,
                       noise_std=self.config.lidar_noise, rng=self.rng)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinishedError("episode is finished; call reset()")
        a = np.asarray(action, dtype=np.float64)
        clamped = (min(max(a[0], 0.0), 1.0), min(max(a[1], -1.0), 1.0))
        if clamped != (a[0], a[1]):
            self.clamp_count += 1
        cfg = self.config
        v_lin, v_ang = denormalize_action(clamped, cfg.v_lin_max, cfg.v_ang_max)
        self.pose = step_kinematics(self.pose, v_lin, v_ang, cfg.dt)
        self.t += 1
        self.prev_action = (float(clamped[0]), float(clamped[1]))
        scan = self._scan()
        obs = build_observation(scan, self.pose, self.goal, self.prev_action)
        reward, done, outcome = compute_reward(
            obs.delta, float(scan.distances.min()), self.t, self.t_max,
            cfg.d_goal, cfg.d_collision, cfg.r_success, cfg.r_fail)
        self.done = done
        if cfg.realtime:
            self._hold_rate()
        return StepResult(obs, reward, done, outcome)

    def _hold_rate(self):
        now = time.monotonic()
        if self._last_step_time is not None:
            wait = self.config.dt - (now - self._last_step_time)
            if wait > 0:
                time.sleep(wait)
        self._last_step_time = time.monotonic()
