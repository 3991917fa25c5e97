import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import march_rays, random_stage
from wmnav.sim import (
    GoalSamplingError,
    Pose,
    Rect,
    StageError,
    StageSpec,
    beam_angles,
    builtin_stage,
    builtin_stage_text,
    load_stage,
    raycast,
    sample_goal,
    step_kinematics,
    wrap_angle,
)


def stage_text(**changes):
    data = json.loads(builtin_stage_text(1))
    data.update(changes)
    return json.dumps(data, indent=2)


# -- stage files -----------------------------------------------------------------

def test_stage1_is_empty_walled_arena():
    s = builtin_stage(1)
    assert s.walls.shape == (4, 4)
    assert s.circles.shape == (0, 3)
    assert s.bounds == Rect(-2, -2, 2, 2)
    assert s.t_max == 300


@pytest.mark.parametrize("stage_id", range(1, 7))
def test_builtin_stages_load_and_sample(stage_id):
    s = builtin_stage(stage_id)
    assert s.t_max == (300 if stage_id <= 4 else 500)
    g = sample_goal(s, np.random.default_rng(0), s.spawn)
    assert s.clearance(*g) >= s.goal_clearance


def test_builtin_stage_dimensions():
    widths = {i: (builtin_stage(i).bounds.xmax - builtin_stage(i).bounds.xmin,
                  builtin_stage(i).bounds.ymax - builtin_stage(i).bounds.ymin) for i in range(1, 7)}
    assert widths[1] == widths[2] == widths[3] == (4, 4)
    assert widths[4] == (5, 5)
    assert widths[5] == (7.5, 7.5)
    assert widths[6] == (7.5, 14)
    expected = sorted([x, y, 0.15] for x in (-0.9, 0.9) for y in (-0.9, 0.9))
    assert sorted(builtin_stage(2).circles.tolist()) == expected
    assert [builtin_stage(i).obstacle_count for i in (4, 5, 6)] == [8, 10, 12]


def test_zero_radius_rejected():
    with pytest.raises(StageError, match="radius must be positive"):
        load_stage(stage_text(circles=[[1, 1, 0]]))


def test_goal_region_outside_bounds_rejected():
    with pytest.raises(StageError, match="outside bounds"):
        load_stage(stage_text(goal_region=[[-3, -1, 1, 1]]))


def test_zero_length_segment_rejected():
    with pytest.raises(StageError, match="nonzero length"):
        load_stage(stage_text(walls=[[1, 1, 1, 1]]))


def test_spawn_too_close_to_obstacle_rejected():
    with pytest.raises(StageError, match="spawn clearance"):
        load_stage(stage_text(circles=[[0.3, 0, 0.1]]))


def test_parse_error_reports_line():
    text = stage_text().replace('"t_max": 300', '"t_max": 300,,')
    with pytest.raises(StageError, match=r"line \d+, column \d+"):
        load_stage(text)


def test_bad_field_is_named():
    with pytest.raises(StageError, match="spawn"):
        load_stage(stage_text(spawn=[0, 0]))
    with pytest.raises(StageError, match="missing field 't_max'"):
        data = json.loads(builtin_stage_text(1))
        del data["t_max"]
        load_stage(json.dumps(data))


def test_schema_version_required():
    with pytest.raises(StageError, match="version"):
        load_stage(stage_text(version="v2"))


# -- raycast -----------------------------------------------------------------------

def test_raycast_axis_aligned_cases():
    s = builtin_stage(1)
    scan = raycast(Pose(0, 0, 0), s, 8)
    assert abs(scan.distances[0] - 2.0) < 1e-9
    assert abs(scan.distances[2] - 2.0) < 1e-9
    assert abs(scan.distances[1] - 2.0 * math.sqrt(2.0)) < 1e-9
    assert round(scan.distances[1], 4) == 2.8284


def test_raycast_no_hit_is_exactly_max_range():
    s = load_stage(stage_text(bounds_walls=False))
    scan = raycast(Pose(0, 0, 0), s, 360)
    assert (scan.distances == 3.5).all()


def test_raycast_far_wall_clips_to_max_range():
    s = load_stage(stage_text(bounds=[-10, -10, 10, 10]))
    assert (raycast(Pose(0, 0, 0.3), s, 10).distances == 3.5).all()


def test_raycast_circle_hit():
    s = load_stage(stage_text(circles=[[1.0, 0.0, 0.25]]))
    d = raycast(Pose(0, 0, 0), s, 4).distances
    assert abs(d[0] - 0.75) < 1e-12
    assert abs(d[2] - 2.0) < 1e-12


def test_beam_ordering_counter_clockwise():
    s = builtin_stage(1)
    # facing +y, beam at +90 degrees points to -x
    d = raycast(Pose(0.5, 0, math.pi / 2), s, 4).distances
    assert d.tolist() == pytest.approx([2.0, 2.5, 2.0, 1.5], abs=1e-12)
    assert beam_angles(10)[1] == pytest.approx(math.radians(36))


def test_raycast_matches_march_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        stage, pose = random_stage(rng)
        scan = raycast(pose, stage, 360)
        angles = pose.theta + beam_angles(360)
        ref = march_rays(np.array([pose.x, pose.y]), angles, stage.walls, stage.circles, 3.5)
        worst = max(worst, np.abs(ref - scan.distances).max())
    assert worst <= 2e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), phi=st.floats(-math.pi, math.pi))
def test_raycast_rotation_covariant(seed, phi):
    stage, pose = random_stage(np.random.default_rng(seed))
    c, s = math.cos(phi), math.sin(phi)

    def rot(x, y):
        return c * x - s * y, s * x + c * y

    walls = np.array([[*rot(w[0], w[1]), *rot(w[2], w[3])] for w in stage.walls])
    circles = np.array([[*rot(ci[0], ci[1]), ci[2]] for ci in stage.circles])
    rpose = Pose(*rot(pose.x, pose.y), pose.theta + phi)
    rstage = StageSpec("rot", stage.bounds, walls, circles, rpose, stage.goal_region, 0.0, 300)
    a = raycast(pose, stage, 360).distances
    b = raycast(rpose, rstage, 360).distances
    assert np.abs(a - b).max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scan_range_invariant(seed):
    stage, pose = random_stage(np.random.default_rng(seed))
    d = raycast(pose, stage, 10).distances
    assert (d > 0).all() and (d <= 3.5).all()


def test_raycast_noise_needs_rng():
    with pytest.raises(ValueError):
        raycast(Pose(0, 0, 0), builtin_stage(1), 10, noise_std=0.01)
    d = raycast(Pose(0, 0, 0), builtin_stage(1), 10, noise_std=0.5, rng=np.random.default_rng(0)).distances
    assert (d > 0).all() and (d <= 3.5).all()


# -- kinematics -----------------------------------------------------------------------

def rk4_unicycle(x, y, th, v, w, dt, n=20_000):
    """Fine-step RK4 integration of x' = v cos th, y' = v sin th, th' = w."""
    h = dt / n
    for _ in range(n):
        def f(state):
            return np.array([v * math.cos(state[2]), v * math.sin(state[2]), w])
        s = np.array([x, y, th])
        k1 = f(s)
        k2 = f(s + h / 2 * k1)
        k3 = f(s + h / 2 * k2)
        k4 = f(s + h * k3)
        x, y, th = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x, y, th


def test_straight_line():
    p = step_kinematics(Pose(0, 0, 0), 1.0, 0.0, 0.15)
    assert (p.x, p.y, p.theta) == (0.15, 0.0, 0.0)


def test_pure_rotation_reaches_pi():
    p = step_kinematics(Pose(0, 0, 0), 0.0, math.pi / 0.15, 0.15)
    assert (p.x, p.y) == (0.0, 0.0)
    assert abs(p.theta - math.pi) < 1e-12


def test_arc_matches_rk4():
    p = step_kinematics(Pose(0, 0, 0), 1.0, 1.0, 0.15)
    x, y, th = rk4_unicycle(0.0, 0.0, 0.0, 1.0, 1.0, 0.15, n=2000)
    assert abs(p.x - x) < 1e-12 and abs(p.y - y) < 1e-12 and abs(p.theta - th) < 1e-12
    assert round(p.x, 5) == 0.14944
    assert abs(p.theta - 0.15) < 1e-15


@settings(max_examples=50, deadline=None)
@given(th=st.floats(-math.pi, math.pi), v=st.floats(0.0, 0.22), w=st.floats(-2.0, 2.0))
def test_arc_matches_rk4_random(th, v, w):
    p = step_kinematics(Pose(0.3, -0.2, th), v, w, 0.15)
    x, y, t = rk4_unicycle(0.3, -0.2, th, v, w, 0.15, n=50)
    assert abs(p.x - x) < 1e-9 and abs(p.y - y) < 1e-9
    assert abs(wrap_angle(p.theta - t)) < 1e-9


def test_tiny_turn_rate_has_no_cancellation():
    p = step_kinematics(Pose(0.3, -0.2, 1.0), 0.125, 3.6985677142458737e-09, 0.15)
    x, y, _ = rk4_unicycle(0.3, -0.2, 1.0, 0.125, 3.6985677142458737e-09, 0.15, n=50)
    assert abs(p.x - x) < 1e-12 and abs(p.y - y) < 1e-12


@pytest.mark.parametrize("w", [1e-7, -1e-7])
def test_small_turn_converges_to_line(w):
    th = 0.7
    arc = step_kinematics(Pose(0, 0, th), 0.22, w, 0.15)
    line = (0.22 * 0.15 * math.cos(th), 0.22 * 0.15 * math.sin(th))
    assert math.hypot(arc.x - line[0], arc.y - line[1]) <= 1e-6


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        step_kinematics(Pose(0, 0, 0), 1, 0, 0.0)


@given(st.floats(-1e4, 1e4))
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert abs(math.sin(w) - math.sin(a)) < 1e-9 and abs(math.cos(w) - math.cos(a)) < 1e-9


def test_wrap_boundary_is_plus_pi():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert Pose(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)


# -- goal sampling ---------------------------------------------------------------

def test_goal_sampling_deterministic():
    s = builtin_stage(1)
    a = sample_goal(s, np.random.default_rng(11), s.spawn)
    b = sample_goal(s, np.random.default_rng(11), s.spawn)
    assert a == b


def test_goal_sampling_overconstrained():
    s = load_stage(stage_text(circles=[[1.2, 1.2, 0.7]], goal_region=[[1.0, 1.0, 1.4, 1.4]]))
    with pytest.raises(GoalSamplingError):
        sample_goal(s, np.random.default_rng(0), s.spawn)


def test_goal_samples_respect_clearance_and_robot_distance():
    s = builtin_stage(1)
    rng = np.random.default_rng(3)
    goals = np.array([sample_goal(s, rng, s.spawn) for _ in range(10_000)])
    # distance to the walls of the 4x4 box, computed directly
    to_wall = np.minimum(2.0 - np.abs(goals[:, 0]), 2.0 - np.abs(goals[:, 1]))
    assert to_wall.min() >= s.goal_clearance
    assert np.hypot(goals[:, 0], goals[:, 1]).min() >= 0.8
    # roughly uniform: each quadrant gets about a quarter
    quad = (goals[:, 0] > 0).astype(int) * 2 + (goals[:, 1] > 0)
    assert np.all(np.abs(np.bincount(quad) / 10_000 - 0.25) < 0.02)
