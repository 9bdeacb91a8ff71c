import numpy as np
import pytest

from labyrinth_mpc import harness
from labyrinth_mpc.baselines import (
    LinearMpcController,
    LinMpcConfig,
    PidController,
    PidGains,
    WaypointError,
    WaypointFollower,
    WaypointPlan,
    build_linmpc_problem,
    make_waypoints,
    point_clear,
    segment_visible,
)
from labyrinth_mpc.dynamics import SimConfig
from labyrinth_mpc.layout import CornerPath, Hole, LabyrinthLayout, Wall


def test_point_clear_and_visibility():
    lay = LabyrinthLayout(walls=(Wall((0.0, 0.0), 0.002, 0.03),), holes=(Hole((0.05, 0.05), 0.007),),
                          x_frame=0.1, y_frame=0.1, r_ball=0.006, corner_path=CornerPath(((-0.05, 0.0), (0.05, 0.0))))  # fmt: skip
    assert point_clear(lay, (-0.05, 0.0))
    assert not point_clear(lay, (0.007, 0.0))  # inside the inflated wall
    assert not point_clear(lay, (0.05, 0.04))  # within hole radius + ball radius
    assert not point_clear(lay, (0.2, 0.0))  # outside the frame
    assert not segment_visible(lay, (-0.05, 0.0), (0.05, 0.0))
    assert segment_visible(lay, (-0.05, 0.05), (0.03, 0.05))


def test_waypoints_bridge_blocked_segments():
    lay = LabyrinthLayout(walls=(Wall((0.0, -0.02), 0.002, 0.03),), holes=(), x_frame=0.1, y_frame=0.1, r_ball=0.006,
                          corner_path=CornerPath(((-0.05, 0.0), (0.05, 0.0))))  # fmt: skip
    plan = make_waypoints(lay.corner_path, lay)
    assert len(plan.waypoints) == 3
    for p, q in zip(plan.waypoints[:-1], plan.waypoints[1:]):
        assert segment_visible(lay, p, q)


def test_waypoints_fail_without_line_of_sight():
    lay = LabyrinthLayout(walls=(Wall((0.0, 0.0), 0.002, 0.1),), holes=(), x_frame=0.1, y_frame=0.1, r_ball=0.006,
                          corner_path=CornerPath(((-0.05, 0.0), (0.05, 0.0))))  # fmt: skip
    with pytest.raises(WaypointError):
        make_waypoints(lay.corner_path, lay)


def test_bundled_path_is_visible(brio):
    plan = make_waypoints(brio.corner_path, brio)
    np.testing.assert_array_equal(plan.waypoints, brio.corner_path.array)


def test_follower_switches_within_radius():
    f = WaypointFollower(WaypointPlan(np.array([[0.0, 0.0], [0.1, 0.0], [0.1, 0.1]]), switch_radius=0.007))
    assert f.index == 1
    f.update((0.05, 0.0))
    assert f.index == 1
    f.update((0.095, 0.0))
    assert f.index == 2
    f.update((0.1, 0.1))
    assert f.index == 2  # stays on the last waypoint


def test_pid_signs_and_clamps():
    pid = PidController(PidGains())
    u = pid.tick(np.zeros(6), (0.05, -0.05))
    # moving towards +x needs a negative alpha, so the motor turns negative
    assert u[0] < 0 and u[1] > 0
    u = PidController(PidGains()).tick(np.zeros(6), (5.0, 0.0))
    assert abs(u[0]) <= 5.0
    # the level angle is a feed-forward on the angle setpoint
    u = PidController(PidGains()).tick(np.zeros(6), (0.0, 0.0), d=(0.02, 0.0))
    assert u[0] == pytest.approx(25.0 * 0.02)


def test_pid_gain_validation():
    with pytest.raises(ValueError):
        PidGains(kp_pos=float("nan"))
    with pytest.raises(ValueError):
        PidGains(v_max=0.0)


def test_linmpc_problem_and_fallback():
    cfg = LinMpcConfig()
    nlp = build_linmpc_problem(cfg, np.zeros(6), (0.03, 0.0))
    assert nlp.N == 18 and len(nlp.holes) == 0 and len(nlp.walls) == 0
    ctl = LinearMpcController(cfg)
    u = ctl.tick(np.zeros(6), (0.03, 0.0))
    assert u[0] < 0 and not ctl.fallback
    bad = np.zeros(6)
    bad[0] = np.nan
    ctl.u_prev = np.array([1.0, 1.0])
    u = ctl.tick(bad, (0.03, 0.0))
    assert ctl.fallback
    np.testing.assert_allclose(u, [0.5, 0.5])


@pytest.mark.parametrize("controller", ["pid", "linmpc"])
def test_step_response_meets_tuning_targets(controller):
    r = harness.step_response(controller, step=(0.04, 0.0), sim_config=SimConfig())
    assert r.overshoot <= 0.002
    assert r.settle_time <= 2.0
    assert r.final_error <= 0.002
