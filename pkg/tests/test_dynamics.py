import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labyrinth_mpc.dynamics import (
    EVENT_FRAME,
    EVENT_HOLE,
    EVENT_NONE,
    EVENT_WALL,
    IA,
    IB,
    IVX,
    IVY,
    IX,
    IY,
    CapturedBallError,
    SimConfig,
    Simulator,
    TiltField,
    TruthState,
    build_linear_model,
    nonlinear_plate_accel,
    step_linear,
    step_truth,
)
from labyrinth_mpc.layout import CornerPath, Hole, LabyrinthLayout, Wall

PLATE = LabyrinthLayout(walls=(), holes=(), x_frame=1.0, y_frame=1.0, r_ball=0.006,
                        corner_path=CornerPath(((0.0, 0.0), (0.1, 0.0))))  # fmt: skip


def test_linear_model_entries():
    m = build_linear_model(0.03)
    c = 5.0 / 7.0 * 9.81 * 0.03  # 0.21021428...
    assert m.A[IX, IVX] == pytest.approx(0.03)
    assert m.A[IY, IVY] == pytest.approx(0.03)
    assert m.A[IVX, IA] == pytest.approx(-c)
    assert m.A[IVY, IB] == pytest.approx(-c)
    assert c == pytest.approx(0.2102142857142857)
    expected_B = np.zeros((6, 2))
    expected_B[IA, 0] = expected_B[IB, 1] = 0.03
    np.testing.assert_array_equal(m.B, expected_B)
    assert np.count_nonzero(m.A - np.eye(6)) == 4
    with pytest.raises(ValueError):
        m.A[0, 0] = 2.0
    with pytest.raises(ValueError):
        build_linear_model(0.0)


def test_disturbance_offset_holds_ball_at_rest():
    m = build_linear_model()
    d = np.array([0.01, -0.02])
    x = np.array([0.0, 0.0, 0.0, 0.0, *d])  # plate at the level angle
    np.testing.assert_allclose(step_linear(m, x, np.zeros(2), m.disturbance_offset(d)), x, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.05, 0.05), min_size=6, max_size=6), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_ideal_simulator_matches_linear_model(x, u):
    x = np.array(x)
    x[IX] *= 0.5
    x[IY] *= 0.5
    sim = Simulator(SimConfig.ideal(), PLATE, TruthState(x), seed=0)
    sim.step(u, 0.03)
    np.testing.assert_allclose(sim.truth.x, step_linear(build_linear_model(), x, u), atol=1e-14)


def test_constant_tilt_matches_offset_with_negated_level_angle():
    tilt = (0.004, -0.007)
    sim = Simulator(SimConfig.ideal(tilt_field=TiltField.constant(*tilt)), PLATE, TruthState.at((0, 0)), 0)
    sim.step((0.0, 0.0), 0.03)
    m = build_linear_model()
    ref = step_linear(m, TruthState.at((0, 0)).x, (0, 0), m.disturbance_offset(-np.array(tilt)))
    np.testing.assert_allclose(sim.truth.x, ref, atol=1e-15)


def test_nonlinear_plate_reduces_to_linear_at_rest():
    ax, ay = nonlinear_plate_accel((0.05, 0, -0.02, 0, 0.01, -0.02), 0.0, 0.0)
    assert ax == pytest.approx(-5 / 7 * 9.81 * math.sin(0.01))
    assert ay == pytest.approx(-5 / 7 * 9.81 * math.sin(-0.02))
    # centripetal term pushes outward when the plate rotates
    ax_rot, _ = nonlinear_plate_accel((0.05, 0, 0, 0, 0, 0), 2.0, 0.0)
    assert ax_rot == pytest.approx(5 / 7 * 0.05 * 4.0)


def test_tilt_field_sum_and_equality():
    a = TiltField.random(1, 0.01)
    b = TiltField.random(2, 0.003)
    s = a + b
    for p in ((0.0, 0.0), (0.05, -0.03), (-0.1, 0.07)):
        np.testing.assert_allclose(s(*p), np.add(a(*p), b(*p)), atol=1e-15)
    assert TiltField.random(1, 0.01) == a
    assert a != b
    g = s.grid(np.array([0.0, 0.05]), np.array([-0.03]))
    np.testing.assert_allclose(g[0, 1], s(0.05, -0.03), atol=1e-15)


def test_tilt_field_amplitude_scale():
    f = TiltField.random(7, 0.01)
    xs = np.linspace(-0.13, 0.13, 60)
    v = f.grid(xs, xs)
    rms = float(np.sqrt(np.mean(v**2)))
    assert 0.002 < rms < 0.02


def test_lag_and_dead_zone():
    cfg = SimConfig.ideal(lag_tau=0.05, substeps=10)
    sim = Simulator(cfg, PLATE, TruthState.at((0, 0)), 0)
    sim.step((1.0, 0.0), 0.03)
    assert 0.0 < sim.truth.x[IA] < 0.03  # lagged
    cfg = SimConfig.ideal(dead_zone=0.02)
    sim = Simulator(cfg, PLATE, TruthState.at((0, 0)), 0)
    sim.step((0.015, -0.015), 0.03)
    assert sim.truth.x[IA] == 0.0 and sim.truth.x[IB] == 0.0


def test_angle_limit_saturates():
    sim = Simulator(SimConfig.ideal(angle_limit=0.15), PLATE, TruthState.at((0, 0), angles=(0.14, 0)), 0)
    sim.step((5.0, 0.0), 0.03)
    assert sim.truth.x[IA] == pytest.approx(0.15)


def test_wall_contact_stops_penetration():
    lay = LabyrinthLayout(walls=(Wall((0.05, 0.0), 0.002, 0.05),), holes=(), x_frame=0.2, y_frame=0.2, r_ball=0.006,
                          corner_path=CornerPath(((0.0, 0.0), (0.0, 0.1))))  # fmt: skip
    cfg = SimConfig.ideal(substeps=10)
    sim = Simulator(cfg, lay, TruthState.at((0.0, 0.0), vel=(0.5, 0.0)), 0)
    events = [sim.step((0, 0), 0.03).event for _ in range(10)]
    assert EVENT_WALL in events
    assert sim.truth.x[IX] <= 0.05 - 0.002 - 0.006 + 1e-6
    assert sim.truth.x[IVX] <= 0.0


def test_frame_contact_keeps_ball_inside():
    cfg = SimConfig.ideal(substeps=5)
    lay = LabyrinthLayout(walls=(), holes=(), x_frame=0.05, y_frame=0.05, r_ball=0.006,
                          corner_path=CornerPath(((0.0, 0.0), (0.01, 0.0))))  # fmt: skip
    sim = Simulator(cfg, lay, TruthState.at((0.04, 0.0), vel=(0.0, -1.0)), 0)
    events = {sim.step((0, 0), 0.03).event for _ in range(5)}
    assert EVENT_FRAME in events
    assert abs(sim.truth.x[IY]) <= 0.05


def test_hole_capture_is_terminal():
    lay = LabyrinthLayout(walls=(), holes=(Hole((0.03, 0.0), 0.007),), x_frame=0.2, y_frame=0.2, r_ball=0.006,
                          corner_path=CornerPath(((0.0, 0.0), (0.1, 0.0))))  # fmt: skip
    sim = Simulator(SimConfig.ideal(substeps=10), lay, TruthState.at((0.0, 0.0), vel=(0.5, 0.0)), 0)
    out = None
    for _ in range(10):
        out = sim.step((0, 0), 0.03)
        if out.event == EVENT_HOLE:
            break
    assert out.event == EVENT_HOLE and out.hole_id == 0 and sim.captured == 0
    with pytest.raises(CapturedBallError):
        sim.step((0, 0), 0.03)


def test_same_seed_same_trajectory():
    cfg = SimConfig(tilt_field=TiltField.random(3))
    outs = []
    for _ in range(2):
        sim = Simulator(cfg, PLATE, TruthState.at((0.0, 0.0)), seed=11)
        for k in range(50):
            sim.step((math.sin(k / 5), math.cos(k / 7)), 1 / 55)
        outs.append((sim.truth.x.copy(), sim.measure()))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_stiction_holds_slow_ball():
    cfg = SimConfig.ideal(stiction_threshold=0.05, stiction_speed=1e-4)
    sim = Simulator(cfg, PLATE, TruthState.at((0.0, 0.0), angles=(0.003, 0.0)), 0)
    out = step_truth(cfg, PLATE, sim.truth, (0, 0), None, 0.03)
    assert out.event == EVENT_NONE
    assert out.state.x[IVX] == 0.0 and out.state.x[IVY] == 0.0
