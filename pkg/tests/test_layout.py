import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labyrinth_mpc.layout import (
    CornerPath,
    Hole,
    LabyrinthLayout,
    LayoutError,
    LayoutInvariantError,
    Wall,
    bundled_layout,
    check_invariants,
    dump_layout,
    hole_constraint_value,
    nearest_cost_obstacles,
    nearest_obstacles,
    parse_layout,
    superellipse_gradient,
    superellipse_value,
)

MINIMAL = """\
format: labyrinth-layout/1
frame: {x: 0.1, y: 0.08}
ball_radius: 0.006
walls:
  - {center: [0.0, 0.04], a: 0.05, b: 0.002}
holes:
  - {center: [0.03, -0.03], radius: 0.007, path_index: 1}
corner_path:
  - [-0.08, 0.0]
  - [0.08, 0.0]
"""


@pytest.mark.parametrize("name", ["brio_synthetic", "corridor"])
def test_bundled_layouts_are_valid(name):
    lay = bundled_layout(name)
    assert check_invariants(lay) == []
    assert lay.synthetic
    assert lay.corner_path.total_length > 0


def test_parse_minimal():
    lay = parse_layout(MINIMAL)
    assert lay.walls == (Wall((0.0, 0.04), 0.05, 0.002),)
    assert lay.holes == (Hole((0.03, -0.03), 0.007, 1),)
    assert lay.corner_path.start == (-0.08, 0.0)
    assert lay.corner_path.goal == (0.08, 0.0)


@pytest.mark.parametrize("name", ["brio_synthetic", "corridor"])
def test_dump_parse_round_trip(name):
    lay = bundled_layout(name)
    again = parse_layout(dump_layout(lay))
    assert again == lay


@pytest.mark.parametrize(
    "text, fragment",
    [
        (MINIMAL.replace("labyrinth-layout/1", "other/2"), "unsupported format"),
        (MINIMAL.replace("ball_radius: 0.006\n", ""), "ball_radius"),
        (MINIMAL.replace("a: 0.05", "a: wide"), "walls[0].a"),
        (MINIMAL + "colour: red\n", "colour"),
        ("", "empty"),
        ("format: [", "YAML"),
    ],
)
def test_parse_errors_name_the_problem(text, fragment):
    with pytest.raises(LayoutError, match=None) as exc:
        parse_layout(text)
    assert fragment in str(exc.value)


def test_invariant_violations_are_listed():
    bad = MINIMAL.replace("[0.08, 0.0]", "[0.08, 0.02]").replace("radius: 0.007", "radius: -0.001")
    with pytest.raises(LayoutInvariantError) as exc:
        parse_layout(bad)
    text = "\n".join(exc.value.violations)
    assert "radius must be positive" in text
    assert "exactly one coordinate" in text
    assert parse_layout(bad, validate=False).holes[0].radius == -0.001


def test_path_through_hole_is_rejected():
    bad = MINIMAL.replace("[0.03, -0.03]", "[0.0, 0.003]")
    with pytest.raises(LayoutInvariantError, match="holes"):
        parse_layout(bad)


def test_wall_endpoints_follow_long_axis():
    assert Wall((0.0, 0.0), 0.05, 0.002).endpoints == ((-0.05, 0.0), (0.05, 0.0))
    assert Wall((0.01, 0.0), 0.002, 0.03).endpoints == ((0.01, -0.03), (0.01, 0.03))


def test_corner_path_arc_length():
    p = CornerPath(((0.0, 0.0), (0.1, 0.0), (0.1, 0.05)))
    assert p.total_length == pytest.approx(0.15)
    np.testing.assert_allclose(p.point_at(0.12), [0.1, 0.02])
    np.testing.assert_allclose(p.point_at(-1.0), [0.0, 0.0])
    np.testing.assert_allclose(p.point_at(9.0), [0.1, 0.05])


def test_superellipse_is_one_on_inflated_axes():
    w = Wall((0.01, -0.02), 0.03, 0.004)
    r = 0.006
    for p in ((0.01 + 0.036, -0.02), (0.01 - 0.036, -0.02), (0.01, -0.02 + 0.01), (0.01, -0.02 - 0.01)):
        assert superellipse_value(p, w, r) == pytest.approx(1.0, abs=1e-12)
    assert superellipse_value(w.center, w, r) == 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-0.1, 0.1), st.floats(-0.1, 0.1),
    st.floats(0.001, 0.06), st.floats(0.001, 0.06),
)  # fmt: skip
def test_superellipse_gradient_matches_differences(px, py, a, b):
    w = Wall((0.0, 0.0), a, b)
    r, h = 0.006, 1e-7
    g = superellipse_gradient((px, py), w, r)
    fd = [
        (superellipse_value((px + h, py), w, r) - superellipse_value((px - h, py), w, r)) / (2 * h),
        (superellipse_value((px, py + h), w, r) - superellipse_value((px, py - h), w, r)) / (2 * h),
    ]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.max(np.abs(g))))


def test_hole_value_is_squared_distance():
    assert hole_constraint_value((0.03, 0.04), Hole((0.0, 0.0), 0.007)) == pytest.approx(0.0025)


def test_nearest_obstacles_sorted_and_padded():
    lay = parse_layout(MINIMAL)
    holes, walls = nearest_obstacles((0.0, 0.0), lay, 5, 10)
    assert len(holes) == 5 and all(h == lay.holes[0] for h in holes)
    assert len(walls) == 10
    brio = bundled_layout()
    p = np.array(brio.corner_path.start)
    holes, _ = nearest_obstacles(p, brio, 5, 10)
    dist = [np.hypot(*(np.array(h.center) - p)) for h in holes]
    assert dist == sorted(dist)
    others = [np.hypot(*(np.array(h.center) - p)) for h in brio.holes if h not in holes]
    assert max(dist) <= min(others)


def test_nearest_obstacles_empty_classes():
    lay = LabyrinthLayout(walls=(), holes=(), x_frame=0.1, y_frame=0.1, r_ball=0.006,
                          corner_path=CornerPath(((0.0, 0.0), (0.05, 0.0))))  # fmt: skip
    assert nearest_obstacles((0, 0), lay) == ([], [])
    assert nearest_cost_obstacles((0, 0), lay).shape == (0, 2)


def test_cost_points_are_hole_centers_and_wall_ends():
    lay = parse_layout(MINIMAL)
    pts = {tuple(np.round(p, 9)) for p in lay.cost_points}
    assert pts == {(0.03, -0.03), (-0.05, 0.04), (0.05, 0.04)}
    assert nearest_cost_obstacles((0.0, 0.0), lay, 2).shape == (2, 2)
