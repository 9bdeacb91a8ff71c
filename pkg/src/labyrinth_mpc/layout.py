"""Labyrinth geometry: walls, holes, frame, corner path, obstacle primitives.

Walls are axis-aligned rectangles described by their center and half-extents
``a`` (along x) and ``b`` (along y).  The obstacle constraints used by the
planners treat the ball center as a point and inflate every obstacle by the
ball radius.

Layout file format (YAML, ``format: labyrinth-layout/1``)::

    format: labyrinth-layout/1
    name: corridor               # free text
    synthetic: true              # geometry not measured from a real board
    frame: {x: 0.13, y: 0.10}    # half-extents of the region the ball center may occupy [m]
    ball_radius: 0.006           # [m]
    walls:                       # a: half-extent along x, b: half-extent along y [m]
      - {center: [0.0, 0.035], a: 0.05, b: 0.0025}
    holes:                       # path_index: ordinal along the route, omit for off-route holes
      - {center: [0.02, -0.02], radius: 0.007, path_index: 1}
    corner_path:                 # start first, goal last; consecutive corners share x or y
      - [-0.10, 0.0]
      - [0.10, 0.0]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

FORMAT_TAG = "labyrinth-layout/1"
SUPERELLIPSE_EXPONENT = 4

_SCHEMA_HEADER = """\
# Labyrinth layout, format labyrinth-layout/1.
#   frame:        half-extents of the region the ball center may occupy [m]
#   ball_radius:  [m]
#   walls:        axis-aligned rectangles; a = half-extent along x, b = half-extent along y [m]
#   holes:        center [m], radius [m], optional path_index (ordinal along the route)
#   corner_path:  ordered corners, start first and goal last; consecutive corners share x or y
"""


class LayoutError(ValueError):
    """Layout file could not be parsed."""


class LayoutInvariantError(LayoutError):
    """Layout parsed but violates one or more geometric invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("layout invariants violated:\n  - " + "\n  - ".join(self.violations))


@dataclass(frozen=True)
class Wall:
    center: tuple[float, float]
    a: float
    b: float

    @property
    def endpoints(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """End points of the wall's long axis."""
        cx, cy = self.center
        if self.a >= self.b:
            return (cx - self.a, cy), (cx + self.a, cy)
        return (cx, cy - self.b), (cx, cy + self.b)


@dataclass(frozen=True)
class Hole:
    center: tuple[float, float]
    radius: float
    path_index: Optional[int] = None


@dataclass(frozen=True)
class CornerPath:
    corners: tuple[tuple[float, float], ...]

    @property
    def start(self) -> tuple[float, float]:
        return self.corners[0]

    @property
    def goal(self) -> tuple[float, float]:
        return self.corners[-1]

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=float)

    @cached_property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.array, axis=0), axis=1)

    @cached_property
    def cumulative_length(self) -> np.ndarray:
        """Arc length at each corner, starting from 0."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)])

    @property
    def total_length(self) -> float:
        return float(self.cumulative_length[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Point on the polyline at arc length ``s`` (clamped)."""
        cum = self.cumulative_length
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(i, len(self.corners) - 2)
        seg = self.segment_lengths[i]
        t = 0.0 if seg == 0 else (s - cum[i]) / seg
        return self.array[i] + t * (self.array[i + 1] - self.array[i])


@dataclass(frozen=True)
class LabyrinthLayout:
    walls: tuple[Wall, ...]
    holes: tuple[Hole, ...]
    x_frame: float
    y_frame: float
    corner_path: CornerPath
    r_ball: float
    name: str = ""
    synthetic: bool = True

    @cached_property
    def hole_array(self) -> np.ndarray:
        """``(n, 3)`` array of ``x, y, r``."""
        return np.array([[*h.center, h.radius] for h in self.holes], dtype=float).reshape(-1, 3)

    @cached_property
    def wall_array(self) -> np.ndarray:
        """``(n, 4)`` array of ``x, y, a, b`` (not inflated)."""
        return np.array([[*w.center, w.a, w.b] for w in self.walls], dtype=float).reshape(-1, 4)

    @cached_property
    def cost_points(self) -> np.ndarray:
        """Hole centers followed by wall end points, ``(n_holes + 2 n_walls, 2)``."""
        pts = [h.center for h in self.holes]
        for w in self.walls:
            pts.extend(w.endpoints)
        return np.array(pts, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------
# constraint primitives


def superellipse_value(ball_pos, wall: Wall, r_ball: float) -> float:
    """Inflated-wall superellipse expression; ``>= 1`` outside the wall."""
    dx = (ball_pos[0] - wall.center[0]) / (wall.a + r_ball)
    dy = (ball_pos[1] - wall.center[1]) / (wall.b + r_ball)
    return float(dx**4 + dy**4)


def superellipse_gradient(ball_pos, wall: Wall, r_ball: float) -> np.ndarray:
    ax = wall.a + r_ball
    by = wall.b + r_ball
    dx = ball_pos[0] - wall.center[0]
    dy = ball_pos[1] - wall.center[1]
    return np.array([4.0 * dx**3 / ax**4, 4.0 * dy**3 / by**4])


def hole_constraint_value(ball_pos, hole: Hole) -> float:
    """Squared distance from the ball center to the hole center."""
    dx = ball_pos[0] - hole.center[0]
    dy = ball_pos[1] - hole.center[1]
    return float(dx * dx + dy * dy)


def _pad(idx: np.ndarray, n: int) -> np.ndarray:
    if len(idx) == 0 or len(idx) >= n:
        return idx[:n]
    return np.concatenate([idx, np.full(n - len(idx), idx[-1])])


def _nearest_indices(points: np.ndarray, ball_pos, n: int) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    d2 = np.sum((points - np.asarray(ball_pos, dtype=float)[:2]) ** 2, axis=1)
    # stable sort keeps declaration order on ties
    return _pad(np.argsort(d2, kind="stable"), n)


def nearest_obstacles(ball_pos, layout: LabyrinthLayout, n_holes: int = 5, n_walls: int = 10):
    """Closest holes and walls by center distance, padded to fixed length.

    Padding repeats the farthest selected obstacle.  An obstacle class that is
    absent from the layout yields an empty list.
    """
    hi = _nearest_indices(layout.hole_array[:, :2], ball_pos, n_holes)
    wi = _nearest_indices(layout.wall_array[:, :2], ball_pos, n_walls)
    return [layout.holes[i] for i in hi], [layout.walls[i] for i in wi]


def nearest_cost_obstacles(ball_pos, layout: LabyrinthLayout, j: int = 15) -> np.ndarray:
    """The ``j`` nearest obstacle points (hole centers and wall end points)."""
    pts = layout.cost_points
    return pts[_nearest_indices(pts, ball_pos, j)]


# --------------------------------------------------------------------------
# validation


def _segment_samples(p: np.ndarray, q: np.ndarray, spacing: float = 5e-4) -> np.ndarray:
    n = max(2, int(math.ceil(np.linalg.norm(q - p) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return p + t * (q - p)


def check_invariants(layout: LabyrinthLayout) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    out = []
    if not layout.r_ball > 0:
        out.append(f"ball_radius must be positive (got {layout.r_ball})")
    if not (layout.x_frame > 0 and layout.y_frame > 0):
        out.append("frame half-extents must be positive")

    def in_frame(p):
        return abs(p[0]) <= layout.x_frame + 1e-12 and abs(p[1]) <= layout.y_frame + 1e-12

    for i, w in enumerate(layout.walls):
        if not (w.a > 0 and w.b > 0):
            out.append(f"walls[{i}]: half-extents must be positive (a={w.a}, b={w.b})")
        if not in_frame(w.center):
            out.append(f"walls[{i}]: center {w.center} outside frame")
    seen = {}
    for i, h in enumerate(layout.holes):
        if not h.radius > 0:
            out.append(f"holes[{i}]: radius must be positive (got {h.radius})")
        if not in_frame(h.center):
            out.append(f"holes[{i}]: center {h.center} outside frame")
        if h.path_index is not None:
            if h.path_index in seen:
                out.append(f"holes[{i}]: path_index {h.path_index} duplicates holes[{seen[h.path_index]}]")
            seen[h.path_index] = i

    corners = layout.corner_path.corners
    if len(corners) < 2:
        out.append("corner_path needs at least 2 corners")
    for i, c in enumerate(corners):
        if not in_frame(c):
            out.append(f"corner_path[{i}]: {c} outside frame")
    for i in range(len(corners) - 1):
        p, q = corners[i], corners[i + 1]
        same = (p[0] == q[0]) + (p[1] == q[1])
        if same != 1:
            out.append(f"corner_path[{i}]->[{i + 1}]: consecutive corners must differ in exactly one coordinate")

    if out or len(corners) < 2:
        return out
    arr = layout.corner_path.array
    for i in range(len(arr) - 1):
        pts = _segment_samples(arr[i], arr[i + 1])
        for k, h in enumerate(layout.holes):
            d = np.min(np.hypot(pts[:, 0] - h.center[0], pts[:, 1] - h.center[1]))
            if d < h.radius + layout.r_ball - 1e-12:
                out.append(f"corner_path segment {i} passes within {d:.4f} m of holes[{k}] (needs {h.radius + layout.r_ball:.4f})")
        for k, w in enumerate(layout.walls):
            v = ((pts[:, 0] - w.center[0]) / (w.a + layout.r_ball)) ** 4 + (
                (pts[:, 1] - w.center[1]) / (w.b + layout.r_ball)
            ) ** 4
            if np.min(v) < 1.0:
                out.append(f"corner_path segment {i} enters inflated walls[{k}]")
    return out


# --------------------------------------------------------------------------
# file I/O


def _where(node) -> str:
    return f"line {node.start_mark.line + 1}"


def _float(node, what: str) -> float:
    if not isinstance(node, yaml.ScalarNode):
        raise LayoutError(f"{_where(node)}: {what} must be a number")
    try:
        return float(node.value)
    except ValueError:
        raise LayoutError(f"{_where(node)}: {what} must be a number (got {node.value!r})") from None


def _pair(node, what: str) -> tuple[float, float]:
    if not isinstance(node, yaml.SequenceNode) or len(node.value) != 2:
        raise LayoutError(f"{_where(node)}: {what} must be a 2-element list [x, y]")
    return (_float(node.value[0], f"{what}[0]"), _float(node.value[1], f"{what}[1]"))


def _mapping(node, what: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise LayoutError(f"{_where(node)}: {what} must be a mapping")
    out = {}
    for k, v in node.value:
        key = k.value
        if key not in required and key not in optional:
            raise LayoutError(f"{_where(k)}: unknown field {what}.{key}")
        out[key] = v
    for key in required:
        if key not in out:
            raise LayoutError(f"{_where(node)}: missing field {what}.{key}")
    return out


def _seq(node, what: str) -> list:
    if node is None:
        return []
    if isinstance(node, yaml.ScalarNode) and node.value in ("", "null", "~"):
        return []
    if not isinstance(node, yaml.SequenceNode):
        raise LayoutError(f"{_where(node)}: {what} must be a list")
    return node.value


def parse_layout(text: str, validate: bool = True) -> LabyrinthLayout:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise LayoutError(f"YAML syntax error: {exc}") from None
    if root is None:
        raise LayoutError("empty layout file")
    top = _mapping(
        root,
        "layout",
        required=("format", "frame", "ball_radius", "corner_path"),
        optional=("name", "synthetic", "walls", "holes"),
    )
    if top["format"].value != FORMAT_TAG:
        raise LayoutError(f"{_where(top['format'])}: unsupported format {top['format'].value!r}, expected {FORMAT_TAG!r}")
    frame = _mapping(top["frame"], "frame", required=("x", "y"))
    walls = []
    for i, wn in enumerate(_seq(top.get("walls"), "walls")):
        m = _mapping(wn, f"walls[{i}]", required=("center", "a", "b"))
        walls.append(
            Wall(_pair(m["center"], f"walls[{i}].center"), _float(m["a"], f"walls[{i}].a"), _float(m["b"], f"walls[{i}].b"))
        )
    holes = []
    for i, hn in enumerate(_seq(top.get("holes"), "holes")):
        m = _mapping(hn, f"holes[{i}]", required=("center", "radius"), optional=("path_index",))
        pidx = None
        if "path_index" in m and m["path_index"].value not in ("null", "~", ""):
            try:
                pidx = int(m["path_index"].value)
            except ValueError:
                raise LayoutError(f"{_where(m['path_index'])}: holes[{i}].path_index must be an integer") from None
        holes.append(Hole(_pair(m["center"], f"holes[{i}].center"), _float(m["radius"], f"holes[{i}].radius"), pidx))
    corners = tuple(_pair(c, f"corner_path[{i}]") for i, c in enumerate(_seq(top["corner_path"], "corner_path")))
    synthetic = True
    if "synthetic" in top:
        synthetic = top["synthetic"].value.lower() in ("true", "yes", "1")
    layout = LabyrinthLayout(
        walls=tuple(walls),
        holes=tuple(holes),
        x_frame=_float(frame["x"], "frame.x"),
        y_frame=_float(frame["y"], "frame.y"),
        corner_path=CornerPath(corners),
        r_ball=_float(top["ball_radius"], "ball_radius"),
        name=top["name"].value if "name" in top else "",
        synthetic=synthetic,
    )
    if validate:
        violations = check_invariants(layout)
        if violations:
            raise LayoutInvariantError(violations)
    return layout


def load_layout(path, validate: bool = True) -> LabyrinthLayout:
    return parse_layout(Path(path).read_text(), validate=validate)


def dump_layout(layout: LabyrinthLayout) -> str:
    doc = {
        "format": FORMAT_TAG,
        "name": layout.name,
        "synthetic": layout.synthetic,
        "frame": {"x": layout.x_frame, "y": layout.y_frame},
        "ball_radius": layout.r_ball,
        "walls": [{"center": list(w.center), "a": w.a, "b": w.b} for w in layout.walls],
        "holes": [
            {"center": list(h.center), "radius": h.radius, **({"path_index": h.path_index} if h.path_index is not None else {})}
            for h in layout.holes
        ],
        "corner_path": [list(c) for c in layout.corner_path.corners],
    }
    return _SCHEMA_HEADER + yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def save_layout(layout: LabyrinthLayout, path) -> None:
    Path(path).write_text(dump_layout(layout))


def bundled_layout_path(name: str = "brio_synthetic") -> Path:
    return Path(__file__).parent / "data" / f"{name}.yaml"


def bundled_layout(name: str = "brio_synthetic") -> LabyrinthLayout:
    return load_layout(bundled_layout_path(name))
