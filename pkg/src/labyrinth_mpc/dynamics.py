"""Ball-plate dynamics: the discrete linear control model and a ground-truth simulator.

State vector layout is ``[x, vx, y, vy, alpha, beta]`` and the input is the
pair of motor velocities ``[omega1, omega2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .layout import LabyrinthLayout

G = 9.81
TS = 0.030

IX, IVX, IY, IVY, IA, IB = range(6)
POS = (IX, IY)
VEL = (IVX, IVY)
ANG = (IA, IB)
NX, NU = 6, 2

# default limits; the hardware values are unpublished
ALPHA_MAX = 0.1
BETA_MAX = 0.1
OMEGA_MAX = 5.0


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    Ts: float
    k1: float
    k2: float
    g: float

    def __post_init__(self):
        self.A.setflags(write=False)
        self.B.setflags(write=False)

    @property
    def accel_gain(self) -> float:
        """Velocity change per step per radian of tilt, ``(5/7) g Ts``."""
        return 5.0 / 7.0 * self.g * self.Ts

    def disturbance_offset(self, d) -> np.ndarray:
        """Per-step state offset for a disturbance angle ``d`` (rad).

        The ball accelerates as if the plate angles were ``(alpha - d[0],
        beta - d[1])``, so ``d`` is the plate attitude at which the ball would
        stay at rest; a surface tilt ``t`` is compensated by ``d = -t``.
        """
        off = np.zeros(NX)
        off[IVX] = self.accel_gain * d[0]
        off[IVY] = self.accel_gain * d[1]
        return off


def build_linear_model(Ts: float = TS, k1: float = 1.0, k2: float = 1.0, g: float = G) -> LinearModel:
    if not Ts > 0:
        raise ValueError(f"Ts must be positive, got {Ts}")
    c = 5.0 / 7.0 * g * Ts
    A = np.eye(NX)
    A[IX, IVX] = Ts
    A[IY, IVY] = Ts
    A[IVX, IA] = -c
    A[IVY, IB] = -c
    B = np.zeros((NX, NU))
    B[IA, 0] = k1 * Ts
    B[IB, 1] = k2 * Ts
    return LinearModel(A, B, Ts, k1, k2, g)


def step_linear(model: LinearModel, state, u, offset=None) -> np.ndarray:
    x = model.A @ np.asarray(state, dtype=float) + model.B @ np.asarray(u, dtype=float)
    if offset is not None:
        x = x + offset
    return x


def nonlinear_plate_accel(state, alpha_dot: float, beta_dot: float, g: float = G) -> tuple[float, float]:
    """Accelerations of a solid ball on a moving plate, without obstacles or friction."""
    x, y = state[IX], state[IY]
    a, b = state[IA], state[IB]
    ax = 5.0 / 7.0 * (x * alpha_dot**2 + y * alpha_dot * beta_dot - g * math.sin(a))
    ay = 5.0 / 7.0 * (y * beta_dot**2 + x * alpha_dot * beta_dot - g * math.sin(b))
    return ax, ay


# --------------------------------------------------------------------------
# surface tilt field


class TiltField:
    """Smooth effective-angle disturbance over the plate, ``(x, y) -> (tilt_x, tilt_y)``.

    Built from a handful of low-frequency sinusoids plus a constant offset so
    that it stands in for base-plate unevenness.
    """

    def __init__(self, offset=(0.0, 0.0), modes: Optional[np.ndarray] = None):
        self.offset = np.asarray(offset, dtype=float)
        # rows: kx, ky, phase, amp_x, amp_y
        self.modes = np.zeros((0, 5)) if modes is None else np.asarray(modes, dtype=float)

    @classmethod
    def zero(cls) -> "TiltField":
        return cls()

    @classmethod
    def constant(cls, tx: float, ty: float) -> "TiltField":
        return cls(offset=(tx, ty))

    @classmethod
    def random(cls, seed: int, amplitude: float = 0.006, n_modes: int = 4, min_wavelength: float = 0.12) -> "TiltField":
        rng = np.random.default_rng(seed)
        kmax = 2 * math.pi / min_wavelength
        modes = np.empty((n_modes, 5))
        for i in range(n_modes):
            k = rng.uniform(0.3, 1.0) * kmax
            th = rng.uniform(0, 2 * math.pi)
            modes[i] = (k * math.cos(th), k * math.sin(th), rng.uniform(0, 2 * math.pi), *rng.normal(0, 1, 2))
        scale = amplitude / math.sqrt(n_modes)
        modes[:, 3:] *= scale
        offset = rng.normal(0, 0.5 * amplitude, 2)
        return cls(offset=offset, modes=modes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TiltField):
            return NotImplemented
        return np.array_equal(self.offset, other.offset) and np.array_equal(self.modes, other.modes)

    __hash__ = None

    def __add__(self, other: "TiltField") -> "TiltField":
        return TiltField(self.offset + other.offset, np.vstack([self.modes, other.modes]))

    def __call__(self, x: float, y: float) -> tuple[float, float]:
        tx, ty = self.offset
        for kx, ky, ph, ax, ay in self.modes:
            s = math.sin(kx * x + ky * y + ph)
            tx += ax * s
            ty += ay * s
        return float(tx), float(ty)

    def grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Field sampled on a grid, shape ``(len(ys), len(xs), 2)``."""
        X, Y = np.meshgrid(xs, ys)
        out = np.empty(X.shape + (2,))
        out[..., 0] = self.offset[0]
        out[..., 1] = self.offset[1]
        for kx, ky, ph, ax, ay in self.modes:
            s = np.sin(kx * X + ky * Y + ph)
            out[..., 0] += ax * s
            out[..., 1] += ay * s
        return out


# --------------------------------------------------------------------------
# ground truth simulator


@dataclass(frozen=True)
class SimConfig:
    m_ball: float = 0.0086  # cancels out of the plate equations; documentation only
    restitution: float = 0.3
    stiction_threshold: float = 0.02  # m/s^2
    stiction_speed: float = 1e-4  # m/s
    lag_tau: float = 0.05  # s
    dead_zone: float = 0.02  # rad/s
    slip_noise_std: float = 0.01  # rad/s
    tilt_field: TiltField = field(default_factory=TiltField.zero)
    k1_true: float = 1.0
    k2_true: float = 1.0
    nonlinear_plate: bool = True
    angle_limit: float = 0.15  # hardware tilt limit, rad
    Ts: float = TS
    substeps: int = 10
    g: float = G
    pos_noise_std: float = 0.0005  # measurement noise
    angle_noise_std: float = 0.002

    def __post_init__(self):
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError(f"restitution must lie in [0, 1], got {self.restitution}")
        if self.lag_tau < 0:
            raise ValueError(f"lag_tau must be non-negative, got {self.lag_tau}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @classmethod
    def ideal(cls, **kw) -> "SimConfig":
        """No lag, noise, stiction or tilt; linear plate; one Euler substep per call."""
        base = dict(
            restitution=0.3,
            stiction_threshold=0.0,
            lag_tau=0.0,
            dead_zone=0.0,
            slip_noise_std=0.0,
            tilt_field=TiltField.zero(),
            nonlinear_plate=False,
            angle_limit=math.inf,
            substeps=1,
            pos_noise_std=0.0,
            angle_noise_std=0.0,
        )
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class TruthState:
    x: np.ndarray  # plant state, 6-vector
    omega_eff: np.ndarray = field(default_factory=lambda: np.zeros(NU))
    captured: Optional[int] = None

    @classmethod
    def at(cls, pos, vel=(0.0, 0.0), angles=(0.0, 0.0)) -> "TruthState":
        return cls(np.array([pos[0], vel[0], pos[1], vel[1], angles[0], angles[1]], dtype=float))


EVENT_NONE = "none"
EVENT_WALL = "wall_contact"
EVENT_FRAME = "frame_contact"
EVENT_HOLE = "hole_capture"


@dataclass(frozen=True)
class SimOutcome:
    state: TruthState
    event: str = EVENT_NONE
    hole_id: Optional[int] = None


class CapturedBallError(RuntimeError):
    """Raised when stepping a ball that already fell into a hole."""


def _ray_box(px, py, dx, dy, xmin, xmax, ymin, ymax):
    """Entry fraction of segment p + t d into an axis-aligned box, or None."""
    t0, t1 = 0.0, 1.0
    for p, d, lo, hi in ((px, dx, xmin, xmax), (py, dy, ymin, ymax)):
        if abs(d) < 1e-300:
            if p < lo or p > hi:
                return None
        else:
            ta, tb = (lo - p) / d, (hi - p) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return None
    return t0


def _ray_circle(px, py, dx, dy, cx, cy, r):
    fx, fy = px - cx, py - cy
    a = dx * dx + dy * dy
    if a == 0:
        return None
    b = 2 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - r * r
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    t = (-b - math.sqrt(disc)) / (2 * a)
    return t if 0.0 <= t <= 1.0 else None


def _rounded_box_hit(px, py, dx, dy, cx, cy, a, b, r):
    """First contact of a point moving p -> p + d with a box (a, b) inflated by r.

    Returns ``(t, nx, ny)`` or None.  A start point already inside the shape
    reports ``t = 0`` with the outward normal at the nearest surface point.
    """
    if abs(px - cx) > a + r + abs(dx) or abs(py - cy) > b + r + abs(dy):
        return None
    qx = min(max(px, cx - a), cx + a)
    qy = min(max(py, cy - b), cy + b)
    ex, ey = px - qx, py - qy
    dist = math.hypot(ex, ey)
    if dist < r:
        if dist > 1e-12:
            return 0.0, ex / dist, ey / dist
        # inside the core rectangle: push out along the axis of least penetration
        pen = [(cx + a - px, 1.0, 0.0), (px - (cx - a), -1.0, 0.0), (cy + b - py, 0.0, 1.0), (py - (cy - b), 0.0, -1.0)]
        _, nx, ny = min(pen)
        return 0.0, nx, ny
    best = None
    for t in (
        _ray_box(px, py, dx, dy, cx - a - r, cx + a + r, cy - b, cy + b),
        _ray_box(px, py, dx, dy, cx - a, cx + a, cy - b - r, cy + b + r),
        *(
            _ray_circle(px, py, dx, dy, cx + sx * a, cy + sy * b, r)
            for sx in (-1.0, 1.0)
            for sy in (-1.0, 1.0)
        ),
    ):
        if t is not None and (best is None or t < best):
            best = t
    if best is None:
        return None
    hx, hy = px + best * dx, py + best * dy
    qx = min(max(hx, cx - a), cx + a)
    qy = min(max(hy, cy - b), cy + b)
    nx, ny = hx - qx, hy - qy
    n = math.hypot(nx, ny)
    if n < 1e-15:
        nx, ny = -dx, -dy
        n = math.hypot(nx, ny)
    return best, nx / n, ny / n


def _frame_hit(px, py, dx, dy, xf, yf):
    best = None
    for p, d, lim, nvec in ((px, dx, xf, (-1.0, 0.0)), (py, dy, yf, (0.0, -1.0))):
        for sgn in (1.0, -1.0):
            bound = sgn * lim
            if sgn * (p + d) > lim and abs(d) > 0:
                t = (bound - p) / d
                t = min(max(t, 0.0), 1.0)
                n = (nvec[0] * sgn, nvec[1] * sgn)
                if best is None or t < best[0]:
                    best = (t, *n)
    return best


def _move_with_collisions(layout: LabyrinthLayout, pos, vel, h, restitution):
    """Advance position by ``h * vel`` with swept collisions; returns pos, vel, event."""
    px, py = pos
    vx, vy = vel
    r = layout.r_ball
    event = EVENT_NONE
    remaining = 1.0
    for _ in range(4):
        dx, dy = vx * h * remaining, vy * h * remaining
        hit = None
        kind = None
        for w in layout.walls:
            res = _rounded_box_hit(px, py, dx, dy, w.center[0], w.center[1], w.a, w.b, r)
            if res is not None and (hit is None or res[0] < hit[0]):
                hit, kind = res, EVENT_WALL
        res = _frame_hit(px, py, dx, dy, layout.x_frame, layout.y_frame)
        if res is not None and (hit is None or res[0] < hit[0]):
            hit, kind = res, EVENT_FRAME
        if hit is None:
            px, py = px + dx, py + dy
            break
        t, nx, ny = hit
        px, py = px + t * dx + 1e-9 * nx, py + t * dy + 1e-9 * ny
        vn = vx * nx + vy * ny
        if vn < 0:
            vx -= (1.0 + restitution) * vn * nx
            vy -= (1.0 + restitution) * vn * ny
        if event == EVENT_NONE or kind == EVENT_WALL:
            event = kind
        remaining *= 1.0 - t
        if remaining <= 1e-12:
            break
    px = min(max(px, -layout.x_frame), layout.x_frame)
    py = min(max(py, -layout.y_frame), layout.y_frame)
    return (px, py), (vx, vy), event


def step_truth(
    cfg: SimConfig,
    layout: LabyrinthLayout,
    truth: TruthState,
    u,
    rng: Optional[np.random.Generator] = None,
    dt: Optional[float] = None,
) -> SimOutcome:
    """Advance the ground truth by ``dt`` (default ``cfg.Ts``) under a held motor command."""
    if truth.captured is not None:
        raise CapturedBallError(f"ball already captured by hole {truth.captured}")
    dt = cfg.Ts if dt is None else dt
    h_nominal = cfg.Ts / cfg.substeps
    n = max(1, math.ceil(dt / h_nominal - 1e-9))
    h = dt / n

    x, vx, y, vy, al, be = (float(v) for v in truth.x)
    w_eff = np.array(truth.omega_eff, dtype=float)
    u = np.asarray(u, dtype=float)
    w_cmd = np.sign(u) * np.maximum(np.abs(u) - cfg.dead_zone, 0.0)
    noise = rng.normal(0.0, cfg.slip_noise_std, 2) if (rng is not None and cfg.slip_noise_std > 0) else np.zeros(2)
    lag = 1.0 if cfg.lag_tau == 0 else 1.0 - math.exp(-h / cfg.lag_tau)
    g = cfg.g
    event = EVENT_NONE
    tilt = cfg.tilt_field

    for _ in range(n):
        w_eff = w_eff + (w_cmd - w_eff) * lag
        rate = (w_eff + noise) * (cfg.k1_true, cfg.k2_true)
        al_new = min(max(al + h * rate[0], -cfg.angle_limit), cfg.angle_limit)
        be_new = min(max(be + h * rate[1], -cfg.angle_limit), cfg.angle_limit)
        ad, bd = (al_new - al) / h, (be_new - be) / h

        tx, ty = tilt(x, y)
        ea, eb = al + tx, be + ty
        if cfg.nonlinear_plate:
            ax, ay = nonlinear_plate_accel((x, vx, y, vy, ea, eb), ad, bd, g)
        else:
            ax, ay = -5.0 / 7.0 * g * ea, -5.0 / 7.0 * g * eb

        if cfg.stiction_threshold > 0 and math.hypot(vx, vy) < cfg.stiction_speed and math.hypot(ax, ay) < cfg.stiction_threshold:
            vx = vy = 0.0
            ax = ay = 0.0

        (x, y), (vx_c, vy_c), ev = _move_with_collisions(layout, (x, y), (vx, vy), h, cfg.restitution)
        if ev != EVENT_NONE:
            # contact: keep post-impact velocity, skip this substep's acceleration along the normal
            vx, vy = vx_c + h * ax, vy_c + h * ay
            (vx, vy) = _clip_into_contact(layout, x, y, vx, vy)
            if event != EVENT_WALL:
                event = ev
        else:
            vx, vy = vx + h * ax, vy + h * ay
        al, be = al_new, be_new

        for i, (hx, hy, hr) in enumerate(layout.hole_array):
            if (x - hx) ** 2 + (y - hy) ** 2 < hr * hr:
                st = TruthState(np.array([x, 0.0, y, 0.0, al, be]), w_eff, captured=i)
                return SimOutcome(st, EVENT_HOLE, i)

    return SimOutcome(TruthState(np.array([x, vx, y, vy, al, be]), w_eff), event)


def _clip_into_contact(layout, x, y, vx, vy):
    """Remove any velocity component pointing into an obstacle the ball is touching."""
    r = layout.r_ball
    for w in layout.walls:
        cx, cy = w.center
        qx = min(max(x, cx - w.a), cx + w.a)
        qy = min(max(y, cy - w.b), cy + w.b)
        ex, ey = x - qx, y - qy
        d = math.hypot(ex, ey)
        if d < r + 1e-6 and d > 1e-12:
            nx, ny = ex / d, ey / d
            vn = vx * nx + vy * ny
            if vn < 0:
                vx, vy = vx - vn * nx, vy - vn * ny
    if abs(x) >= layout.x_frame - 1e-9 and vx * x > 0:
        vx = 0.0
    if abs(y) >= layout.y_frame - 1e-9 and vy * y > 0:
        vy = 0.0
    return vx, vy


def measure(cfg: SimConfig, truth: TruthState, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Noisy measurement ``(x, y, alpha, beta)`` of the plant."""
    z = truth.x[[IX, IY, IA, IB]].copy()
    if rng is not None:
        z[:2] += rng.normal(0.0, cfg.pos_noise_std, 2) if cfg.pos_noise_std > 0 else 0.0
        z[2:] += rng.normal(0.0, cfg.angle_noise_std, 2) if cfg.angle_noise_std > 0 else 0.0
    return z


class Simulator:
    """Stateful convenience wrapper around :func:`step_truth`."""

    def __init__(self, cfg: SimConfig, layout: LabyrinthLayout, truth: TruthState, seed: int = 0):
        self.cfg = cfg
        self.layout = layout
        self.truth = truth
        self.rng = np.random.default_rng(seed)
        self.t = 0.0

    @property
    def captured(self) -> Optional[int]:
        return self.truth.captured

    def step(self, u, dt: Optional[float] = None) -> SimOutcome:
        out = step_truth(self.cfg, self.layout, self.truth, u, self.rng, dt)
        self.truth = out.state
        self.t += self.cfg.Ts if dt is None else dt
        return out

    def measure(self) -> np.ndarray:
        return measure(self.cfg, self.truth, self.rng)
