"""Comparison controllers: cascaded PID and linear waypoint MPC.

Both follow a list of waypoints along the corner path and switch to the next
waypoint once the ball is within the switch radius of the current one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ALPHA_MAX, BETA_MAX, IA, IB, IVX, IVY, IX, IY, NX, OMEGA_MAX, TS, build_linear_model
from .layout import CornerPath, LabyrinthLayout
from .solver import HorizonNlp, SolverOptions, solve
from .solver.nlp import SOLVED


class WaypointError(ValueError):
    pass


# --------------------------------------------------------------------------
# waypoints


def point_clear(layout: LabyrinthLayout, p, margin: float = 0.0) -> bool:
    """Ball center at ``p`` is outside every inflated wall and hole, and inside the frame."""
    x, y = float(p[0]), float(p[1])
    if abs(x) > layout.x_frame + 1e-12 or abs(y) > layout.y_frame + 1e-12:
        return False
    r = layout.r_ball + margin
    for h in layout.holes:
        if math.hypot(x - h.center[0], y - h.center[1]) < h.radius + r:
            return False
    for w in layout.walls:
        ex = (x - w.center[0]) / (w.a + r)
        ey = (y - w.center[1]) / (w.b + r)
        if ex**4 + ey**4 < 1.0:
            return False
    return True


def segment_visible(layout: LabyrinthLayout, p, q, spacing: float = 5e-4) -> bool:
    """Every sample along ``p -> q`` (at most ``spacing`` apart) is clear."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    n = max(2, int(math.ceil(np.linalg.norm(q - p) / spacing)) + 1)
    return all(point_clear(layout, p + t * (q - p)) for t in np.linspace(0.0, 1.0, n))


@dataclass
class WaypointPlan:
    waypoints: np.ndarray  # (n, 2)
    switch_radius: float = 0.007
    line_of_sight: bool = True


def _bridge(layout: LabyrinthLayout, p, q, step: float) -> Optional[np.ndarray]:
    """Shortest single intermediate point visible from both ends, on a grid."""
    xs = np.arange(-layout.x_frame, layout.x_frame + 1e-12, step)
    ys = np.arange(-layout.y_frame, layout.y_frame + 1e-12, step)
    cands = np.array([(x, y) for y in ys for x in xs])
    cost = np.linalg.norm(cands - p, axis=1) + np.linalg.norm(cands - q, axis=1)
    for i in np.argsort(cost, kind="stable"):
        c = cands[i]
        if point_clear(layout, c) and segment_visible(layout, p, c) and segment_visible(layout, c, q):
            return c
    return None


def make_waypoints(path: CornerPath, layout: LabyrinthLayout, switch_radius: float = 0.007, grid: float = 0.005) -> WaypointPlan:
    """Corner path densified so each consecutive pair of waypoints is mutually visible."""
    C = path.array
    out = [C[0]]
    for i in range(len(C) - 1):
        p, q = C[i], C[i + 1]
        if not segment_visible(layout, p, q):
            c = _bridge(layout, p, q, grid)
            if c is None:
                raise WaypointError(f"no line of sight between corners {i} {tuple(p)} and {i + 1} {tuple(q)}")
            out.append(c)
        out.append(q)
    return WaypointPlan(np.array(out), switch_radius, True)


class WaypointFollower:
    """Monotone waypoint index with the switch-radius rule."""

    def __init__(self, plan: WaypointPlan):
        self.plan = plan
        self.index = 1 if len(plan.waypoints) > 1 else 0

    @property
    def target(self) -> np.ndarray:
        return self.plan.waypoints[self.index]

    def update(self, ball_pos) -> np.ndarray:
        p = np.asarray(ball_pos, dtype=float)[:2]
        last = len(self.plan.waypoints) - 1
        if self.index < last and np.hypot(*(self.target - p)) < self.plan.switch_radius:
            self.index += 1
        return self.target


# --------------------------------------------------------------------------
# cascaded PID


@dataclass
class PidGains:
    """Position -> velocity -> angle -> motor cascade, same gains on both axes."""

    kp_pos: float = 2.5
    ki_pos: float = 0.0
    kd_pos: float = 0.0
    kp_vel: float = 1.0
    ki_vel: float = 0.3
    kp_ang: float = 25.0
    v_max: float = 0.16  # velocity setpoint clamp, m/s
    pos_int_max: float = 0.02  # integrator clamps
    vel_int_max: float = 0.05
    angle_max: float = ALPHA_MAX
    omega_max: float = OMEGA_MAX

    def __post_init__(self):
        vals = [getattr(self, k) for k in self.__dataclass_fields__]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("gains must be finite")
        if min(self.v_max, self.pos_int_max, self.vel_int_max, self.angle_max, self.omega_max) <= 0:
            raise ValueError("clamps must be positive")


class PidController:
    """Three-loop cascade; the disturbance angle is a feed-forward on the angle setpoint.

    The ball accelerates against the tilt (``a = -(5/7) g (alpha - d)``), hence
    the minus sign between the velocity loop and the angle setpoint.
    """

    def __init__(self, gains: Optional[PidGains] = None, period: float = 1.0 / 55.0):
        self.g = gains or PidGains()
        self.dt = period
        self.reset()

    def reset(self):
        self.i_pos = np.zeros(2)
        self.i_vel = np.zeros(2)

    def tick(self, x_est, waypoint, d=(0.0, 0.0)) -> np.ndarray:
        g = self.g
        x = np.asarray(x_est, dtype=float)
        pos = x[[IX, IY]]
        vel = x[[IVX, IVY]]
        ang = x[[IA, IB]]
        e = np.asarray(waypoint, dtype=float) - pos
        self.i_pos = np.clip(self.i_pos + e * self.dt, -g.pos_int_max, g.pos_int_max)
        v_sp = g.kp_pos * e + g.ki_pos * self.i_pos - g.kd_pos * vel
        v_sp = np.clip(v_sp, -g.v_max, g.v_max)
        ev = v_sp - vel
        self.i_vel = np.clip(self.i_vel + ev * self.dt, -g.vel_int_max, g.vel_int_max)
        a_sp = np.asarray(d, dtype=float) - (g.kp_vel * ev + g.ki_vel * self.i_vel)
        a_sp = np.clip(a_sp, -g.angle_max, g.angle_max)
        return np.clip(g.kp_ang * (a_sp - ang), -g.omega_max, g.omega_max)


# --------------------------------------------------------------------------
# linear waypoint MPC


@dataclass
class LinMpcConfig:
    N: int = 18
    Ts: float = TS
    # a waypoint may be several cm away and there is no terminal constraint, so
    # position is weighted far above the tracker's value (tuned on step responses)
    Q: tuple = (300.0, 10.0, 300.0, 10.0, 0.0, 0.0)
    R: tuple = (0.3, 0.3)
    alpha_max: float = ALPHA_MAX
    beta_max: float = BETA_MAX
    omega_max: float = OMEGA_MAX
    fallback_decay: float = 0.5
    budget: Optional[float] = None
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=60))


def build_linmpc_problem(cfg: LinMpcConfig, x_est, waypoint, d=(0.0, 0.0), model=None) -> HorizonNlp:
    model = model or build_linear_model(cfg.Ts)
    x0 = np.asarray(x_est, dtype=float).copy()
    x_ref = np.zeros(NX)
    x_ref[[IX, IY]] = waypoint
    inf = np.inf
    x_lb = np.array([-inf, -inf, -inf, -inf, -cfg.alpha_max, -cfg.beta_max])
    u_max = np.array([cfg.omega_max, cfg.omega_max])
    xg = np.tile(x0, (cfg.N + 1, 1))
    return HorizonNlp(
        N=cfg.N,
        A=model.A,
        B=model.B,
        x0=x0,
        Q=np.diag(cfg.Q),
        R=np.diag(cfg.R),
        x_ref=x_ref,
        u_ref=np.zeros(2),
        offset=model.disturbance_offset(np.asarray(d, dtype=float)),
        x_lb=x_lb,
        x_ub=-x_lb,
        u_lb=-u_max,
        u_ub=u_max,
        x_guess=xg,
    )


class LinearMpcController:
    def __init__(self, config: Optional[LinMpcConfig] = None):
        self.cfg = config or LinMpcConfig()
        self.model = build_linear_model(self.cfg.Ts)
        self.u_prev = np.zeros(2)
        self.last_status = SOLVED
        self.last_solve_time = 0.0
        self.fallback = False

    def reset(self):
        self.u_prev = np.zeros(2)

    def tick(self, x_est, waypoint, d=(0.0, 0.0)) -> np.ndarray:
        cfg = self.cfg
        nlp = build_linmpc_problem(cfg, x_est, waypoint, d, self.model)
        t0 = time.perf_counter()
        try:
            res = solve(nlp, budget=cfg.budget, options=cfg.solver)
            status = res.status
        except (FloatingPointError, ValueError):
            res, status = None, "error"
        self.last_solve_time = time.perf_counter() - t0
        self.last_status = status
        self.fallback = status != SOLVED
        u = res.u[0] if not self.fallback else cfg.fallback_decay * self.u_prev
        u = np.clip(u, -cfg.omega_max, cfg.omega_max)
        self.u_prev = u
        return u
