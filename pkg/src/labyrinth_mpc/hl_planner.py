"""High-level planning MPC: obstacle-constrained 100-step path to a goal corner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import ALPHA_MAX, BETA_MAX, IA, IB, IX, IY, NX, OMEGA_MAX, TS, LinearModel, build_linear_model
from .estimation import AngleMap
from .layout import CornerPath, LabyrinthLayout, nearest_obstacles
from .solver import HorizonNlp, SolveResult, SolverOptions, solve
from .solver.nlp import SOLVED, TIMEOUT


@dataclass
class HlConfig:
    N: int = 100
    Ts: float = TS
    Q: tuple = (10.0, 1.0, 10.0, 1.0, 0.0, 0.0)
    R: tuple = (0.1, 0.1)
    n_holes: int = 5
    n_walls: int = 10
    lookahead: int = 3  # goal = this many corners ahead
    guess_corner: int = 2  # initial guess = this many corners ahead
    restart_budget: float = 0.2  # s
    alpha_max: float = ALPHA_MAX
    beta_max: float = BETA_MAX
    omega_max: float = OMEGA_MAX
    relax_stages: int = 6  # stages 0..5 get relaxed bounds when the start is in contact
    relax_margin: float = 0.1  # relative margin below the current constraint value
    verify_tol: float = 1e-6
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if min(self.Q) < 0 or min(self.R) < 0:
            raise ValueError("weights must be nonnegative")
        if self.N < 1 or self.lookahead < 1 or self.guess_corner < 1:
            raise ValueError("N, lookahead and guess_corner must be positive")


# --------------------------------------------------------------------------
# progress along the corner path


def project_on_path(path: CornerPath, pos, max_s: float = math.inf) -> tuple[float, float]:
    """Arc length and distance of the nearest point on the path.

    Segments starting beyond arc length ``max_s`` are ignored.
    """
    C = path.array
    p = np.asarray(pos, dtype=float)[:2]
    a, b = C[:-1], C[1:]
    ab = b - a
    L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    t = np.clip(np.sum((p - a) * ab, axis=1) / L2, 0.0, 1.0)
    q = a + t[:, None] * ab
    d = np.hypot(*(q - p).T)
    s0 = path.cumulative_length[:-1]
    d = np.where(s0 <= max_s, d, np.inf)
    i = int(np.argmin(d))  # first minimum wins ties
    return float(s0[i] + t[i] * math.sqrt(L2[i])), float(d[i])


class ProgressLatch:
    """Monotone progress along a corner path.

    Once a progress value is latched, projections are restricted to segments
    starting at most ``window`` beyond it, so a ball near a divider cannot
    jump to the parallel lane of a later segment.
    """

    def __init__(self, path: CornerPath, window: float = 0.06):
        self.path = path
        self.window = window
        self.s: Optional[float] = None

    def update(self, pos) -> float:
        limit = math.inf if self.s is None else self.s + self.window
        s, _ = project_on_path(self.path, pos, limit)
        self.s = s if self.s is None else max(self.s, s)
        return self.s

    @property
    def fraction(self) -> float:
        return 0.0 if self.s is None else min(1.0, self.s / self.path.total_length)

    def next_corner(self) -> int:
        """Index of the first corner strictly ahead of the latched progress."""
        cum = self.path.cumulative_length
        s = 0.0 if self.s is None else self.s
        ahead = np.nonzero(cum > s + 1e-12)[0]
        return int(ahead[0]) if len(ahead) else len(cum) - 1

    def corner_ahead(self, n: int) -> int:
        """Index of the ``n``-th upcoming corner, clamped to the final corner."""
        return min(self.next_corner() + n - 1, len(self.path.corners) - 1)


def select_goal(path: CornerPath, ball_pos, latch: Optional[ProgressLatch] = None, lookahead: int = 3) -> np.ndarray:
    latch = latch or ProgressLatch(path)
    latch.update(ball_pos)
    return path.array[latch.corner_ahead(lookahead)].copy()


# --------------------------------------------------------------------------
# problem construction


@dataclass
class HlPath:
    states: np.ndarray  # (N + 1, 6)
    inputs: np.ndarray  # (N, 2)
    created: float  # simulated time of the estimate the path starts from
    goal: np.ndarray
    status: str
    iterations: int = 0
    wall_time: float = 0.0


def hole_rows(layout: LabyrinthLayout, holes) -> np.ndarray:
    return np.array([[*h.center, h.radius] for h in holes], dtype=float).reshape(-1, 3)


def wall_rows(layout: LabyrinthLayout, walls) -> np.ndarray:
    """Walls inflated by the ball radius, rows ``x, y, a, b``."""
    r = layout.r_ball
    return np.array([[*w.center, w.a + r, w.b + r] for w in walls], dtype=float).reshape(-1, 4)


def hole_values(P: np.ndarray, holes: np.ndarray) -> np.ndarray:
    """Squared center distances, ``(n_points, n_holes)``."""
    return np.sum((P[:, None, :] - holes[None, :, :2]) ** 2, axis=-1)


def wall_values(P: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Superellipse values of inflated walls, ``(n_points, n_walls)``; >= 1 outside."""
    ex = (P[:, None, 0] - walls[None, :, 0]) / walls[None, :, 2]
    ey = (P[:, None, 1] - walls[None, :, 1]) / walls[None, :, 3]
    return ex**4 + ey**4


def build_hl_problem(
    layout: LabyrinthLayout,
    config: HlConfig,
    x_est,
    d=(0.0, 0.0),
    anglemap: Optional[AngleMap] = None,
    latch: Optional[ProgressLatch] = None,
    model: Optional[LinearModel] = None,
) -> HorizonNlp:
    """Assemble the planning problem from the current estimate.

    The angle-map value at the ball is added to the disturbance ``d`` in the
    dynamics offset.  If the estimate violates an obstacle constraint, that
    constraint's lower bound is relaxed to ``(1 - relax_margin)`` times its
    current value over the first ``relax_stages`` stages.
    """
    cfg = config
    model = model or build_linear_model(cfg.Ts)
    x0 = np.asarray(x_est, dtype=float).copy()
    pos = x0[[IX, IY]]
    latch = latch or ProgressLatch(layout.corner_path)
    latch.update(pos)
    C = layout.corner_path.array
    goal = C[latch.corner_ahead(cfg.lookahead)]
    guess = C[latch.corner_ahead(cfg.guess_corner)]

    hs, ws = nearest_obstacles(pos, layout, cfg.n_holes, cfg.n_walls)
    holes, walls = hole_rows(layout, hs), wall_rows(layout, ws)
    N = cfg.N
    hole_lower = np.tile(holes[:, 2] ** 2, (N + 1, 1))
    wall_lower = np.ones((N + 1, len(walls)))
    ks = min(cfg.relax_stages, N + 1)
    h0 = hole_values(pos[None], holes)[0]
    w0 = wall_values(pos[None], walls)[0]
    hole_lower[:ks] = np.where(h0 < hole_lower[0], (1 - cfg.relax_margin) * h0, hole_lower[0])
    wall_lower[:ks] = np.where(w0 < 1.0, (1 - cfg.relax_margin) * w0, 1.0)

    x_lb = np.array([-layout.x_frame, -np.inf, -layout.y_frame, -np.inf, -cfg.alpha_max, -cfg.beta_max])
    x_ub = -x_lb
    x_lb = np.tile(x_lb, (N + 1, 1))
    x_ub = np.tile(x_ub, (N + 1, 1))
    # an estimate slightly outside the box (noise, actuator overshoot) stays feasible early on
    x_lb[:ks] = np.minimum(x_lb[:ks], x0 - 1e-3)
    x_ub[:ks] = np.maximum(x_ub[:ks], x0 + 1e-3)
    u_max = np.array([cfg.omega_max, cfg.omega_max])

    d_tot = np.asarray(d, dtype=float)
    if anglemap is not None:
        d_tot = d_tot + anglemap.query(pos)
    x_ref = np.zeros(NX)
    x_ref[[IX, IY]] = goal
    xg = np.zeros((N + 1, NX))
    xg[:, [IX, IY]] = guess
    return HorizonNlp(
        N=N,
        A=model.A,
        B=model.B,
        x0=x0,
        Q=np.diag(cfg.Q),
        R=np.diag(cfg.R),
        x_ref=x_ref,
        u_ref=np.zeros(2),
        offset=model.disturbance_offset(d_tot),
        x_lb=x_lb,
        x_ub=x_ub,
        u_lb=-u_max,
        u_ub=u_max,
        holes=holes,
        walls=walls,
        hole_lower=hole_lower,
        wall_lower=wall_lower,
        terminal_idx=(IX, IY),
        terminal_val=goal,
        x_guess=xg,
        meta={"goal": goal.copy(), "guess": guess.copy(), "progress": latch.s},
    )


def verify_hl_path(nlp: HorizonNlp, states: np.ndarray, inputs: np.ndarray) -> dict:
    """Independent check of a path against the problem's obstacle and dynamics rows.

    Returns the worst hole shortfall (squared distance), superellipse
    shortfall and dynamics residual over stages 1..N.
    """
    P = states[1:, [IX, IY]]
    out = {"hole": 0.0, "wall": 0.0, "dynamics": 0.0, "terminal": 0.0}
    if len(nlp.holes):
        out["hole"] = float(max(0.0, np.max(nlp.hole_lower[1:] - hole_values(P, nlp.holes))))
    if len(nlp.walls):
        out["wall"] = float(max(0.0, np.max(nlp.wall_lower[1:] - wall_values(P, nlp.walls))))
    pred = states[:-1] @ nlp.A.T + inputs @ nlp.B.T + nlp.offset
    out["dynamics"] = float(np.max(np.abs(states[1:] - pred)))
    if len(nlp.terminal_idx):
        out["terminal"] = float(np.max(np.abs(states[-1, nlp.terminal_idx] - nlp.terminal_val)))
    return out


def plan_once(
    layout: LabyrinthLayout,
    config: HlConfig,
    x_est,
    d=(0.0, 0.0),
    anglemap: Optional[AngleMap] = None,
    latch: Optional[ProgressLatch] = None,
    now: float = 0.0,
    budget: Optional[float] = None,
    abort=None,
) -> tuple[Optional[HlPath], SolveResult, HorizonNlp]:
    """Build and solve one planning problem; the path is ``None`` unless publishable."""
    nlp = build_hl_problem(layout, config, x_est, d, anglemap, latch)
    res = solve(nlp, budget=budget, options=config.solver, abort=abort)
    path = None
    if res.status == SOLVED:
        chk = verify_hl_path(nlp, res.x, res.u)
        if max(chk["hole"], chk["wall"]) <= config.verify_tol and chk["dynamics"] <= 1e-8:
            path = HlPath(res.x.copy(), res.u.copy(), now, nlp.meta["goal"], res.status, res.iterations, res.wall_time)
    return path, res, nlp


# --------------------------------------------------------------------------
# receding-horizon scheduling


def latency_ticks(latency: float, period: float) -> int:
    """Ticks until a result requested now becomes visible (at least the next tick)."""
    return max(1, int(math.floor(latency / period + 0.5 + 1e-9)))


@dataclass
class HlTelemetry:
    t_request: float
    t_done: float
    status: str
    iterations: int
    wall_time: float
    goal: tuple
    published: bool


class HlPlanner:
    """Runs the planner against the loop clock.

    In ``synthetic`` latency mode a solve started at a tick becomes visible
    ``latency_ticks(latency)`` ticks later; in ``measured`` mode the solve's
    wall-clock time is used instead.  A solve whose result would arrive after
    ``restart_budget`` is discarded at the budget and restarted from the
    newest estimate.  The last published path is served meanwhile.
    """

    def __init__(
        self,
        layout: LabyrinthLayout,
        config: Optional[HlConfig] = None,
        period: float = 1.0 / 55.0,
        latency: Optional[float] = 0.1,
        solve_fn: Optional[Callable] = None,
    ):
        self.layout = layout
        self.cfg = config or HlConfig()
        self.period = period
        self.latency = latency  # None selects measured mode
        self.latch = ProgressLatch(layout.corner_path)
        self.path: Optional[HlPath] = None
        self.telemetry: list[HlTelemetry] = []
        self._solve = solve_fn or plan_once
        self._pending = None  # (tick_ready, tick_started, path, result, t_request, goal)
        self._tick = 0
        self.restarts = 0
        self.budget_ticks = int(math.floor(self.cfg.restart_budget / period + 1e-9))

    @property
    def stalled(self) -> bool:
        """No path was ever published and the last solve failed."""
        return self.path is None and bool(self.telemetry) and self.telemetry[-1].status != SOLVED

    def _start(self, x_est, d, anglemap, now):
        budget = self.cfg.restart_budget if self.latency is None else None
        path, res, nlp = self._solve(self.layout, self.cfg, x_est, d, anglemap, self.latch, now, budget)
        if self.latency is None:
            delay = latency_ticks(res.wall_time, self.period)
        else:
            delay = latency_ticks(self.latency, self.period)
        self._pending = (self._tick + delay, self._tick, path, res, now, nlp.meta["goal"])

    def tick(self, x_est, d=(0.0, 0.0), anglemap: Optional[AngleMap] = None, now: float = 0.0) -> Optional[HlPath]:
        """Advance one loop tick and return the path to serve (``None`` while none exists)."""
        self.latch.update(np.asarray(x_est)[[IX, IY]])
        if self._pending is not None:
            ready, started, path, res, t_req, goal = self._pending
            if ready - started > self.budget_ticks and self._tick - started >= self.budget_ticks:
                # result would arrive too late: abort and restart from the newest estimate
                self._record(t_req, now, TIMEOUT, res, goal, False)
                self.restarts += 1
                self._pending = None
            elif self._tick >= ready:
                if path is not None:
                    self.path = path
                self._record(t_req, now, res.status, res, goal, path is not None)
                self._pending = None
        if self._pending is None:
            self._start(x_est, d, anglemap, now)
        self._tick += 1
        return self.path

    def _record(self, t_req, t_done, status, res, goal, published):
        goal = (float(goal[0]), float(goal[1]))
        self.telemetry.append(HlTelemetry(t_req, t_done, status, res.iterations, res.wall_time, goal, published))
