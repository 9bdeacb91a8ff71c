"""Low-level tracking MPC: follows the planned path at the measurement rate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ALPHA_MAX, BETA_MAX, IA, IB, IX, IY, NX, OMEGA_MAX, TS, LinearModel, build_linear_model
from .estimation import AngleMap
from .hl_planner import HlPath
from .layout import LabyrinthLayout, nearest_cost_obstacles
from .solver import HorizonNlp, SolverOptions, solve
from .solver.nlp import SOLVED


@dataclass
class LlConfig:
    N: int = 18
    Ts: float = TS
    Q: tuple = (10.0, 0.1, 10.0, 0.1, 0.0, 0.0)
    R: tuple = (0.3, 0.3)
    w_obs: float = 0.01
    d_max: float = 0.0125  # m
    sharpness: float = 10000.0  # 1/m
    J: int = 15  # obstacle points in the cost
    ref_points: int = 15  # stage whose HL point is the terminal target
    alpha_max: float = ALPHA_MAX
    beta_max: float = BETA_MAX
    omega_max: float = OMEGA_MAX
    period: float = 1.0 / 55.0
    fallback_decay: float = 0.5
    budget: Optional[float] = None  # wall-clock limit per solve, s
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=60))

    def __post_init__(self):
        if min(self.Q) < 0 or min(self.R) < 0 or self.w_obs < 0:
            raise ValueError("weights must be nonnegative")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if not 1 <= self.ref_points <= self.N:
            raise ValueError("ref_points must lie in 1..N")


# --------------------------------------------------------------------------
# obstacle cost


def softplus(z):
    """``log(1 + e^z)`` without overflow."""
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0.0))))


def obstacle_cost(ball_pos, points, sharpness: float = 10000.0, d_max: float = 0.0125) -> tuple[float, np.ndarray]:
    """Unweighted proximity cost summed over ``points`` and its gradient in the ball position."""
    p = np.asarray(ball_pos, dtype=float)[:2]
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    diff = p - pts
    d = np.hypot(diff[:, 0], diff[:, 1])
    z = sharpness * (d_max - d)
    value = float(np.sum(softplus(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow free
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(d[:, None] > 0, diff / d[:, None], 0.0)
    grad = -sharpness * np.sum(sig[:, None] * u, axis=0)
    return value, grad


# --------------------------------------------------------------------------
# reference mapping


def reference_indices(i0: int, N: int = 18, ref_points: int = 15, last: int = 100) -> np.ndarray:
    """HL indices used for LL stages ``1..N``: ``i0 + min(k, ref_points)``, clamped to ``last``."""
    k = np.arange(1, N + 1)
    return np.minimum(i0 + np.minimum(k, ref_points), last)


def nearest_index(states: np.ndarray, ball_pos, start: int = 0) -> int:
    """Index ``>= start`` of the HL state nearest the ball (first on ties)."""
    P = states[start:, [IX, IY]]
    d2 = np.sum((P - np.asarray(ball_pos, dtype=float)[:2]) ** 2, axis=1)
    return start + int(np.argmin(d2))


@dataclass
class Reference:
    x_ref: np.ndarray  # (N + 1, 6), row 0 unused
    u_ref: np.ndarray  # (N, 2)
    terminal: np.ndarray  # position
    index: int  # HL index nearest the ball


def map_reference(hl_path: HlPath, ball_pos, N: int = 18, ref_points: int = 15, start: int = 0) -> Reference:
    """Reference window for the tracker taken from ``hl_path``.

    Stage ``k`` tracks HL point ``i0 + min(k, ref_points)`` where ``i0`` is the
    HL index nearest the ball; indices clamp at the path end.  Angle
    references are zero.  Input references use the same rule on the HL
    inputs.
    """
    S, Uh = hl_path.states, hl_path.inputs
    last = len(S) - 1
    i0 = nearest_index(S, ball_pos, start)
    idx = reference_indices(i0, N, ref_points, last)
    x_ref = np.zeros((N + 1, NX))
    x_ref[0] = S[i0]
    x_ref[1:] = S[idx]
    x_ref[:, [IA, IB]] = 0.0
    uidx = np.minimum(i0 + np.minimum(np.arange(N), ref_points), len(Uh) - 1)
    u_ref = Uh[uidx].copy()
    return Reference(x_ref, u_ref, x_ref[min(ref_points, N), [IX, IY]].copy(), i0)


# --------------------------------------------------------------------------
# problem and tick


def build_ll_problem(
    config: LlConfig,
    x_est,
    d,
    hl_path: Optional[HlPath],
    layout: LabyrinthLayout,
    anglemap: Optional[AngleMap] = None,
    start_index: int = 0,
    model: Optional[LinearModel] = None,
) -> HorizonNlp:
    """Tracking problem; with no HL path the reference holds the current position."""
    cfg = config
    model = model or build_linear_model(cfg.Ts)
    x0 = np.asarray(x_est, dtype=float).copy()
    pos = x0[[IX, IY]]
    N = cfg.N
    if hl_path is None:
        x_ref = np.zeros((N + 1, NX))
        x_ref[:, [IX, IY]] = pos
        u_ref = np.zeros((N, 2))
        term_idx, term_val = (), ()
        index = -1
    else:
        ref = map_reference(hl_path, pos, N, cfg.ref_points, start_index)
        x_ref, u_ref = ref.x_ref, ref.u_ref
        term_idx, term_val = (IX, IY), ref.terminal
        index = ref.index
    inf = np.inf
    x_lb = np.array([-inf, -inf, -inf, -inf, -cfg.alpha_max, -cfg.beta_max])
    x_ub = -x_lb
    u_max = np.array([cfg.omega_max, cfg.omega_max])
    d_tot = np.asarray(d, dtype=float)
    if anglemap is not None:
        d_tot = d_tot + anglemap.query(pos)
    xg = np.zeros((N + 1, NX))
    xg[:, [IX, IY]] = pos
    return HorizonNlp(
        N=N,
        A=model.A,
        B=model.B,
        x0=x0,
        Q=np.diag(cfg.Q),
        R=np.diag(cfg.R),
        x_ref=x_ref,
        u_ref=u_ref,
        offset=model.disturbance_offset(d_tot),
        x_lb=x_lb,
        x_ub=x_ub,
        u_lb=-u_max,
        u_ub=u_max,
        obs_points=nearest_cost_obstacles(pos, layout, cfg.J),
        obs_weight=cfg.w_obs,
        obs_sharpness=cfg.sharpness,
        obs_dmax=cfg.d_max,
        terminal_idx=term_idx,
        terminal_val=term_val,
        x_guess=xg,
        meta={"index": index},
    )


@dataclass
class LlTick:
    u: np.ndarray
    status: str
    iterations: int
    solve_time: float
    fallback: bool
    index: int


class LlTracker:
    """Stateful tracker: latches the HL index per path and handles solver failure."""

    def __init__(self, layout: LabyrinthLayout, config: Optional[LlConfig] = None, solve_fn=None):
        self.layout = layout
        self.cfg = config or LlConfig()
        self.model = build_linear_model(self.cfg.Ts)
        self.u_prev = np.zeros(2)
        self._path_id = None
        self._index = 0
        self._solve = solve_fn or solve

    def tick(self, x_est, d=(0.0, 0.0), hl_path: Optional[HlPath] = None, anglemap: Optional[AngleMap] = None) -> LlTick:
        cfg = self.cfg
        if hl_path is not None and id(hl_path) != self._path_id:
            self._path_id, self._index = id(hl_path), 0
        nlp = build_ll_problem(cfg, x_est, d, hl_path, self.layout, anglemap, self._index, self.model)
        if hl_path is not None:
            self._index = nlp.meta["index"]
        t0 = time.perf_counter()
        try:
            res = self._solve(nlp, budget=cfg.budget, options=cfg.solver)
            status, iters = res.status, res.iterations
        except (FloatingPointError, ValueError):
            res, status, iters = None, "error", 0
        dt = time.perf_counter() - t0
        if res is not None and status == SOLVED:
            u = np.clip(res.u[0], -cfg.omega_max, cfg.omega_max)
            fallback = False
        else:
            u = np.clip(cfg.fallback_decay * self.u_prev, -cfg.omega_max, cfg.omega_max)
            fallback = True
        self.u_prev = u
        return LlTick(u, status, iters, dt, fallback, self._index if hl_path is not None else -1)
