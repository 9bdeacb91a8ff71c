"""Horizon-structured nonlinear program shared by the planning and tracking MPCs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
TIMEOUT = "timeout"

POS_IDX = (0, 2)


class NlpDimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: int, what: str):
        self.stage = stage
        super().__init__(f"non-finite {what} at stage {stage}")


def _arr(a, shape, name) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    if a.shape != shape:
        raise NlpDimensionError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass
class HorizonNlp:
    """Direct-transcription problem over ``N`` stages.

    Decision variables are ``x_1..x_N`` and ``u_0..u_{N-1}``; ``x_0`` is fixed.

    minimize   sum_{k=1..N} (x_k - x_ref_k)' Q (x_k - x_ref_k) + w c_obs(x_k)
             + sum_{k=0..N-1} (u_k - u_ref_k)' R (u_k - u_ref_k)
    subject to x_{k+1} = A x_k + B u_k + offset
               x_lb <= x_k <= x_ub,  u_lb <= u_k <= u_ub
               |p_k - hole_j|^2 >= hole_lower[k, j]
               ((px - wx)/wa)^4 + ((py - wy)/wb)^4 >= wall_lower[k, j]
               x_N[terminal_idx] = terminal_val

    ``holes`` rows are ``(x, y, r)``; ``walls`` rows are ``(x, y, a, b)`` with the
    half-extents already inflated by the ball radius.  ``obs_points`` feed the
    softplus proximity cost ``log(1 + exp(sharpness (d_max - d)))``.
    """

    N: int
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    offset: Optional[np.ndarray] = None
    x_lb: Optional[np.ndarray] = None
    x_ub: Optional[np.ndarray] = None
    u_lb: Optional[np.ndarray] = None
    u_ub: Optional[np.ndarray] = None
    holes: Optional[np.ndarray] = None
    walls: Optional[np.ndarray] = None
    hole_lower: Optional[np.ndarray] = None
    wall_lower: Optional[np.ndarray] = None
    obs_points: Optional[np.ndarray] = None
    obs_weight: float = 0.0
    obs_sharpness: float = 10000.0
    obs_dmax: float = 0.0125
    terminal_idx: tuple = ()
    terminal_val: tuple = ()
    x_guess: Optional[np.ndarray] = None
    u_guess: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = int(self.N)
        if N < 1:
            raise NlpDimensionError("horizon must be >= 1")
        self.N = N
        A = np.ascontiguousarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise NlpDimensionError(f"A must be square, got {A.shape}")
        nx = A.shape[0]
        B = np.ascontiguousarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != nx:
            raise NlpDimensionError(f"B must have {nx} rows, got {B.shape}")
        nu = B.shape[1]
        self.A, self.B = A, B
        self.x0 = _arr(self.x0, (nx,), "x0")
        self.Q = _arr(self.Q, (nx, nx), "Q")
        self.R = _arr(self.R, (nu, nu), "R")
        self.x_ref = self._stagewise(self.x_ref, N + 1, nx, "x_ref", 0.0)
        self.u_ref = self._stagewise(self.u_ref, N, nu, "u_ref", 0.0)
        self.offset = np.zeros(nx) if self.offset is None else _arr(self.offset, (nx,), "offset")
        self.x_lb = self._stagewise(self.x_lb, N + 1, nx, "x_lb", -np.inf)
        self.x_ub = self._stagewise(self.x_ub, N + 1, nx, "x_ub", np.inf)
        self.u_lb = self._stagewise(self.u_lb, N, nu, "u_lb", -np.inf)
        self.u_ub = self._stagewise(self.u_ub, N, nu, "u_ub", np.inf)
        self.holes = np.zeros((0, 3)) if self.holes is None else np.ascontiguousarray(self.holes, dtype=float).reshape(-1, 3)
        self.walls = np.zeros((0, 4)) if self.walls is None else np.ascontiguousarray(self.walls, dtype=float).reshape(-1, 4)
        nh, nw = len(self.holes), len(self.walls)
        if np.any(self.holes[:, 2] <= 0) or np.any(self.walls[:, 2:] <= 0):
            raise NlpDimensionError("obstacle sizes must be positive")
        if self.hole_lower is None:
            self.hole_lower = np.tile(self.holes[:, 2] ** 2, (N + 1, 1))
        self.hole_lower = _arr(self.hole_lower, (N + 1, nh), "hole_lower")
        if self.wall_lower is None:
            self.wall_lower = np.ones((N + 1, nw))
        self.wall_lower = _arr(self.wall_lower, (N + 1, nw), "wall_lower")
        self.obs_points = (
            np.zeros((0, 2)) if self.obs_points is None else np.ascontiguousarray(self.obs_points, dtype=float).reshape(-1, 2)
        )
        if self.obs_sharpness <= 0:
            raise NlpDimensionError("obs_sharpness must be positive")
        self.terminal_idx = np.asarray(self.terminal_idx, dtype=np.int64).reshape(-1)
        self.terminal_val = np.asarray(self.terminal_val, dtype=float).reshape(-1)
        if self.terminal_idx.shape != self.terminal_val.shape:
            raise NlpDimensionError("terminal_idx and terminal_val lengths differ")
        if np.any((self.terminal_idx < 0) | (self.terminal_idx >= nx)):
            raise NlpDimensionError("terminal index out of range")
        if self.x_guess is None:
            self.x_guess = np.tile(self.x0, (N + 1, 1))
        self.x_guess = _arr(self.x_guess, (N + 1, nx), "x_guess").copy()
        self.x_guess[0] = self.x0
        if self.u_guess is None:
            self.u_guess = np.zeros((N, nu))
        self.u_guess = _arr(self.u_guess, (N, nu), "u_guess").copy()
        for name in ("Q", "R"):
            M = getattr(self, name)
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise NlpDimensionError(f"{name} must be positive semidefinite")

    @staticmethod
    def _stagewise(a, n, d, name, default) -> np.ndarray:
        if a is None:
            return np.full((n, d), default)
        a = np.asarray(a, dtype=float)
        if a.shape == (d,):
            a = np.tile(a, (n, 1))
        return _arr(a, (n, d), name)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def n_rows(self) -> int:
        """Inequality rows per stage (boxes on both sides plus obstacles)."""
        return 2 * self.nx + 2 * self.nu + len(self.holes) + len(self.walls)


@dataclass
class SolveResult:
    status: str
    x: np.ndarray  # (N + 1, nx); x[0] is the fixed initial state
    u: np.ndarray  # (N, nu)
    kkt: float
    iterations: int
    wall_time: float
    cost: float = np.nan
    multipliers: Optional["Multipliers"] = None
    slacks: Optional[np.ndarray] = None
    mu: float = np.nan
    log: list = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


@dataclass
class Multipliers:
    dyn: np.ndarray  # (N, nx), multipliers of x_{k+1} = A x_k + B u_k + offset
    terminal: np.ndarray  # (n_terminal,)
    ineq: np.ndarray  # (N + 1, n_rows), >= 0, for the (scaled) inequality rows
