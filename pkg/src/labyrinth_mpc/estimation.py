"""State estimation: Kalman filter, disturbance observer and feed-forward angle map.

The disturbance ``d`` (rad, per axis) is the plate attitude at which the ball
would stay at rest.  It enters the prediction through the velocity rows,
``x~_{k+1} = A x^_k + B u_k + (I - A) B_d d``, which with the angle-selecting
``B_d`` is ``+(5/7) g Ts d`` on the two velocity components.  The gain ``L``
reads the velocity prediction error, so ``d <- d + L (x^ - x~)`` converges to
minus the surface tilt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .dynamics import IA, IB, IVX, IVY, IX, IY, NX, LinearModel
from .layout import LabyrinthLayout

log = logging.getLogger(__name__)

MEAS_IDX = (IX, IY, IA, IB)
H_MEAS = np.zeros((4, NX))
H_MEAS[np.arange(4), MEAS_IDX] = 1.0

BD = np.zeros((NX, 2))
BD[IA, 0] = 1.0
BD[IB, 1] = 1.0
L_GAIN = np.zeros((2, NX))
L_GAIN[0, IVX] = 0.04
L_GAIN[1, IVY] = 0.04


# --------------------------------------------------------------------------
# Kalman filter


def default_process_noise() -> np.ndarray:
    return np.diag([1e-8, 2e-6, 1e-8, 2e-6, 4e-6, 4e-6])


def default_measurement_noise(pos_std: float = 5e-4, angle_std: float = 2e-3) -> np.ndarray:
    return np.diag([pos_std**2, pos_std**2, angle_std**2, angle_std**2])


@dataclass
class KalmanState:
    mean: np.ndarray
    cov: np.ndarray
    Q_kf: np.ndarray = field(default_factory=default_process_noise)
    R_kf: np.ndarray = field(default_factory=default_measurement_noise)
    repairs: int = 0  # covariance repairs performed so far

    @classmethod
    def initial(cls, z, pos_var: float = 1e-6, vel_var: float = 1e-4, ang_var: float = 1e-5, **kw) -> "KalmanState":
        """Start from a first measurement ``(x, y, alpha, beta)`` at rest."""
        mean = np.zeros(NX)
        mean[list(MEAS_IDX)] = z
        cov = np.diag([pos_var, vel_var, pos_var, vel_var, ang_var, ang_var])
        return cls(mean, cov, **kw)


def _repair_cov(P: np.ndarray, ks: KalmanState) -> tuple[np.ndarray, int]:
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
        return P, ks.repairs
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(P)
        floor = 1e-12 * max(1.0, float(np.max(np.abs(w))))
        log.warning("covariance lost positive definiteness (min eigenvalue %.3g); clamped", w.min())
        return (V * np.maximum(w, floor)) @ V.T, ks.repairs + 1


def kf_predict(ks: KalmanState, model: LinearModel, u, offset=None) -> KalmanState:
    x = model.A @ ks.mean + model.B @ np.asarray(u, dtype=float)
    if offset is not None:
        x = x + offset
    P = model.A @ ks.cov @ model.A.T + ks.Q_kf
    P, rep = _repair_cov(P, ks)
    return KalmanState(x, P, ks.Q_kf, ks.R_kf, rep)


def kf_update(ks: KalmanState, z) -> KalmanState:
    """Measurement update with ``z = (x, y, alpha, beta)`` (Joseph form)."""
    H = H_MEAS
    innov = np.asarray(z, dtype=float) - H @ ks.mean
    S = H @ ks.cov @ H.T + ks.R_kf
    K = np.linalg.solve(S, H @ ks.cov).T
    x = ks.mean + K @ innov
    IKH = np.eye(NX) - K @ H
    P = IKH @ ks.cov @ IKH.T + K @ ks.R_kf @ K.T
    P, rep = _repair_cov(P, ks)
    return KalmanState(x, P, ks.Q_kf, ks.R_kf, rep)


# --------------------------------------------------------------------------
# disturbance observer


def disturbance_matrix(model: LinearModel, Bd: np.ndarray = BD) -> np.ndarray:
    """``(I - A) B_d``: how ``d`` moves the predicted state in one step."""
    return (np.eye(NX) - model.A) @ Bd


def observer_spectral_radius(model: LinearModel, L: np.ndarray = L_GAIN, Bd: np.ndarray = BD) -> float:
    """Spectral radius of the disturbance-error recursion ``e <- (I - L G) e``."""
    M = np.eye(L.shape[0]) - L @ disturbance_matrix(model, Bd)
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def assert_observer_stable(model: LinearModel, L: np.ndarray = L_GAIN, Bd: np.ndarray = BD) -> float:
    rho = observer_spectral_radius(model, L, Bd)
    if not rho < 1.0:
        raise AssertionError(f"disturbance observer is unstable for this model (spectral radius {rho:.6f})")
    return rho


@dataclass
class DisturbanceState:
    d: np.ndarray = field(default_factory=lambda: np.zeros(2))
    x_pred: Optional[np.ndarray] = None  # x~_k, prediction of the current state
    Bd: np.ndarray = field(default_factory=lambda: BD.copy())
    L: np.ndarray = field(default_factory=lambda: L_GAIN.copy())
    frozen: bool = False  # last update was skipped by the wall heuristic


def observer_step(
    ds: DisturbanceState,
    model: LinearModel,
    x_est,
    u,
    freeze: bool = False,
    feedforward=None,
) -> DisturbanceState:
    """Correct ``d`` with the last prediction error and predict the next state.

    ``feedforward`` (angle-map value at the ball) is added to ``d`` in the
    prediction only, so ``d`` learns the residual the map leaves.
    """
    x_est = np.asarray(x_est, dtype=float)
    d = ds.d
    if ds.x_pred is not None and not freeze:
        d = d + ds.L @ (x_est - ds.x_pred)
    d_tot = d if feedforward is None else d + np.asarray(feedforward, dtype=float)
    G = disturbance_matrix(model, ds.Bd)
    x_pred = model.A @ x_est + model.B @ np.asarray(u, dtype=float) + G @ d_tot
    return DisturbanceState(d, x_pred, ds.Bd, ds.L, bool(freeze and ds.x_pred is not None))


def _nearest_on_box(p, cx, cy, a, b) -> np.ndarray:
    return np.array([min(max(p[0], cx - a), cx + a), min(max(p[1], cy - b), cy + b)])


def wall_freeze_heuristic(
    ds: DisturbanceState,
    layout: LabyrinthLayout,
    x_pred,
    x_est,
    proximity: Optional[float] = None,
    toward: bool = True,
) -> bool:
    """True when the predicted ball is near a wall and the correction points into it.

    ``proximity`` is measured from the ball center to the wall surface
    (frame edges count as walls); defaults to ``r_ball + 3 mm``.  With
    ``toward=False`` the test is reversed and fires when the correction points
    away from the wall, which is what a contact force produces on a ball
    pressed against it.
    """
    if x_pred is None:
        return False
    prox = layout.r_ball + 0.003 if proximity is None else proximity
    p = np.array([x_pred[IX], x_pred[IY]])
    corr = np.array([x_est[IX] - x_pred[IX], x_est[IY] - x_pred[IY]])
    best, normal = math.inf, None
    for w in layout.walls:
        q = _nearest_on_box(p, w.center[0], w.center[1], w.a, w.b)
        dist = float(np.hypot(*(q - p)))
        if dist < best and dist > 1e-12:
            best, normal = dist, (q - p) / dist
    # the ball center may reach x_frame, the frame surface is r_ball further out
    xw, yw = layout.x_frame + layout.r_ball, layout.y_frame + layout.r_ball
    for dist, n in ((xw - p[0], (1.0, 0.0)), (xw + p[0], (-1.0, 0.0)), (yw - p[1], (0.0, 1.0)), (yw + p[1], (0.0, -1.0))):
        if dist < best:
            best, normal = dist, np.array(n)
    if normal is None or best > prox:
        return False
    dot = float(corr @ normal)
    return dot > 0.0 if toward else dot < 0.0


# --------------------------------------------------------------------------
# angle map

ANGLEMAP_TAG = "angle-map/1"


class AngleMapError(ValueError):
    pass


class AngleMap:
    """Grid of per-cell mean disturbance angles over the plate.

    Cells are ``cell`` wide and cover ``[-x_frame, x_frame] x [-y_frame,
    y_frame]``.  After :meth:`finalize`, queries interpolate bilinearly between
    cell centers and clamp outside the outermost centers.
    """

    def __init__(self, x_frame: float, y_frame: float, cell: float = 0.005):
        if cell <= 0:
            raise AngleMapError("cell size must be positive")
        self.x_frame, self.y_frame, self.cell = float(x_frame), float(y_frame), float(cell)
        self.nx = int(math.ceil(2 * self.x_frame / cell - 1e-9))
        self.ny = int(math.ceil(2 * self.y_frame / cell - 1e-9))
        self.mean = np.zeros((self.ny, self.nx, 2))
        self.count = np.zeros((self.ny, self.nx), dtype=np.int64)
        self.values: Optional[np.ndarray] = None  # filled grid after finalize

    @classmethod
    def for_layout(cls, layout: LabyrinthLayout, cell: float = 0.005) -> "AngleMap":
        return cls(layout.x_frame, layout.y_frame, cell)

    @property
    def finalized(self) -> bool:
        return self.values is not None

    def cell_of(self, pos) -> tuple[int, int]:
        i = int(np.clip((pos[1] + self.y_frame) // self.cell, 0, self.ny - 1))
        j = int(np.clip((pos[0] + self.x_frame) // self.cell, 0, self.nx - 1))
        return i, j

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = -self.x_frame + (np.arange(self.nx) + 0.5) * self.cell
        ys = -self.y_frame + (np.arange(self.ny) + 0.5) * self.cell
        return xs, ys

    def record(self, pos, d) -> None:
        if self.finalized:
            raise AngleMapError("map is finalized")
        i, j = self.cell_of(pos)
        self.count[i, j] += 1
        self.mean[i, j] += (np.asarray(d, dtype=float) - self.mean[i, j]) / self.count[i, j]

    def finalize(self, smooth_cells: float = 1.0) -> "AngleMap":
        """Fill unvisited cells from the nearest visited one, then smooth.

        Returns a new, finalized map; ``smooth_cells`` is the Gaussian
        smoothing width in cells (0 disables it).
        """
        visited = self.count > 0
        if not visited.any():
            raise AngleMapError("cannot finalize a map without samples")
        _, (ii, jj) = ndimage.distance_transform_edt(~visited, return_indices=True)
        grid = self.mean[ii, jj]
        if smooth_cells > 0:
            grid = np.stack([ndimage.gaussian_filter(grid[..., c], smooth_cells, mode="nearest") for c in range(2)], -1)
        out = AngleMap(self.x_frame, self.y_frame, self.cell)
        out.mean, out.count = self.mean.copy(), self.count.copy()
        out.values = grid
        return out

    def query(self, pos) -> np.ndarray:
        if self.values is None:
            raise AngleMapError("query before finalize")
        fx = (pos[0] + self.x_frame) / self.cell - 0.5
        fy = (pos[1] + self.y_frame) / self.cell - 0.5
        fx = min(max(fx, 0.0), self.nx - 1.0)
        fy = min(max(fy, 0.0), self.ny - 1.0)
        j0, i0 = min(int(fx), self.nx - 2), min(int(fy), self.ny - 2)
        j0, i0 = max(j0, 0), max(i0, 0)
        tx, ty = fx - j0, fy - i0
        v = self.values
        j1, i1 = min(j0 + 1, self.nx - 1), min(i0 + 1, self.ny - 1)
        return (
            (1 - tx) * (1 - ty) * v[i0, j0]
            + tx * (1 - ty) * v[i0, j1]
            + (1 - tx) * ty * v[i1, j0]
            + tx * ty * v[i1, j1]
        )

    def rms_error(self, truth: Callable[[float, float], tuple]) -> float:
        """RMS difference to ``truth(x, y)`` over all cell centers."""
        xs, ys = self.centers()
        err = [self.query((x, y)) - np.asarray(truth(x, y)) for y in ys for x in xs]
        return float(np.sqrt(np.mean(np.square(err))))

    # ---- serialization

    def dumps(self) -> str:
        if self.values is None:
            raise AngleMapError("only finalized maps are serialized")
        lines = [
            f"# {ANGLEMAP_TAG}",
            f"shape {self.ny} {self.nx}",
            f"cell {self.cell!r}",
            f"frame {self.x_frame!r} {self.y_frame!r}",
        ]
        for name, arr in (("alpha", self.values[..., 0]), ("beta", self.values[..., 1])):
            lines.append(name)
            lines.extend(" ".join(repr(float(v)) for v in row) for row in arr)
        lines.append("count")
        lines.extend(" ".join(str(int(v)) for v in row) for row in self.count)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "AngleMap":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0].strip() != f"# {ANGLEMAP_TAG}":
            raise AngleMapError(f"not an {ANGLEMAP_TAG} file")
        try:
            ny, nx = (int(v) for v in rows[1].split()[1:3])
            cell = float(rows[2].split()[1])
            xf, yf = (float(v) for v in rows[3].split()[1:3])
            m = cls(xf, yf, cell)
            if (m.ny, m.nx) != (ny, nx):
                raise AngleMapError(f"shape {ny}x{nx} does not match frame and cell size")
            pos = 4

            def block(name, dtype):
                nonlocal pos
                if rows[pos].strip() != name:
                    raise AngleMapError(f"expected block '{name}' at line {pos + 1}")
                arr = np.array([r.split() for r in rows[pos + 1 : pos + 1 + ny]], dtype=dtype)
                if arr.shape != (ny, nx):
                    raise AngleMapError(f"block '{name}' has shape {arr.shape}, expected {(ny, nx)}")
                pos += 1 + ny
                return arr

            a, b = block("alpha", float), block("beta", float)
            m.count = block("count", np.int64)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, AngleMapError):
                raise
            raise AngleMapError(f"malformed angle map: {exc}") from exc
        m.values = np.stack([a, b], -1)
        m.mean = m.values.copy()
        return m

    @classmethod
    def load(cls, path) -> "AngleMap":
        return cls.loads(Path(path).read_text())

    def to_csv(self) -> str:
        xs, ys = self.centers()
        out = ["x,y,alpha,beta,count"]
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                a, b = self.values[i, j] if self.values is not None else self.mean[i, j]
                out.append(f"{x:.4f},{y:.4f},{a:.6g},{b:.6g},{self.count[i, j]}")
        return "\n".join(out) + "\n"

    def ascii(self, component: int = 0, ramp: str = " .:-=+*#%@") -> str:
        """Heat map of one component, top row = largest y."""
        v = (self.values if self.values is not None else self.mean)[..., component]
        lo, hi = float(v.min()), float(v.max())
        span = hi - lo if hi > lo else 1.0
        idx = np.round((v - lo) / span * (len(ramp) - 1)).astype(int)
        rows = ["".join(ramp[k] for k in row) for row in idx[::-1]]
        name = "alpha" if component == 0 else "beta"
        return "\n".join(rows) + f"\n{name}: '{ramp[0]}' = {lo:+.4f} rad, '{ramp[-1]}' = {hi:+.4f} rad\n"


def anglemap_record(m: AngleMap, ball_pos, d) -> AngleMap:
    m.record(ball_pos, d)
    return m


def anglemap_finalize(m: AngleMap) -> AngleMap:
    return m.finalize()


def anglemap_query(m: AngleMap, ball_pos) -> np.ndarray:
    return m.query(ball_pos)


def anglemap_iterate(
    run: Callable[[Optional[AngleMap], bool, AngleMap], None],
    blank: Callable[[], AngleMap],
    iterations: int = 3,
    on_iteration: Optional[Callable[[int, AngleMap], None]] = None,
) -> AngleMap:
    """Learn a map by repeated record runs with the previous map as feed-forward.

    ``run(feedforward, forward, recorder)`` drives one run along the corner
    path (``forward=False`` runs it backwards) and records the total
    disturbance, residual plus feed-forward, into ``recorder``.  Each
    iteration records one forward and one backward run.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    current: Optional[AngleMap] = None
    for it in range(iterations):
        rec = blank()
        run(current, True, rec)
        run(current, False, rec)
        current = rec.finalize()
        if on_iteration is not None:
            on_iteration(it, current)
    return current
