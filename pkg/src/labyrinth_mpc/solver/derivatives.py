"""Finite-difference check of the analytic derivatives used by the solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as kn
from .ipm import _Packed
from .nlp import HorizonNlp


@dataclass
class DerivativeReport:
    """Max relative error per block, ``|analytic - fd| / max(1, |analytic|, |fd|)``."""

    cost: float
    constraints: float
    dynamics: float
    terminal: float
    worst: tuple  # (block, decision-variable index) of the overall maximum

    @property
    def max_error(self) -> float:
        return max(self.cost, self.constraints, self.dynamics, self.terminal)


def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def check_derivatives(nlp: HorizonNlp, point=None, step: float = 1e-7) -> DerivativeReport:
    """Compare analytic derivatives at ``point`` with central differences.

    ``point`` is ``(x, u)`` with ``x`` of shape ``(N + 1, nx)`` (``x[0]`` is
    ignored, the initial state is fixed) and ``u`` of shape ``(N, nu)``;
    defaults to the initial guess.  The step is scaled by ``max(1, |z_i|)``.
    The small default suits the sharp softplus proximity cost; smooth blocks
    are insensitive to it.
    """
    pk = _Packed(nlp)
    N, nx, nu, m = pk.N, pk.nx, pk.nu, pk.m
    if point is None:
        X = nlp.x_guess.copy()
        U = nlp.u_guess.copy()
    else:
        X = np.array(point[0], dtype=float, copy=True)
        U = np.array(point[1], dtype=float, copy=True)
    X[0] = nlp.x0
    X = np.ascontiguousarray(X)
    U = np.ascontiguousarray(U)
    act = pk.active
    n_t = len(pk.tidx)

    def blocks(Xp, Up):
        g = np.zeros((N + 1, m))
        F = np.zeros((N, nx))
        T = np.zeros(n_t)
        f = pk.evaluate(Xp, Up, g, F, T)
        return f, g[act], F.ravel(), T

    gx = np.zeros((N + 1, nx))
    gu = np.zeros((N, nu))
    kn.cost_gradient(X, U, pk.Q, pk.R, pk.xr, pk.ur, pk.obs, pk.w, pk.sharp, pk.dmax, pk.ipx, pk.ipy, gx, gu)

    # decision variables: x_1..x_N then u_0..u_{N-1}
    n_var = N * nx + N * nu
    err = {"cost": 0.0, "constraints": 0.0, "dynamics": 0.0, "terminal": 0.0}
    worst = ("cost", -1)
    worst_val = -1.0
    dX = np.zeros((N + 1, nx))
    dU = np.zeros((N, nu))
    jd = np.zeros((N + 1, m))
    for i in range(n_var):
        dX[:] = 0.0
        dU[:] = 0.0
        if i < N * nx:
            k, j = divmod(i, nx)
            k += 1
            dX[k, j] = 1.0
            z = X[k, j]
            a_cost = gx[k, j]
        else:
            k, j = divmod(i - N * nx, nu)
            dU[k, j] = 1.0
            z = U[k, j]
            a_cost = gu[k, j]
        h = step * max(1.0, abs(z))
        fp, gp, Fp, Tp = blocks(X + h * dX, U + h * dU)
        fm, gm, Fm, Tm = blocks(X - h * dX, U - h * dU)

        kn.row_direction(X, dX, dU, act, nx, nu, pk.holes, pk.walls, pk.scale, pk.ipx, pk.ipy, jd)
        dF = dX[:-1] @ pk.A.T + dU @ pk.B.T - dX[1:]
        dT = dX[N, pk.tidx]

        checks = (
            ("cost", np.atleast_1d(a_cost), np.atleast_1d((fp - fm) / (2 * h))),
            ("constraints", jd[act], (gp - gm) / (2 * h)),
            ("dynamics", dF.ravel(), (Fp - Fm) / (2 * h)),
            ("terminal", dT, (Tp - Tm) / (2 * h)),
        )
        for name, a, fd in checks:
            if a.size == 0:
                continue
            e = float(np.max(_rel(a, fd)))
            if e > err[name]:
                err[name] = e
            if e > worst_val:
                worst_val = e
                worst = (name, i)
    return DerivativeReport(worst=worst, **err)
