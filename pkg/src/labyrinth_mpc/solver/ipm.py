"""Primal-dual interior-point method for :class:`HorizonNlp` problems.

Each iteration eliminates slacks and inequality multipliers from the
perturbed KKT system and solves the remaining stage-structured QP with a
Riccati sweep (cost linear in the horizon).  Steps are limited by the
fraction-to-boundary rule and accepted by a backtracking filter line search
on (constraint violation, barrier objective).  The barrier parameter follows
a monotone schedule.  The Hessian is Gauss-Newton by default: constraint
curvature is left out, which keeps the reduced QP convex.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as kn
from .nlp import INFEASIBLE, MAX_ITER, SOLVED, TIMEOUT, POS_IDX, HorizonNlp, Multipliers, NonFiniteError, SolveResult


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 200
    mu0: float = 0.1
    mu_min: float = 1e-9
    mu_factor: float = 0.2
    kappa_eps: float = 10.0
    slack_floor: float = 1e-2
    armijo: float = 1e-4
    max_backtracks: int = 30
    reg_init: float = 1e-8
    elastic_penalty: float = 1000.0
    exact_hessian: bool = False
    record_log: bool = False
    log_path: Optional[str] = None


class _Packed:
    """Contiguous arrays handed to the compiled kernels."""

    def __init__(self, nlp: HorizonNlp):
        N, nx, nu = nlp.N, nlp.nx, nlp.nu
        nh, nw = len(nlp.holes), len(nlp.walls)
        m = nlp.n_rows
        self.N, self.nx, self.nu, self.m = N, nx, nu, m
        active = np.zeros((N + 1, m), dtype=np.bool_)
        active[1:, :nx] = np.isfinite(nlp.x_lb[1:])
        active[1:, nx : 2 * nx] = np.isfinite(nlp.x_ub[1:])
        active[:N, 2 * nx : 2 * nx + nu] = np.isfinite(nlp.u_lb)
        active[:N, 2 * nx + nu : 2 * nx + 2 * nu] = np.isfinite(nlp.u_ub)
        active[1:, 2 * nx + 2 * nu :] = True
        self.active = active
        # input boxes stay hard; state bounds and obstacles are elastic
        elastic = active.copy()
        elastic[:, 2 * nx : 2 * nx + 2 * nu] = False
        self.elastic = elastic
        self.has_ineq = bool(active.any())
        scale = np.ones(m)
        scale[2 * nx + 2 * nu : 2 * nx + 2 * nu + nh] = 1.0 / nlp.holes[:, 2]
        self.scale = scale
        fin = lambda a: np.ascontiguousarray(np.where(np.isfinite(a), a, 0.0))
        self.xlb, self.xub = fin(nlp.x_lb), fin(nlp.x_ub)
        self.ulb = fin(np.vstack([nlp.u_lb, np.zeros((1, nu))]))
        self.uub = fin(np.vstack([nlp.u_ub, np.zeros((1, nu))]))
        self.A, self.B, self.off = nlp.A, nlp.B, nlp.offset
        self.Q, self.R = nlp.Q, nlp.R
        self.xr, self.ur = nlp.x_ref, nlp.u_ref
        self.obs = nlp.obs_points
        self.w, self.sharp, self.dmax = float(nlp.obs_weight), float(nlp.obs_sharpness), float(nlp.obs_dmax)
        self.holes, self.walls = nlp.holes, nlp.walls
        # obstacle rows are in norm form, so their lower bounds are too
        self.hlow = np.sqrt(np.maximum(nlp.hole_lower, 0.0))
        self.wlow = np.maximum(nlp.wall_lower, 0.0) ** 0.25
        self.tidx, self.tval = nlp.terminal_idx, nlp.terminal_val
        self.ipx, self.ipy = POS_IDX
        self.g = np.zeros((N + 1, m))
        self.F = np.zeros((N, nx))
        self.T = np.zeros(len(self.tidx))

    def evaluate(self, X, U, g=None, F=None, T=None):
        g = self.g if g is None else g
        F = self.F if F is None else F
        T = self.T if T is None else T
        return kn.evaluate(
            X, U, self.A, self.B, self.off, self.Q, self.R, self.xr, self.ur, self.obs, self.w, self.sharp, self.dmax,
            self.xlb, self.xub, self.ulb, self.uub, self.holes, self.walls, self.hlow, self.wlow, self.scale,
            self.active, self.tidx, self.tval, self.ipx, self.ipy, g, F, T,
        )

    def stationarity(self, X, U, y, nu_t, lam):
        return kn.stationarity(
            X, U, y, nu_t, lam, self.A, self.B, self.Q, self.R, self.xr, self.ur, self.obs, self.w, self.sharp,
            self.dmax, self.holes, self.walls, self.scale, self.active, self.tidx, self.ipx, self.ipy,
        )


def _check_finite(f, g, F, T, X):
    if math.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(F)) and np.all(np.isfinite(T)):
        return
    bad = ~np.isfinite(g).all(axis=1)
    bad[:-1] |= ~np.isfinite(F).all(axis=1)
    bad |= ~np.isfinite(X).all(axis=1)
    stage = int(np.argmax(bad)) if bad.any() else len(X) - 1
    raise NonFiniteError(stage, "function value")


def solve(
    nlp: HorizonNlp,
    budget: Optional[float] = None,
    options: Optional[SolverOptions] = None,
    abort: Optional[threading.Event] = None,
) -> SolveResult:
    """Solve ``nlp`` starting from its initial guess.

    State-bound and obstacle rows are elastic: ``g + v - s = 0`` with
    ``s, v >= 0`` and ``v`` penalized linearly, which bounds their
    multipliers and lets intermediate iterates pass through obstacles.  A
    converged point with nonzero ``v`` is reported as infeasible.

    ``budget`` is a wall-clock limit in seconds; when it expires (or ``abort``
    is set) the best iterate so far is returned with status ``timeout``.
    """
    opt = options or SolverOptions()
    t_start = time.perf_counter()
    pk = _Packed(nlp)
    N, nx, nu, m = pk.N, pk.nx, pk.nu, pk.m
    act = pk.active
    ela = pk.elastic
    hard = act & ~ela
    pen = opt.elastic_penalty

    X = nlp.x_guess.copy()
    X[0] = nlp.x0
    U = nlp.u_guess.copy()
    f = pk.evaluate(X, U)
    _check_finite(f, pk.g, pk.F, pk.T, X)

    mu = opt.mu0 if pk.has_ineq else 0.0
    s = np.where(act, np.maximum(pk.g, opt.slack_floor), 1.0)
    v = np.where(ela, np.maximum(s - pk.g, opt.slack_floor), 1.0)
    lam = np.where(act, np.minimum(mu / s, 0.5 * pen), 0.0) if pk.has_ineq else np.zeros((N + 1, m))
    zv = np.where(ela, mu / v, 0.0) if pk.has_ineq else np.zeros((N + 1, m))
    y = np.zeros((N, nx))
    nu_t = np.zeros(len(pk.tidx))
    reg = 0.0

    dX = np.zeros((N + 1, nx))
    dU = np.zeros((N, nu))
    y_new = np.zeros((N, nx))
    nu_new = np.zeros(len(pk.tidx))
    rows = {name: np.zeros((N + 1, m)) for name in ("jdz", "sig", "lam0", "r4", "ds", "dv", "dlam", "dzv", "st", "vt")}
    jdz, sig, lam0, r4 = rows["jdz"], rows["sig"], rows["lam0"], rows["r4"]
    ds, dv, dlam, dzv = rows["ds"], rows["dv"], rows["dlam"], rows["dzv"]
    g_t = np.zeros((N + 1, m))
    F_t = np.zeros((N, nx))
    T_t = np.zeros(len(pk.tidx))
    rerr = np.zeros(9)

    status = MAX_ITER
    best = None
    log = []
    kkt = math.inf
    it = 0
    step = dict(alpha=0.0, a_p=0.0, a_d=0.0, dphi=0.0, theta=0.0)
    filt: list = []
    theta_max = theta_min = None

    def eq_norm(F_, T_):
        return max(float(np.max(np.abs(F_))) if F_.size else 0.0, float(np.max(np.abs(T_))) if T_.size else 0.0)

    def theta(F_, T_, short_):
        return float(np.abs(F_).sum() + np.abs(T_).sum()) + short_

    def errors():
        """Original-problem KKT error, elastic-problem error at ``mu`` and at 0, and violation."""
        stat = pk.stationarity(X, U, y, nu_t, lam)
        eq = eq_norm(pk.F, pk.T)
        kn.row_errors(pk.g, s, v, lam, zv, act, ela, pen, mu, rerr)
        viol, comp_g, short, over, r4m, slmu, vzmu, sl0, vz0 = rerr
        kkt = max(stat, eq, viol, comp_g)
        e_mu = max(stat, eq, short, r4m, slmu, vzmu)
        e_0 = max(stat, eq, over, r4m, sl0, vz0)
        return stat, kkt, e_mu, e_0, viol

    for it in range(opt.max_iter + 1):
        stat, kkt, e_mu, e_0, viol = errors()
        if best is None or kkt < best[0]:
            best = (kkt, X.copy(), U.copy(), y.copy(), nu_t.copy(), lam.copy(), s.copy(), f)
        if opt.record_log:
            log.append(dict(it=it, f=f, kkt=kkt, stat=stat, e_mu=e_mu, viol=viol, mu=mu, reg=reg, **step))
        if kkt <= opt.tol:
            status = SOLVED
            break
        if e_0 <= opt.tol and viol > opt.tol:
            # stationary for the elastic problem but the original constraints are violated
            status = INFEASIBLE
            break
        if it == opt.max_iter:
            break
        if (budget is not None and time.perf_counter() - t_start > budget) or (abort is not None and abort.is_set()):
            status = TIMEOUT
            break
        if pk.has_ineq:
            while e_mu <= opt.kappa_eps * mu and mu > opt.mu_min:
                mu = max(opt.mu_min, min(opt.mu_factor * mu, mu**1.5))
                _, _, e_mu, _, _ = errors()
                filt = []

        # eliminate s, v and their multipliers row by row
        kn.eliminate_rows(pk.g, s, v, lam, zv, act, ela, pen, mu, sig, lam0, r4)

        reg_try = reg
        while True:
            code, df = kn.newton_direction(
                X, U, sig, lam0, lam, reg_try, pk.A, pk.B, pk.F, pk.T, pk.Q, pk.R, pk.xr, pk.ur, pk.obs, pk.w,
                pk.sharp, pk.dmax, pk.holes, pk.walls, pk.scale, act, pk.tidx, pk.ipx, pk.ipy, opt.exact_hessian,
                dX, dU, y_new, nu_new,
            )
            if code == kn.NOT_PD:
                reg_try = max(opt.reg_init, 10.0 * reg_try)
                if reg_try > 1e8:
                    break
                continue
            break
        if code != kn.OK:
            status = INFEASIBLE
            break
        reg = reg_try / 10.0 if reg_try > opt.reg_init else 0.0

        kn.row_direction(X, dX, dU, act, nx, nu, pk.holes, pk.walls, pk.scale, pk.ipx, pk.ipy, jdz)
        tau = max(0.99, 1.0 - mu)
        a_p, a_d, dbar, dvsum = kn.recover_rows(s, v, lam, zv, sig, lam0, r4, jdz, act, ela, mu, tau, ds, dv, dlam, dzv)

        th0 = theta(pk.F, pk.T, kn.shortfall(pk.g, s, v, act, ela))
        phi0 = f + kn.barrier_value(s, v, act, ela, pen, mu)
        if theta_max is None:
            theta_max = 1e4 * max(1.0, th0)
            theta_min = 1e-4 * max(1.0, th0)
        D = df + pen * dvsum - mu * dbar

        alpha = a_p
        accepted = False
        f_type = False
        st, vt = rows["st"], rows["vt"]
        for _ in range(opt.max_backtracks):
            Xt = X + alpha * dX
            Ut = U + alpha * dU
            ft = pk.evaluate(Xt, Ut, g_t, F_t, T_t)
            short_t, bar_t = kn.trial_rows(g_t, s, ds, v, dv, alpha, act, ela, pen, mu, st, vt)
            if math.isfinite(ft):
                th = theta(F_t, T_t, short_t)
                ph = ft + bar_t
                tiny = -D <= 1e-11 * max(1.0, abs(phi0)) and th0 <= theta_min
                switching = D < 0 and th0 <= theta_min and alpha * (-D) ** 2.3 > th0**1.1
                if tiny:
                    accepted = True
                elif th > theta_max or any(th >= th_j and ph >= ph_j for th_j, ph_j in filt):
                    pass
                elif switching:
                    if ph <= phi0 + opt.armijo * alpha * D + 1e-14 * abs(phi0):
                        accepted, f_type = True, True
                elif th <= (1 - 1e-5) * th0 or ph <= phi0 - 1e-5 * th0:
                    accepted = True
                if accepted:
                    break
            alpha *= 0.5
        if accepted and not f_type:
            filt.append(((1 - 1e-5) * th0, phi0 - 1e-5 * th0))
        if not accepted:
            # no acceptable step: take the shortest trial and restart the filter
            filt = []
            reg = max(reg * 10.0, 1e-6)
        step = dict(alpha=alpha, a_p=a_p, a_d=a_d, dphi=D, theta=th0)
        X, U = Xt, Ut
        X[0] = nlp.x0
        f = ft
        pk.g[:], pk.F[:], pk.T[:] = g_t, F_t, T_t
        _check_finite(f, pk.g, pk.F, pk.T, X)
        s = st.copy()
        v = vt.copy()
        y = y + alpha * (y_new - y)
        nu_t = nu_t + alpha * (nu_new - nu_t)
        if pk.has_ineq:
            kn.update_duals(lam, zv, dlam, dzv, s, v, act, ela, min(a_d, 1.0), mu)

    if status not in (SOLVED, INFEASIBLE) and best is not None and best[0] < kkt:
        kkt, X, U, y, nu_t, lam, s, f = best
    wall = time.perf_counter() - t_start
    if opt.log_path and log:
        with open(opt.log_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(log[0].keys()))
            wr.writeheader()
            wr.writerows(log)
    return SolveResult(
        status=status,
        x=X.copy(),
        u=U.copy(),
        kkt=float(kkt),
        iterations=it,
        wall_time=wall,
        cost=float(f),
        multipliers=Multipliers(y.copy(), nu_t.copy(), lam.copy()),
        slacks=s.copy(),
        mu=mu,
        log=log,
    )


def kkt_residual(nlp: HorizonNlp, x: np.ndarray, u: np.ndarray, multipliers: Multipliers) -> float:
    """Max-norm of stationarity, primal feasibility and complementarity at a point.

    Inequality multipliers refer to the solver's row layout, in which obstacle
    rows are in norm form (see :mod:`.kernels`).
    """
    pk = _Packed(nlp)
    X = np.ascontiguousarray(x, dtype=float).copy()
    X[0] = nlp.x0
    U = np.ascontiguousarray(u, dtype=float)
    pk.evaluate(X, U)
    lam = np.where(pk.active, multipliers.ineq, 0.0)
    stat = pk.stationarity(X, U, np.ascontiguousarray(multipliers.dyn), np.asarray(multipliers.terminal, dtype=float), lam)
    act = pk.active
    parts = [stat]
    if nlp.N:
        parts.append(float(np.max(np.abs(pk.F))))
    if len(pk.T):
        parts.append(float(np.max(np.abs(pk.T))))
    if act.any():
        parts.append(float(np.max(np.maximum(-pk.g[act], 0.0))))
        parts.append(float(np.max(np.abs(pk.g[act] * lam[act]))))
        parts.append(float(np.max(np.maximum(-lam[act], 0.0))))
    return float(max(parts))


def evaluate_problem(nlp: HorizonNlp, x: np.ndarray, u: np.ndarray):
    """Cost, inequality rows ``(N+1, n_rows)``, active mask, dynamics and terminal residuals."""
    pk = _Packed(nlp)
    X = np.ascontiguousarray(x, dtype=float).copy()
    U = np.ascontiguousarray(u, dtype=float)
    f = pk.evaluate(X, U)
    return f, pk.g.copy(), pk.active.copy(), pk.F.copy(), pk.T.copy()
