"""Compiled per-stage kernels for the interior-point solver.

Inequality rows at every stage are laid out as::

    [x >= lb (nx) | x <= ub (nx) | u >= lb (nu) | u <= ub (nu) | holes (nh) | walls (nw)]

and expressed as ``g(x, u) >= 0``.  Obstacle rows are written in norm form so
they grow linearly with distance: a hole row is ``(|p - c| - sqrt(lower)) / r``
and a wall row is the weighted l4 norm ``(ex^4 + ey^4)^(1/4) - lower^(1/4)``.
Both describe the same feasible sets as the squared-distance and superellipse
inequalities but linearize far better away from the obstacle.  Rows whose bound is infinite, state rows at stage
0 and input rows at stage N are masked out by ``active``.
"""

import math

import numpy as np
from numba import njit

OK = 0
NOT_PD = 1
TERMINAL_SINGULAR = 2


@njit(cache=True)
def softplus(z):
    if z > 0.0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@njit(cache=True)
def sigmoid(z):
    if z >= 0.0:
        e = math.exp(-z)
        return 1.0 / (1.0 + e)
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def row_value(X, U, k, r, nx, nu, xlb, xub, ulb, uub, holes, walls, hlow, wlow, scale, ipx, ipy):
    nh = holes.shape[0]
    if r < nx:
        return X[k, r] - xlb[k, r]
    r -= nx
    if r < nx:
        return xub[k, r] - X[k, r]
    r -= nx
    if r < nu:
        return U[k, r] - ulb[k, r]
    r -= nu
    if r < nu:
        return uub[k, r] - U[k, r]
    r -= nu
    px = X[k, ipx]
    py = X[k, ipy]
    if r < nh:
        dx = px - holes[r, 0]
        dy = py - holes[r, 1]
        return (math.sqrt(dx * dx + dy * dy) - hlow[k, r]) * scale[nx * 2 + nu * 2 + r]
    r -= nh
    ex = (px - walls[r, 0]) / walls[r, 2]
    ey = (py - walls[r, 1]) / walls[r, 3]
    return math.sqrt(math.sqrt(ex * ex * ex * ex + ey * ey * ey * ey)) - wlow[k, r]


@njit(cache=True)
def stage_obstacle_cost(px, py, obs, w, sharp, dmax):
    c = 0.0
    for j in range(obs.shape[0]):
        dx = px - obs[j, 0]
        dy = py - obs[j, 1]
        d = math.sqrt(dx * dx + dy * dy)
        c += softplus(sharp * (dmax - d))
    return w * c


@njit(cache=True)
def stage_obstacle_grad(px, py, obs, w, sharp, dmax, out):
    """Gradient in ``out[0:2]`` and Gauss-Newton Hessian in ``out[2:5]`` (xx, xy, yy)."""
    out[:] = 0.0
    for j in range(obs.shape[0]):
        dx = px - obs[j, 0]
        dy = py - obs[j, 1]
        d = math.sqrt(dx * dx + dy * dy)
        if d < 1e-12:
            continue
        z = sharp * (dmax - d)
        sg = sigmoid(z)
        ux = dx / d
        uy = dy / d
        out[0] -= w * sharp * sg * ux
        out[1] -= w * sharp * sg * uy
        c2 = w * sharp * sharp * sg * (1.0 - sg)
        out[2] += c2 * ux * ux
        out[3] += c2 * ux * uy
        out[4] += c2 * uy * uy


@njit(cache=True)
def evaluate(X, U, A, B, off, Q, R, xr, ur, obs, w, sharp, dmax,
             xlb, xub, ulb, uub, holes, walls, hlow, wlow, scale, active, tidx, tval, ipx, ipy,
             g, F, T):
    """Cost value; fills inequality rows ``g``, dynamics residual ``F`` and terminal residual ``T``."""
    N = U.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    m = g.shape[1]
    f = 0.0
    for k in range(N + 1):
        if k >= 1:
            for i in range(nx):
                ei = X[k, i] - xr[k, i]
                if ei == 0.0:
                    continue
                for j in range(nx):
                    f += ei * Q[i, j] * (X[k, j] - xr[k, j])
            if obs.shape[0] > 0 and w != 0.0:
                f += stage_obstacle_cost(X[k, ipx], X[k, ipy], obs, w, sharp, dmax)
        if k < N:
            for i in range(nu):
                ei = U[k, i] - ur[k, i]
                for j in range(nu):
                    f += ei * R[i, j] * (U[k, j] - ur[k, j])
            for i in range(nx):
                acc = off[i] - X[k + 1, i]
                for j in range(nx):
                    acc += A[i, j] * X[k, j]
                for j in range(nu):
                    acc += B[i, j] * U[k, j]
                F[k, i] = acc
        for r in range(m):
            if active[k, r]:
                g[k, r] = row_value(X, U, k, r, nx, nu, xlb, xub, ulb, uub, holes, walls, hlow, wlow, scale, ipx, ipy)
            else:
                g[k, r] = 0.0
    for t in range(tidx.shape[0]):
        T[t] = X[N, tidx[t]] - tval[t]
    return f


@njit(cache=True)
def _row_pos_grad(X, k, r0, nx, nu, holes, walls, scale, ipx, ipy, out):
    """Gradient ``out[0:2]`` and Hessian ``out[2:5]`` (xx, yy, xy) of an obstacle row w.r.t. position.

    ``r0`` counts from the first obstacle row.
    """
    nh = holes.shape[0]
    px = X[k, ipx]
    py = X[k, ipy]
    if r0 < nh:
        sc = scale[2 * nx + 2 * nu + r0]
        dx = px - holes[r0, 0]
        dy = py - holes[r0, 1]
        d = max(math.sqrt(dx * dx + dy * dy), 1e-12)
        ux = dx / d
        uy = dy / d
        out[0] = sc * ux
        out[1] = sc * uy
        out[2] = sc * (1.0 - ux * ux) / d
        out[3] = sc * (1.0 - uy * uy) / d
        out[4] = -sc * ux * uy / d
    else:
        r = r0 - nh
        a = walls[r, 2]
        b = walls[r, 3]
        ex = (px - walls[r, 0]) / a
        ey = (py - walls[r, 1]) / b
        n = max(math.sqrt(math.sqrt(ex * ex * ex * ex + ey * ey * ey * ey)), 1e-12)
        n3 = n * n * n
        n7 = n3 * n3 * n
        ex3 = ex * ex * ex
        ey3 = ey * ey * ey
        out[0] = ex3 / (a * n3)
        out[1] = ey3 / (b * n3)
        out[2] = 3.0 * ex * ex / (a * a * n3) - 3.0 * ex3 * ex3 / (a * a * n7)
        out[3] = 3.0 * ey * ey / (b * b * n3) - 3.0 * ey3 * ey3 / (b * b * n7)
        out[4] = -3.0 * ex3 * ey3 / (a * b * n7)


@njit(cache=True)
def cost_gradient(X, U, Q, R, xr, ur, obs, w, sharp, dmax, ipx, ipy, gx, gu):
    N = U.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    tmp = np.zeros(5)
    for k in range(N + 1):
        for i in range(nx):
            gx[k, i] = 0.0
        if k >= 1:
            for i in range(nx):
                acc = 0.0
                for j in range(nx):
                    acc += (Q[i, j] + Q[j, i]) * (X[k, j] - xr[k, j])
                gx[k, i] = acc
            if obs.shape[0] > 0 and w != 0.0:
                stage_obstacle_grad(X[k, ipx], X[k, ipy], obs, w, sharp, dmax, tmp)
                gx[k, ipx] += tmp[0]
                gx[k, ipy] += tmp[1]
        if k < N:
            for i in range(nu):
                acc = 0.0
                for j in range(nu):
                    acc += (R[i, j] + R[j, i]) * (U[k, j] - ur[k, j])
                gu[k, i] = acc


@njit(cache=True)
def constraint_transpose_product(X, lam, active, nx, nu, holes, walls, scale, ipx, ipy, jx, ju):
    """``J' lam`` split into state (``jx``) and input (``ju``) parts."""
    N = ju.shape[0]
    m = lam.shape[1]
    tmp = np.zeros(5)
    jx[:, :] = 0.0
    ju[:, :] = 0.0
    for k in range(N + 1):
        for r in range(m):
            if not active[k, r]:
                continue
            lr = lam[k, r]
            if r < nx:
                jx[k, r] += lr
            elif r < 2 * nx:
                jx[k, r - nx] -= lr
            elif r < 2 * nx + nu:
                ju[k, r - 2 * nx] += lr
            elif r < 2 * nx + 2 * nu:
                ju[k, r - 2 * nx - nu] -= lr
            else:
                _row_pos_grad(X, k, r - 2 * nx - 2 * nu, nx, nu, holes, walls, scale, ipx, ipy, tmp)
                jx[k, ipx] += lr * tmp[0]
                jx[k, ipy] += lr * tmp[1]


@njit(cache=True)
def row_direction(X, dX, dU, active, nx, nu, holes, walls, scale, ipx, ipy, out):
    """Linearized row change ``J dz`` for every active row."""
    N = dU.shape[0]
    m = out.shape[1]
    tmp = np.zeros(5)
    for k in range(N + 1):
        for r in range(m):
            if not active[k, r]:
                out[k, r] = 0.0
                continue
            if r < nx:
                out[k, r] = dX[k, r]
            elif r < 2 * nx:
                out[k, r] = -dX[k, r - nx]
            elif r < 2 * nx + nu:
                out[k, r] = dU[k, r - 2 * nx]
            elif r < 2 * nx + 2 * nu:
                out[k, r] = -dU[k, r - 2 * nx - nu]
            else:
                _row_pos_grad(X, k, r - 2 * nx - 2 * nu, nx, nu, holes, walls, scale, ipx, ipy, tmp)
                out[k, r] = tmp[0] * dX[k, ipx] + tmp[1] * dX[k, ipy]


@njit(cache=True)
def _chol(M, n):
    L = np.zeros((n, n))
    for j in range(n):
        s = M[j, j]
        for p in range(j):
            s -= L[j, p] * L[j, p]
        if not s > 1e-300:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            t = M[i, j]
            for p in range(j):
                t -= L[i, p] * L[j, p]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, rhs):
    """Solve ``L L' X = rhs`` in place for a 2-D ``rhs``."""
    n = L.shape[0]
    c = rhs.shape[1]
    for col in range(c):
        for i in range(n):
            t = rhs[i, col]
            for p in range(i):
                t -= L[i, p] * rhs[p, col]
            rhs[i, col] = t / L[i, i]
        for i in range(n - 1, -1, -1):
            t = rhs[i, col]
            for p in range(i + 1, n):
                t -= L[p, i] * rhs[p, col]
            rhs[i, col] = t / L[i, i]


@njit(cache=True)
def _solve_small(M, b):
    """Gaussian elimination with partial pivoting; returns (x, ok)."""
    n = M.shape[0]
    a = M.copy()
    x = b.copy()
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale = max(scale, abs(a[i, j]))
    for col in range(n):
        piv = col
        for i in range(col + 1, n):
            if abs(a[i, col]) > abs(a[piv, col]):
                piv = i
        if abs(a[piv, col]) <= 1e-13 * max(scale, 1e-300):
            return x, False
        if piv != col:
            for j in range(n):
                tmp = a[col, j]
                a[col, j] = a[piv, j]
                a[piv, j] = tmp
            tmp = x[col]
            x[col] = x[piv]
            x[piv] = tmp
        for i in range(col + 1, n):
            f = a[i, col] / a[col, col]
            for j in range(col, n):
                a[i, j] -= f * a[col, j]
            x[i] -= f * x[col]
    for i in range(n - 1, -1, -1):
        t = x[i]
        for j in range(i + 1, n):
            t -= a[i, j] * x[j]
        x[i] = t / a[i, i]
    return x, True


@njit(cache=True)
def newton_direction(X, U, sig, lam0, lam, reg, A, B, F, T, Q, R, xr, ur, obs, w, sharp, dmax,
                     holes, walls, scale, active, tidx, ipx, ipy, exact,
                     dX, dU, y, nu_t):
    """Primal-dual Newton direction of the barrier problem.

    Slacks and inequality multipliers have already been eliminated: each
    active row contributes ``sig * grad grad'`` to the Hessian and
    ``-lam0 * grad`` to the gradient, while ``lam`` weights the row curvature
    (only when ``exact``; otherwise the Gauss-Newton approximation is used).
    The remaining equality-constrained stage QP is solved with a Riccati
    recursion that carries the terminal-constraint multiplier as an extra
    right-hand side.  Returns ``(code, grad_f . dz)``.
    """
    N = U.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    m = sig.shape[1]
    nT = tidx.shape[0]
    nobs_row0 = 2 * nx + 2 * nu

    gx = np.zeros((N + 1, nx))
    gu = np.zeros((N, nu))
    cost_gradient(X, U, Q, R, xr, ur, obs, w, sharp, dmax, ipx, ipy, gx, gu)

    Hxx = np.zeros((N + 1, nx, nx))
    Huu = np.zeros((N, nu, nu))
    qx = gx.copy()
    qu = gu.copy()
    tmp = np.zeros(5)
    rg = np.zeros(5)
    for k in range(N + 1):
        if k >= 1:
            for i in range(nx):
                for j in range(nx):
                    Hxx[k, i, j] = Q[i, j] + Q[j, i]
                Hxx[k, i, i] += reg
            cxx = 0.0
            cxy = 0.0
            cyy = 0.0
            if obs.shape[0] > 0 and w != 0.0:
                stage_obstacle_grad(X[k, ipx], X[k, ipy], obs, w, sharp, dmax, tmp)
                cxx += tmp[2]
                cxy += tmp[3]
                cyy += tmp[4]
        if k < N:
            for i in range(nu):
                for j in range(nu):
                    Huu[k, i, j] = R[i, j] + R[j, i]
                Huu[k, i, i] += reg
        for r in range(m):
            if not active[k, r]:
                continue
            sg = sig[k, r]
            coef = lam0[k, r]
            if r < nx:
                qx[k, r] -= coef
                Hxx[k, r, r] += sg
            elif r < 2 * nx:
                qx[k, r - nx] += coef
                Hxx[k, r - nx, r - nx] += sg
            elif r < 2 * nx + nu:
                qu[k, r - 2 * nx] -= coef
                Huu[k, r - 2 * nx, r - 2 * nx] += sg
            elif r < nobs_row0:
                qu[k, r - 2 * nx - nu] += coef
                Huu[k, r - 2 * nx - nu, r - 2 * nx - nu] += sg
            else:
                _row_pos_grad(X, k, r - nobs_row0, nx, nu, holes, walls, scale, ipx, ipy, rg)
                qx[k, ipx] -= coef * rg[0]
                qx[k, ipy] -= coef * rg[1]
                cxx += sg * rg[0] * rg[0]
                cxy += sg * rg[0] * rg[1]
                cyy += sg * rg[1] * rg[1]
                if exact:
                    cxx -= lam[k, r] * rg[2]
                    cxy -= lam[k, r] * rg[4]
                    cyy -= lam[k, r] * rg[3]
        if k >= 1:
            Hxx[k, ipx, ipx] += cxx
            Hxx[k, ipx, ipy] += cxy
            Hxx[k, ipy, ipx] += cxy
            Hxx[k, ipy, ipy] += cyy

    # backward Riccati sweep
    P = np.zeros((N + 1, nx, nx))
    p = np.zeros((N + 1, nx))
    G = np.zeros((N + 1, nx, nT))
    K = np.zeros((N, nu, nx))
    kff = np.zeros((N, nu))
    Kv = np.zeros((N, nu, nT))
    P[N] = Hxx[N]
    p[N] = qx[N]
    for t in range(nT):
        G[N, tidx[t], t] = 1.0

    PA = np.zeros((nx, nx))
    PB = np.zeros((nx, nu))
    for k in range(N - 1, -1, -1):
        Pn = P[k + 1]
        for i in range(nx):
            for j in range(nx):
                acc = 0.0
                for l in range(nx):
                    acc += Pn[i, l] * A[l, j]
                PA[i, j] = acc
            for j in range(nu):
                acc = 0.0
                for l in range(nx):
                    acc += Pn[i, l] * B[l, j]
                PB[i, j] = acc
        # Pd + p
        pdp = np.empty(nx)
        for i in range(nx):
            acc = p[k + 1, i]
            for l in range(nx):
                acc += Pn[i, l] * F[k, l]
            pdp[i] = acc
        Ruu = Huu[k].copy()
        for i in range(nu):
            for j in range(nu):
                acc = 0.0
                for l in range(nx):
                    acc += B[l, i] * PB[l, j]
                Ruu[i, j] += acc
        # rhs columns: [Rux (nx) | ru (1) | B'G (nT)]
        rhs = np.zeros((nu, nx + 1 + nT))
        for i in range(nu):
            for j in range(nx):
                acc = 0.0
                for l in range(nx):
                    acc += B[l, i] * PA[l, j]
                rhs[i, j] = acc
            acc = qu[k, i]
            for l in range(nx):
                acc += B[l, i] * pdp[l]
            rhs[i, nx] = acc
            for t in range(nT):
                acc = 0.0
                for l in range(nx):
                    acc += B[l, i] * G[k + 1, l, t]
                rhs[i, nx + 1 + t] = acc
        Rux = rhs[:, :nx].copy()
        ru = rhs[:, nx].copy()
        L, ok = _chol(Ruu, nu)
        if not ok:
            return NOT_PD, 0.0
        _chol_solve(L, rhs)
        for i in range(nu):
            for j in range(nx):
                K[k, i, j] = -rhs[i, j]
            kff[k, i] = -rhs[i, nx]
            for t in range(nT):
                Kv[k, i, t] = -rhs[i, nx + 1 + t]
        if k == 0:
            break
        # P_k = Hxx + A'PA + Rux' K ; p_k = qx + A'(Pd + p) + Rux' kff ; G_k = (A + B K)' G
        for i in range(nx):
            for j in range(nx):
                acc = Hxx[k, i, j]
                for l in range(nx):
                    acc += A[l, i] * PA[l, j]
                for l in range(nu):
                    acc += Rux[l, i] * K[k, l, j]
                P[k, i, j] = acc
            acc = qx[k, i]
            for l in range(nx):
                acc += A[l, i] * pdp[l]
            for l in range(nu):
                acc += Rux[l, i] * kff[k, l]
            p[k, i] = acc
        for i in range(nx):
            for j in range(i + 1, nx):
                v = 0.5 * (P[k, i, j] + P[k, j, i])
                P[k, i, j] = v
                P[k, j, i] = v
        if nT > 0:
            ABK = A.copy()
            for i in range(nx):
                for j in range(nx):
                    acc = 0.0
                    for l in range(nu):
                        acc += B[i, l] * K[k, l, j]
                    ABK[i, j] += acc
            for i in range(nx):
                for t in range(nT):
                    acc = 0.0
                    for l in range(nx):
                        acc += ABK[l, i] * G[k + 1, l, t]
                    G[k, i, t] = acc

    # forward sweep with sensitivities to the terminal multiplier
    M = np.zeros((N + 1, nx, nT))
    MU = np.zeros((N, nu, nT))
    for i in range(nx):
        dX[0, i] = 0.0
    for k in range(N):
        for i in range(nu):
            acc = kff[k, i]
            for j in range(nx):
                acc += K[k, i, j] * dX[k, j]
            dU[k, i] = acc
            for t in range(nT):
                acc = Kv[k, i, t]
                for j in range(nx):
                    acc += K[k, i, j] * M[k, j, t]
                MU[k, i, t] = acc
        for i in range(nx):
            acc = F[k, i]
            for j in range(nx):
                acc += A[i, j] * dX[k, j]
            for j in range(nu):
                acc += B[i, j] * dU[k, j]
            dX[k + 1, i] = acc
            for t in range(nT):
                acc = 0.0
                for j in range(nx):
                    acc += A[i, j] * M[k, j, t]
                for j in range(nu):
                    acc += B[i, j] * MU[k, j, t]
                M[k + 1, i, t] = acc

    for t in range(nT):
        nu_t[t] = 0.0
    if nT > 0:
        S = np.empty((nT, nT))
        rhs_t = np.empty(nT)
        for a in range(nT):
            rhs_t[a] = -T[a] - dX[N, tidx[a]]
            for b in range(nT):
                S[a, b] = M[N, tidx[a], b]
        # -S must be positive definite, otherwise the reduced Hessian has the wrong inertia
        negS = np.empty((nT, nT))
        for a in range(nT):
            for b in range(nT):
                negS[a, b] = -0.5 * (S[a, b] + S[b, a])
        _, pd = _chol(negS, nT)
        if not pd:
            return NOT_PD, 0.0
        sol, ok = _solve_small(S, rhs_t)
        if not ok:
            return TERMINAL_SINGULAR, 0.0
        for t in range(nT):
            nu_t[t] = sol[t]
        for k in range(N + 1):
            for i in range(nx):
                acc = 0.0
                for t in range(nT):
                    acc += M[k, i, t] * sol[t]
                dX[k, i] += acc
            if k < N:
                for i in range(nu):
                    acc = 0.0
                    for t in range(nT):
                        acc += MU[k, i, t] * sol[t]
                    dU[k, i] += acc

    for k in range(N):
        for i in range(nx):
            acc = p[k + 1, i]
            for j in range(nx):
                acc += P[k + 1, i, j] * dX[k + 1, j]
            for t in range(nT):
                acc += G[k + 1, i, t] * nu_t[t]
            y[k, i] = acc

    df = 0.0
    for k in range(N + 1):
        for i in range(nx):
            df += gx[k, i] * dX[k, i]
        if k < N:
            for i in range(nu):
                df += gu[k, i] * dU[k, i]
    return OK, df


@njit(cache=True)
def stationarity(X, U, y, nu_t, lam, A, B, Q, R, xr, ur, obs, w, sharp, dmax,
                 holes, walls, scale, active, tidx, ipx, ipy):
    """Max-norm of the Lagrangian gradient with respect to ``x_1..x_N, u_0..u_{N-1}``."""
    N = U.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    gx = np.zeros((N + 1, nx))
    gu = np.zeros((N, nu))
    cost_gradient(X, U, Q, R, xr, ur, obs, w, sharp, dmax, ipx, ipy, gx, gu)
    jx = np.zeros((N + 1, nx))
    ju = np.zeros((N, nu))
    constraint_transpose_product(X, lam, active, nx, nu, holes, walls, scale, ipx, ipy, jx, ju)
    err = 0.0
    for k in range(1, N + 1):
        for i in range(nx):
            v = gx[k, i] - jx[k, i] - y[k - 1, i]
            if k < N:
                for l in range(nx):
                    v += A[l, i] * y[k, l]
            else:
                for t in range(tidx.shape[0]):
                    if tidx[t] == i:
                        v += nu_t[t]
            err = max(err, abs(v))
    for k in range(N):
        for i in range(nu):
            v = gu[k, i] - ju[k, i]
            for l in range(nx):
                v += B[l, i] * y[k, l]
            err = max(err, abs(v))
    return err


# --------------------------------------------------------------------------
# row-wise interior-point bookkeeping
#
# Every active row carries a slack ``s`` and multiplier ``lam``; elastic rows
# additionally carry ``v`` (penalized violation) and its multiplier ``zv``,
# with ``g + v - s = 0``.


@njit(cache=True)
def row_errors(g, s, v, lam, zv, active, elastic, pen, mu, out):
    """Fill ``out`` with max-norm residuals of the row conditions.

    ``out = [viol, comp_g, short, over, r4, |s lam - mu|, |v zv - mu|, s lam, v zv]``.
    """
    for i in range(out.shape[0]):
        out[i] = 0.0
    n0, n1 = g.shape
    for k in range(n0):
        for r in range(n1):
            if not active[k, r]:
                continue
            gr = g[k, r]
            if -gr > out[0]:
                out[0] = -gr
            c = abs(gr * lam[k, r])
            if c > out[1]:
                out[1] = c
            vr = v[k, r] if elastic[k, r] else 0.0
            sh = s[k, r] - gr - vr
            if sh > out[2]:
                out[2] = sh
            if abs(sh) > out[3]:
                out[3] = abs(sh)
            sl = s[k, r] * lam[k, r]
            if abs(sl - mu) > out[5]:
                out[5] = abs(sl - mu)
            if sl > out[7]:
                out[7] = sl
            if elastic[k, r]:
                r4 = abs(pen - lam[k, r] - zv[k, r])
                if r4 > out[4]:
                    out[4] = r4
                vz = vr * zv[k, r]
                if abs(vz - mu) > out[6]:
                    out[6] = abs(vz - mu)
                if vz > out[8]:
                    out[8] = vz


@njit(cache=True)
def eliminate_rows(g, s, v, lam, zv, active, elastic, pen, mu, sig, lam0, r4):
    """Condensed row weights ``sig`` and multiplier predictors ``lam0``."""
    n0, n1 = g.shape
    for k in range(n0):
        for r in range(n1):
            if not active[k, r]:
                sig[k, r] = 0.0
                lam0[k, r] = 0.0
                r4[k, r] = 0.0
                continue
            w = s[k, r] / lam[k, r]
            rhs = -g[k, r] + mu / lam[k, r]
            if elastic[k, r]:
                rr = pen - lam[k, r] - zv[k, r]
                r4[k, r] = rr
                w += v[k, r] / zv[k, r]
                rhs -= (mu - v[k, r] * rr) / zv[k, r]
            else:
                r4[k, r] = 0.0
            sig[k, r] = 1.0 / w
            lam0[k, r] = lam[k, r] + rhs / w


@njit(cache=True)
def recover_rows(s, v, lam, zv, sig, lam0, r4, jdz, active, elastic, mu, tau, ds, dv, dlam, dzv):
    """Row steps from the primal step ``jdz = J dz``.

    Returns ``(a_p, a_d, dbar, dvsum)``: fraction-to-boundary step limits,
    ``sum(ds / s) + sum(dv / v)`` and ``sum(dv)`` for the barrier directional
    derivative.
    """
    a_p = 1.0
    a_d = 1.0
    dbar = 0.0
    dvsum = 0.0
    n0, n1 = s.shape
    for k in range(n0):
        for r in range(n1):
            if not active[k, r]:
                ds[k, r] = 0.0
                dv[k, r] = 0.0
                dlam[k, r] = 0.0
                dzv[k, r] = 0.0
                continue
            dl = lam0[k, r] - sig[k, r] * jdz[k, r] - lam[k, r]
            dlam[k, r] = dl
            dsr = mu / lam[k, r] - s[k, r] - s[k, r] / lam[k, r] * dl
            ds[k, r] = dsr
            dbar += dsr / s[k, r]
            if dsr < 0.0:
                a_p = min(a_p, -tau * s[k, r] / dsr)
            if dl < 0.0:
                a_d = min(a_d, -tau * lam[k, r] / dl)
            if elastic[k, r]:
                dz = r4[k, r] - dl
                dzv[k, r] = dz
                dvr = mu / zv[k, r] - v[k, r] - v[k, r] / zv[k, r] * dz
                dv[k, r] = dvr
                dbar += dvr / v[k, r]
                dvsum += dvr
                if dvr < 0.0:
                    a_p = min(a_p, -tau * v[k, r] / dvr)
                if dz < 0.0:
                    a_d = min(a_d, -tau * zv[k, r] / dz)
            else:
                dzv[k, r] = 0.0
                dv[k, r] = 0.0
    return a_p, a_d, dbar, dvsum


@njit(cache=True)
def trial_rows(g_t, s, ds, v, dv, alpha, active, elastic, pen, mu, st, vt):
    """Trial slacks; returns ``(shortfall sum, barrier terms)``.

    Slacks absorb over-satisfaction (``s = max(s + alpha ds, g + v)``), so only
    a shortfall ``s > g + v`` counts as constraint violation.
    """
    short = 0.0
    bar = 0.0
    n0, n1 = s.shape
    for k in range(n0):
        for r in range(n1):
            if not active[k, r]:
                st[k, r] = 1.0
                vt[k, r] = 1.0
                continue
            vr = 0.0
            if elastic[k, r]:
                vr = v[k, r] + alpha * dv[k, r]
                vt[k, r] = vr
                bar += pen * vr - mu * math.log(vr)
            else:
                vt[k, r] = 1.0
            sr = s[k, r] + alpha * ds[k, r]
            gap = sr - g_t[k, r] - vr
            if gap > 0.0:
                short += gap
                st[k, r] = sr
            else:
                st[k, r] = g_t[k, r] + vr
            bar -= mu * math.log(st[k, r])
    return short, bar


@njit(cache=True)
def barrier_value(s, v, active, elastic, pen, mu):
    bar = 0.0
    n0, n1 = s.shape
    for k in range(n0):
        for r in range(n1):
            if active[k, r]:
                bar -= mu * math.log(s[k, r])
                if elastic[k, r]:
                    bar += pen * v[k, r] - mu * math.log(v[k, r])
    return bar


@njit(cache=True)
def shortfall(g, s, v, active, elastic):
    short = 0.0
    n0, n1 = s.shape
    for k in range(n0):
        for r in range(n1):
            if active[k, r]:
                gap = s[k, r] - g[k, r] - (v[k, r] if elastic[k, r] else 0.0)
                if gap > 0.0:
                    short += gap
    return short


@njit(cache=True)
def update_duals(lam, zv, dlam, dzv, s, v, active, elastic, a_d, mu):
    """Dual step with the safeguard ``mu / (1e10 s) <= lam <= 1e10 mu / s``."""
    n0, n1 = s.shape
    for k in range(n0):
        for r in range(n1):
            if not active[k, r]:
                lam[k, r] = 0.0
                zv[k, r] = 0.0
                continue
            l = lam[k, r] + a_d * dlam[k, r]
            lam[k, r] = min(max(l, mu / (1e10 * s[k, r])), 1e10 * mu / s[k, r])
            if elastic[k, r]:
                z = zv[k, r] + a_d * dzv[k, r]
                zv[k, r] = min(max(z, mu / (1e10 * v[k, r])), 1e10 * mu / v[k, r])
            else:
                zv[k, r] = 0.0
