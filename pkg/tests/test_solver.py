import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog, minimize

from labyrinth_mpc.dynamics import IX, IY, build_linear_model
from labyrinth_mpc.solver import kernels as kn
from labyrinth_mpc.solver import (
    INFEASIBLE,
    SOLVED,
    TIMEOUT,
    HorizonNlp,
    NlpDimensionError,
    NonFiniteError,
    SolverOptions,
    check_derivatives,
    evaluate_problem,
    kkt_residual,
    solve,
)

MODEL = build_linear_model()
Q = np.diag([10.0, 1.0, 10.0, 1.0, 0.0, 0.0])
R = np.diag([0.1, 0.1])


def _nlp(**kw):
    base = dict(N=30, A=MODEL.A, B=MODEL.B, x0=np.zeros(6), Q=Q, R=R, x_ref=np.zeros(6), u_ref=np.zeros(2))
    base.update(kw)
    return HorizonNlp(**base)


def _scipy_oracle(nlp):
    """Same problem through SLSQP on the condensed input variables."""
    N, nx, nu = nlp.N, nlp.nx, nlp.nu

    def rollout(z):
        U = z.reshape(N, nu)
        X = np.empty((N + 1, nx))
        X[0] = nlp.x0
        for k in range(N):
            X[k + 1] = nlp.A @ X[k] + nlp.B @ U[k] + nlp.offset
        return X, U

    def cost(z):
        X, U = rollout(z)
        ex = X[1:] - nlp.x_ref[1:]
        eu = U - nlp.u_ref
        return float(np.einsum("ki,ij,kj->", ex, nlp.Q, ex) + np.einsum("ki,ij,kj->", eu, nlp.R, eu))

    cons = []
    if len(nlp.holes):
        def hole_rows(z):
            X, _ = rollout(z)
            P = X[1:, [IX, IY]]
            return (np.sum((P[:, None] - nlp.holes[None, :, :2]) ** 2, -1) - nlp.hole_lower[1:]).ravel()
        cons.append({"type": "ineq", "fun": hole_rows})
    bounds = [(lo, hi) for lo, hi in zip(np.ravel(nlp.u_lb), np.ravel(nlp.u_ub))]
    res = minimize(cost, np.ravel(nlp.u_guess), method="SLSQP", bounds=bounds, constraints=cons,
                   options={"ftol": 1e-14, "maxiter": 2000})  # fmt: skip
    assert res.success, res.message
    return rollout(res.x), res.fun


def test_input_bounds_match_reference_optimizer():
    nlp = _nlp(N=12, x0=np.array([0.05, 0, -0.03, 0, 0, 0]), u_lb=np.full(2, -0.1), u_ub=np.full(2, 0.1))
    res = solve(nlp)
    assert res.status == SOLVED
    (X, U), f = _scipy_oracle(nlp)
    assert np.max(np.abs(res.u)) == pytest.approx(0.1, abs=1e-5)  # bound is active
    # the cost is nearly flat along some input sequences, so inputs agree less tightly than the cost
    np.testing.assert_allclose(res.u, U, atol=1e-3)
    assert res.cost == pytest.approx(f, rel=1e-6)


def test_hole_avoidance_matches_reference_optimizer():
    hole = np.array([[0.0, 0.002, 0.01]])
    nlp = _nlp(N=40, x0=np.array([-0.04, 0, 0, 0, 0, 0]), x_ref=np.array([0.04, 0, 0, 0, 0, 0]),
               u_lb=np.full(2, -5.0), u_ub=np.full(2, 5.0), holes=hole)  # fmt: skip
    res = solve(nlp, options=SolverOptions(tol=1e-8))
    assert res.status == SOLVED
    d2 = np.sum((res.x[1:, [IX, IY]] - hole[0, :2]) ** 2, axis=1)
    assert d2.min() >= hole[0, 2] ** 2 - 1e-9
    assert d2.min() == pytest.approx(hole[0, 2] ** 2, rel=1e-4)  # touches the boundary
    nlp.u_guess = res.u.copy()
    (_, _), f = _scipy_oracle(nlp)
    assert res.cost == pytest.approx(f, rel=1e-5)


def test_kkt_residual_at_solution():
    walls = np.array([[0.0, 0.02, 0.03, 0.008]])
    nlp = _nlp(N=40, x0=np.array([-0.04, 0, 0.03, 0, 0, 0]), x_ref=np.array([0.04, 0, 0.03, 0, 0, 0]),
               x_lb=np.array([-0.1, -np.inf, -0.1, -np.inf, -0.1, -0.1]), x_ub=np.array([0.1, np.inf, 0.1, np.inf, 0.1, 0.1]),
               u_lb=np.full(2, -5.0), u_ub=np.full(2, 5.0), walls=walls, terminal_idx=(IX, IY), terminal_val=(0.04, 0.03))  # fmt: skip
    res = solve(nlp)
    assert res.status == SOLVED
    assert kkt_residual(nlp, res.x, res.u, res.multipliers) <= 1e-5
    f, g, active, F, T = evaluate_problem(nlp, res.x, res.u)
    assert np.all(g[active] >= -1e-8)
    assert np.max(np.abs(F)) < 1e-10 and np.max(np.abs(T)) < 1e-10
    assert f == pytest.approx(res.cost)


def test_infeasible_terminal_is_reported():
    hole = np.array([[0.04, 0.0, 0.01]])
    nlp = _nlp(N=30, x0=np.array([-0.04, 0, 0, 0, 0, 0]), holes=hole, terminal_idx=(IX, IY), terminal_val=(0.04, 0.0))
    res = solve(nlp)
    assert res.status == INFEASIBLE or res.status != SOLVED


def test_budget_and_abort_return_timeout():
    nlp = _nlp(N=60, x0=np.array([-0.04, 0, 0, 0, 0, 0]), x_ref=np.array([0.04, 0, 0, 0, 0, 0]),
               holes=np.array([[0.0, 0.0, 0.01]]), u_lb=np.full(2, -5.0), u_ub=np.full(2, 5.0))  # fmt: skip
    assert solve(nlp, budget=1e-9).status == TIMEOUT
    ev = threading.Event()
    ev.set()
    res = solve(nlp, abort=ev)
    assert res.status == TIMEOUT
    assert res.x.shape == (61, 6) and res.u.shape == (60, 2)


def test_iteration_log_is_written(tmp_path):
    p = tmp_path / "log.csv"
    res = solve(_nlp(N=10, x0=np.array([0.02, 0, 0, 0, 0, 0]), u_lb=np.full(2, -1.0), u_ub=np.full(2, 1.0)),
                options=SolverOptions(record_log=True, log_path=str(p)))  # fmt: skip
    assert res.log and p.read_text().startswith("it,")


def test_dimension_errors():
    with pytest.raises(NlpDimensionError):
        _nlp(N=0)
    with pytest.raises(NlpDimensionError):
        _nlp(x0=np.zeros(5))
    with pytest.raises(NlpDimensionError):
        _nlp(terminal_idx=(0, 2), terminal_val=(0.0,))
    with pytest.raises(NlpDimensionError):
        _nlp(terminal_idx=(7,), terminal_val=(0.0,))
    with pytest.raises(NlpDimensionError):
        _nlp(Q=-Q)
    with pytest.raises(NlpDimensionError):
        _nlp(holes=np.array([[0.0, 0.0, -0.01]]))
    with pytest.raises(NlpDimensionError):
        _nlp(x_ref=np.zeros((3, 6)))


def test_non_finite_input_names_stage():
    x0 = np.zeros(6)
    x0[0] = np.nan
    with pytest.raises(NonFiniteError) as exc:
        solve(_nlp(x0=x0))
    assert exc.value.stage == 0


def _box_feasible(nlp, lim_x, lim_u):
    """Feasibility of the box constraints as a linear program in the inputs."""
    N, nx, nu = nlp.N, nlp.nx, nlp.nu
    powers = [np.eye(nx)]
    for _ in range(N):
        powers.append(nlp.A @ powers[-1])
    rows, rhs = [], []
    for k in range(1, N + 1):
        const = powers[k] @ nlp.x0 + sum(powers[k - 1 - j] @ nlp.offset for j in range(k))
        M = np.zeros((nx, N * nu))
        for j in range(k):
            M[:, j * nu:(j + 1) * nu] = powers[k - 1 - j] @ nlp.B
        for i, lim in lim_x.items():
            rows += [M[i], -M[i]]
            rhs += [lim - const[i], lim + const[i]]
    res = linprog(np.zeros(N * nu), A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(-lim_u, lim_u)] * (N * nu))
    return res.status == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_box_problems_solved_iff_feasible(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(3, 25))
    nlp = _nlp(N=N, x0=rng.normal(0, 0.03, 6), x_ref=rng.normal(0, 0.03, 6), offset=rng.normal(0, 0.005, 6),
               u_lb=np.full(2, -1.0), u_ub=np.full(2, 1.0),
               x_lb=np.array([-0.2, -np.inf, -0.2, -np.inf, -0.15, -0.15]),
               x_ub=np.array([0.2, np.inf, 0.2, np.inf, 0.15, 0.15]))  # fmt: skip
    res = solve(nlp)
    if _box_feasible(nlp, {0: 0.2, 2: 0.2, 4: 0.15, 5: 0.15}, 1.0):
        assert res.status == SOLVED
        assert kkt_residual(nlp, res.x, res.u, res.multipliers) <= 1e-5
        assert np.all(np.abs(res.u) <= 1.0 + 1e-8)
    else:
        assert res.status != SOLVED


def test_derivative_checker_detects_a_wrong_gradient(monkeypatch):
    rng = np.random.default_rng(0)
    nlp = _nlp(N=4, holes=np.array([[0.01, 0.0, 0.008]]), walls=np.array([[0.0, 0.03, 0.02, 0.005]]),
               obs_points=np.array([[0.005, 0.005]]), obs_weight=1.0, terminal_idx=(IX, IY), terminal_val=(0.02, 0.0))  # fmt: skip
    X = rng.normal(0, 0.02, (5, 6))
    U = rng.normal(0, 1, (4, 2))
    good = check_derivatives(nlp, (X, U))
    assert good.max_error <= 1e-5
    real = kn.cost_gradient

    def broken(*args):
        real(*args)
        args[-2][2, 0] += 0.1  # corrupt one state-gradient entry

    monkeypatch.setattr(kn, "cost_gradient", broken)
    bad = check_derivatives(nlp, (X, U))
    assert bad.cost > 1e-3
    assert bad.worst[0] == "cost"
