import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from adaptive_cbf.qp import InfeasibleQP, project_box_polytope, solve_qp


def test_unconstrained_minimum():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    c = np.array([1.0, -1.0])
    sol = solve_qp(G, c, np.zeros((0, 2)), np.zeros(0))
    np.testing.assert_allclose(sol.x, -np.linalg.solve(G, c), atol=1e-14)
    assert sol.active == []


def test_single_halfspace_projection():
    g = np.array([1.0, 2.0])
    nominal = np.array([0.0, 0.0])
    sol = project_box_polytope(nominal, g[None, :], [1.0], np.full(2, -np.inf), np.full(2, np.inf))
    np.testing.assert_allclose(sol.x, g / 5.0, atol=1e-14)
    assert sol.multipliers[0] > 0


def test_box_clipping():
    sol = project_box_polytope(np.array([3.0, -4.0]), np.zeros((0, 2)), np.zeros(0), -np.ones(2), np.ones(2))
    np.testing.assert_allclose(sol.x, [1.0, -1.0], atol=1e-14)


def test_infeasible_detected():
    C = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(InfeasibleQP):
        solve_qp(np.eye(2), np.zeros(2), C, np.array([1.0, 0.0]))


def test_nearly_antiparallel_rows_are_infeasible():
    # two opposing constraints whose normals differ only by rounding
    C = np.array([[0.06635234164442672, 0.01805941968191505],
                  [-0.05981985615299834, -0.01628144328691405]])
    d = np.array([0.06708944213565304, 0.02566564417276451])
    with pytest.raises(InfeasibleQP):
        project_box_polytope(np.array([-1.0, 1.0]), C, d, -np.ones(2), np.ones(2))


def test_shape_validation():
    with pytest.raises(ValueError):
        solve_qp(np.eye(3), np.zeros(2), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        solve_qp(np.eye(2), np.zeros(2), np.ones((2, 2)), np.zeros(3))


@given(st.integers(0, 100_000))
def test_matches_reference_solver(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    k = int(rng.integers(0, 5))
    A = rng.normal(size=(k, n))
    x_feas = rng.uniform(-0.5, 0.5, size=n)
    b = A @ x_feas - rng.uniform(0, 0.5, size=k)  # x_feas is strictly feasible
    target = rng.normal(size=n) * 2
    w = rng.uniform(0.5, 2.0, size=n)
    sol = project_box_polytope(target, A, b, -np.ones(n), np.ones(n), w)
    x = sol.x
    assert np.all(A @ x >= b - 1e-9)
    assert np.all(np.abs(x) <= 1 + 1e-12)
    ref = minimize(lambda y: 0.5 * np.sum(w * (y - target) ** 2), x_feas, jac=lambda y: w * (y - target),
                   constraints=[{"type": "ineq", "fun": lambda y: A @ y - b, "jac": lambda y: A}] if k else [],
                   bounds=[(-1, 1)] * n, method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    f = lambda y: 0.5 * np.sum(w * (y - target) ** 2)  # noqa: E731
    # never worse than the reference, and close to it
    assert f(x) <= f(ref.x) + 1e-7
    assert np.max(np.abs(x - ref.x)) < 1e-4


@given(st.integers(0, 100_000))
def test_kkt_conditions(seed):
    rng = np.random.default_rng(seed)
    n = 3
    A = rng.normal(size=(4, n))
    b = A @ rng.uniform(-0.3, 0.3, size=n) - 0.1
    G = np.eye(n) * 2.0
    c = rng.normal(size=n) * 3
    sol = solve_qp(G, c, A, b)
    lam = np.zeros(4)
    lam[sol.active] = sol.multipliers
    assert np.all(lam >= -1e-12)
    np.testing.assert_allclose(G @ sol.x + c, A.T @ lam, atol=1e-9)
    slack = A @ sol.x - b
    assert np.all(slack >= -1e-9)
    assert np.max(np.abs(lam * slack)) < 1e-9


def test_fd_noise_parallel_rows_do_not_break_the_active_set():
    # rows 0 and 1 agree in direction up to finite-difference noise
    C = np.array([[-5.7070532322178735e-02, 5.3495409364501256e-02],
                  [-9.5956027568178115e-04, 8.9944963699295499e-04],
                  [6.2720025348905750e-02, -5.8790995896007558e-02]])
    d = np.array([-2.4838860362333537, 0.1797432600444238, 0.04811305790094235])
    with pytest.raises(InfeasibleQP):
        project_box_polytope(np.array([-1.0, -1.0]), C, d, -np.ones(2), np.ones(2))
    # dropping the unreachable row leaves a solvable problem
    sol = project_box_polytope(np.array([-1.0, -1.0]), C[[0, 2]], d[[0, 2]], -np.ones(2), np.ones(2))
    assert np.all(C[[0, 2]] @ sol.x >= d[[0, 2]] - 1e-9)


def test_heavily_weighted_slack_is_not_treated_as_dependent():
    # slack column weighted 1e6 next to a bound on the action: the step along
    # the slack is tiny in Euclidean length but still a genuine direction
    sol = project_box_polytope(np.zeros(2), np.array([[4.0, 1.0]]), np.array([4.4]),
                               np.array([-1.0, -np.inf]), np.array([1.0, np.inf]), np.array([1.0, 1e6]))
    np.testing.assert_allclose(sol.x, [1.0, 0.4], atol=1e-9)
