import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from bayesmpc.qp import QpError, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, kkt_residuals, solve_qp

from conftest import enumerate_qp, random_qp


def test_unconstrained_identity_minimum_is_origin():
    sol = solve_qp(QpProblem(np.eye(2), np.zeros(2)))
    assert sol.solved
    np.testing.assert_allclose(sol.z, 0.0, atol=1e-12)


def test_single_active_bound():
    sol = solve_qp(QpProblem([[2.0]], [-2.0], G=[[1.0]], h=[0.0]))
    assert sol.solved
    assert sol.z[0] == pytest.approx(0.0, abs=1e-9)
    assert sol.mu_ineq[0] == pytest.approx(2.0, abs=1e-8)


def test_box_constrained_qps_match_enumeration(rng):
    for _ in range(20):
        d = 6
        L = rng.standard_normal((d, d))
        P = L @ L.T + 0.1 * np.eye(d)
        q = 4 * rng.standard_normal(d)
        G = np.vstack([np.eye(d), -np.eye(d)])
        h = np.ones(2 * d)
        z_ref, _ = enumerate_qp(P, q, G, h)
        sol = solve_qp(QpProblem(P, q, G=G, h=h))
        np.testing.assert_allclose(sol.z, z_ref, atol=1e-6)


def test_equality_and_inequality_constraints(rng):
    P, q, G, h = random_qp(rng, 4, 5)
    Aeq = rng.standard_normal((1, 4))
    # feasible equality: pass through the interior point used to build h
    z0 = np.linalg.lstsq(G, h - 1.0, rcond=None)[0]
    beq = Aeq @ z0
    sol = solve_qp(QpProblem(P, q, Aeq=Aeq, beq=beq, G=G, h=h))
    if sol.solved:
        stat, eq, ineq, comp = kkt_residuals(QpProblem(P, q, Aeq=Aeq, beq=beq, G=G, h=h), sol)
        assert max(stat, eq, ineq, comp) < 1e-7


def test_sparse_input_matches_dense(rng):
    P, q, G, h = random_qp(rng, 5, 8)
    dense = solve_qp(QpProblem(P, q, G=G, h=h))
    sparse = solve_qp(QpProblem(sp.csc_matrix(P), q, G=sp.csc_matrix(G), h=h))
    np.testing.assert_allclose(dense.z, sparse.z, atol=1e-7)


@pytest.mark.parametrize("method", ["admm", "ipm"])
def test_iterative_methods_without_polish(rng, method):
    P, q, G, h = random_qp(rng, 5, 8)
    z_ref, _ = enumerate_qp(P, q, G, h)
    sol = solve_qp(QpProblem(P, q, G=G, h=h), QpSettings(method=method, polish=False))
    assert sol.solved
    np.testing.assert_allclose(sol.z, z_ref, atol=1e-4)


def test_python_polish_path_matches_compiled(rng):
    for _ in range(10):
        P, q, G, h = random_qp(rng, 6, 10)
        a = solve_qp(QpProblem(P, q, G=G, h=h), QpSettings(compiled=True))
        b = solve_qp(QpProblem(P, q, G=G, h=h), QpSettings(compiled=False))
        np.testing.assert_allclose(a.z, b.z, atol=1e-7)


def test_warm_start_and_guess_do_not_change_the_answer(rng):
    P, q, G, h = random_qp(rng, 6, 10)
    solver = QpSolver(QpProblem(P, q, G=G, h=h))
    first = solver.solve()
    for _ in range(5):
        q2 = q + 0.3 * rng.standard_normal(6)
        cold = solve_qp(QpProblem(P, q2, G=G, h=h))
        warm = solver.solve(q=q2, warm_start=first)
        guessed = solver.solve(q=q2, active_guess=[np.arange(3), first.active_set])
        np.testing.assert_allclose(warm.z, cold.z, atol=1e-8)
        np.testing.assert_allclose(guessed.z, cold.z, atol=1e-8)


def test_primal_infeasible_is_reported():
    G = np.array([[1.0], [-1.0]])
    h = np.array([-1.0, -1.0])  # z <= -1 and z >= 1
    sol = solve_qp(QpProblem([[1.0]], [0.0], G=G, h=h))
    assert sol.status is QpStatus.PRIMAL_INFEASIBLE


def test_problem_check_rejects_bad_data():
    with pytest.raises(QpError):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0]).check()
    with pytest.raises(QpError):
        QpProblem([[1.0]], [np.nan]).check()
    with pytest.raises(QpError):
        QpSettings(eps_abs=0.0)
    with pytest.raises(QpError):
        QpSettings(method="simplex")


def _example_solution(z):
    return QpSolution(np.array([z]), np.zeros(0), np.array([2.0]), QpStatus.SOLVED, 0.0, 0.0, 0)


def test_kkt_residuals_at_exact_optimum():
    prob = QpProblem([[2.0]], [-2.0], G=[[1.0]], h=[0.0])
    assert max(kkt_residuals(prob, _example_solution(0.0))) <= 1e-12


def test_kkt_stationarity_after_perturbation():
    prob = QpProblem([[2.0]], [-2.0], G=[[1.0]], h=[0.0])
    stat, *_ = kkt_residuals(prob, _example_solution(0.1))
    assert stat == pytest.approx(0.2, abs=1e-12)


def test_kkt_with_empty_constraint_blocks():
    prob = QpProblem(np.eye(2), np.ones(2))
    sol = QpSolution(-np.ones(2), np.zeros(0), np.zeros(0), QpStatus.SOLVED, 0.0, 0.0, 0)
    stat, eq, ineq, comp = kkt_residuals(prob, sol)
    assert eq == 0.0 and ineq == 0.0 and comp == 0.0 and stat == 0.0


def test_kkt_dimension_mismatch():
    prob = QpProblem(np.eye(2), np.ones(2))
    with pytest.raises(QpError):
        kkt_residuals(prob, QpSolution(np.zeros(3), np.zeros(0), np.zeros(0), QpStatus.SOLVED, 0.0, 0.0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 9))
def test_random_qps_match_enumeration(seed, d, k):
    rng = np.random.default_rng(seed)
    P, q, G, h = random_qp(rng, d, k)
    z_ref, f_ref = enumerate_qp(P, q, G, h)
    prob = QpProblem(P, q, G=G, h=h)
    sol = solve_qp(prob)
    assert sol.solved
    assert np.all(sol.mu_ineq >= -1e-9)
    assert prob.objective(sol.z) == pytest.approx(f_ref, rel=1e-6, abs=1e-8)
    assert max(kkt_residuals(prob, sol)) <= 1e-8 * max(1.0, np.abs(q).max(), np.abs(h).max(initial=0.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_cost_scaling_does_not_move_the_optimizer(seed, scale):
    rng = np.random.default_rng(seed)
    P, q, G, h = random_qp(rng, 4, 6)
    a = solve_qp(QpProblem(P, q, G=G, h=h))
    b = solve_qp(QpProblem(scale * P, scale * q, G=G, h=h))
    np.testing.assert_allclose(a.z, b.z, atol=1e-6 * max(1.0, np.abs(a.z).max()))
