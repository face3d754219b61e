import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import permutation_ot, vertex_ot
from uniloc.ot import (EXACT_LP_MAX_CELLS, OtConfig, OtError, OtSolver, TransportPlan, barycentric_map,
                       cost_matrix, exact_lp, generate_labels, nlos_targets, sinkhorn, solve, uniform)
from uniloc.scene import default_scene, is_los

SCENE = default_scene()


def test_cost_matrix_examples():
    assert np.array_equal(cost_matrix([[1, 2, 3]], [[1, 2, 3]]), [[0.0]])
    assert cost_matrix([[0, 0, 0]], [[3, 4, 0]])[0, 0] == 25.0
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    shift = np.array([3.0, -7.0, 2.0])
    assert np.allclose(cost_matrix(s, t), cost_matrix(s + shift, t + shift))
    C = cost_matrix(s, s)
    assert np.allclose(C, C.T)
    with pytest.raises(OtError):
        cost_matrix(np.zeros((0, 3)), t)


def test_config_validation():
    with pytest.raises(ValueError):
        OtConfig(regularization=0.0)
    with pytest.raises(ValueError):
        OtConfig(max_iterations=0)


def test_sinkhorn_trivial_cases():
    plan = sinkhorn(np.array([[5.0]]), [1.0], [1.0], OtConfig(regularization=1e-3))
    assert np.allclose(plan.gamma, [[1.0]])
    plan = sinkhorn(np.zeros((3, 4)), uniform(3), uniform(4))
    assert np.allclose(plan.gamma, 1 / 12)


def test_sinkhorn_rejects_bad_marginals():
    with pytest.raises(OtError):
        sinkhorn(np.ones((2, 2)), [0.5, 0.5], [1.0, 0.0])
    with pytest.raises(OtError):
        sinkhorn(np.ones((2, 2)), [0.5, 0.6], [0.5, 0.5])


def test_sinkhorn_reports_non_convergence():
    rng = np.random.default_rng(3)
    C = rng.random((6, 6))
    plan = sinkhorn(C, uniform(6), uniform(6), OtConfig(regularization=1e-3, max_iterations=3,
                                                        eps_scaling=False))
    assert not plan.converged and plan.marginal_error > 0 and plan.iterations == 3


def test_sinkhorn_approaches_lp_monotonically():
    rng = np.random.default_rng(11)
    C = rng.random((4, 4))
    exact = exact_lp(C, uniform(4), uniform(4)).cost(C)
    costs = []
    for eps in [1.0, 0.3, 0.1, 0.03, 0.01, 0.001]:
        plan = sinkhorn(C, uniform(4), uniform(4), OtConfig(regularization=eps, max_iterations=200_000,
                                                            convergence_tol=1e-11))
        assert plan.converged
        costs.append(plan.cost(C))
    assert all(c >= exact - 1e-12 for c in costs)
    assert all(c1 <= c0 + 1e-12 for c0, c1 in zip(costs, costs[1:]))
    assert costs[-1] - exact < 1e-3


def test_exact_lp_examples():
    plan = exact_lp(np.array([[0.0, 1.0], [1.0, 0.0]]), uniform(2), uniform(2))
    assert np.allclose(plan.gamma, [[0.5, 0], [0, 0.5]]) and plan.cost(np.eye(2)) == pytest.approx(1.0)
    plan = exact_lp(np.array([[2.0, 3.0]]), [1.0], [0.4, 0.6])
    assert np.allclose(plan.gamma, [[0.4, 0.6]])


def test_exact_lp_size_limit():
    with pytest.raises(OtError, match="Sinkhorn"):
        exact_lp(np.zeros((101, 100)), uniform(101), uniform(100))
    assert EXACT_LP_MAX_CELLS == 10_000


def test_exact_lp_matches_permutations_3x3():
    rng = np.random.default_rng(5)
    for _ in range(10):
        C = rng.random((3, 3))
        assert exact_lp(C, uniform(3), uniform(3)).cost(C) == pytest.approx(permutation_ot(C), abs=1e-9)


def test_exact_lp_matches_vertex_enumeration_2x2():
    rng = np.random.default_rng(6)
    for _ in range(10):
        C = rng.random((2, 2))
        a = rng.dirichlet(np.ones(2))
        b = rng.dirichlet(np.ones(2))
        assert exact_lp(C, a, b).cost(C) == pytest.approx(vertex_ot(C, a, b), abs=1e-9)


def test_barycentric_map_examples():
    plan = TransportPlan(np.array([[1.0]]), np.array([1.0]), np.array([1.0]))
    assert np.allclose(barycentric_map(plan, [[3.0, 4.0, 1.5]]), [[3.0, 4.0, 1.5]])
    plan = TransportPlan(np.array([[0.5, 0.5]]), np.array([1.0]), np.array([0.5, 0.5]))
    assert np.allclose(barycentric_map(plan, [[0, 0, 1.5], [2, 0, 1.5]]), [[1, 0, 1.5]])
    plan = TransportPlan(np.array([[0.0, 0.0], [0.5, 0.5]]), np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    with pytest.raises(OtError):
        barycentric_map(plan, [[0, 0, 0], [1, 0, 0]])


def test_barycentric_convex_hull():
    rng = np.random.default_rng(8)
    targets = rng.random((6, 3)) * [10, 10, 0] + [0, 0, 1.5]
    plan = sinkhorn(cost_matrix(rng.random((5, 3)) * 10, targets), uniform(5), uniform(6))
    out = barycentric_map(plan, targets)
    assert np.all(out.min(0) >= targets.min(0) - 1e-12) and np.all(out.max(0) <= targets.max(0) + 1e-12)


def test_nlos_targets_are_nlos_first_quadrant():
    t = nlos_targets(SCENE, 4.0)
    assert len(t) > 0 and np.all(t[:, :2] >= 0)
    assert not any(is_los(SCENE, p) for p in t)


def test_labels_all_los_pass_through():
    est = np.random.default_rng(1).random((7, 3))
    assert np.array_equal(generate_labels(est, np.ones(7, bool), SCENE), est)


def test_labels_single_target_forced():
    g = np.array([[40.0, 70.0, 1.5]])
    est = np.array([[1.0, 2.0, 1.5], [5.0, 5.0, 1.5]])
    labels = generate_labels(est, [True, False], SCENE, targets=g)
    assert np.allclose(labels[1], g[0]) and np.array_equal(labels[0], est[0])


def test_labels_empty_grid_raises():
    with pytest.raises(OtError):
        generate_labels(np.zeros((2, 3)), [False, False], SCENE, targets=np.zeros((0, 3)))


def test_labels_in_hull_and_permutation_equivariant():
    rng = np.random.default_rng(2)
    est = np.column_stack([rng.random((30, 2)) * 80, np.full(30, 1.5)])
    ident = rng.random(30) < 0.4
    targets = nlos_targets(SCENE, 4.0)
    labels = generate_labels(est, ident, SCENE, targets=targets)
    nl = labels[~ident]
    assert np.all(nl.min(0) >= targets.min(0) - 1e-9) and np.all(nl.max(0) <= targets.max(0) + 1e-9)
    perm = rng.permutation(30)
    again = generate_labels(est[perm], ident[perm], SCENE, targets=targets)
    assert np.allclose(again, labels[perm], atol=1e-9)


def test_labels_snap_lands_on_grid():
    rng = np.random.default_rng(4)
    est = np.column_stack([rng.random((10, 2)) * 80, np.full(10, 1.5)])
    targets = nlos_targets(SCENE, 4.0)
    labels = generate_labels(est, np.zeros(10, bool), SCENE, targets=targets, snap=True)
    tset = {tuple(t) for t in targets}
    assert all(tuple(p) in tset for p in labels)


def test_eps_scaling_agrees_with_plain_iteration():
    rng = np.random.default_rng(12)
    C = rng.random((5, 7))
    cfg = OtConfig(regularization=0.05, convergence_tol=1e-12, max_iterations=100_000)
    plain = sinkhorn(C, uniform(5), uniform(7), OtConfig(**{**cfg.__dict__, "eps_scaling": False}))
    annealed = sinkhorn(C, uniform(5), uniform(7), cfg)
    assert plain.converged and annealed.converged
    assert np.allclose(plain.gamma, annealed.gamma, atol=1e-10)


def test_solve_dispatch():
    C = np.random.default_rng(0).random((3, 3))
    e = solve(C, uniform(3), uniform(3), OtConfig(solver=OtSolver.EXACT_LP)).cost(C)
    s = solve(C, uniform(3), uniform(3), OtConfig(regularization=1e-3, max_iterations=100_000)).cost(C)
    assert s >= e - 1e-12 and s == pytest.approx(e, rel=0.05)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_sinkhorn_marginals_when_converged(ns, nt, seed):
    rng = np.random.default_rng(seed)
    C = rng.random((ns, nt)) * 10
    a, b = rng.dirichlet(np.ones(ns)) * 0.98 + 0.02 / ns, rng.dirichlet(np.ones(nt)) * 0.98 + 0.02 / nt
    plan = sinkhorn(C, a, b)
    assert np.all(plan.gamma >= 0)
    assert plan.gamma.sum() == pytest.approx(1.0, abs=1e-9)
    if plan.converged:
        assert max(plan.marginal_residuals()) < 1e-6
    e = exact_lp(C, a, b).cost(C)
    # an approximately feasible plan may undercut the optimum by at most max(C) * marginal error
    assert plan.cost(C) >= e - C.max() * (ns + nt) * plan.marginal_error - 1e-9
