from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from scentree.errors import DegenerateInput, InfeasibleMarginals, ShapeMismatch, SizeLimitExceeded
from scentree.transport import (
    DiscreteDistribution,
    brute_force_transport,
    empirical_kw,
    kw_distance,
    pairwise_distance,
    solve_transport,
    wasserstein_1d,
)

seeds = st.integers(0, 2**32 - 1)


def _random_instance(rng, m, n, zeros=False):
    cost = rng.uniform(0, 10, size=(m, n))
    a = rng.uniform(0.1, 1, size=m)
    b = rng.uniform(0.1, 1, size=n)
    if zeros:
        a[rng.integers(m)] = 0.0
    return cost, a / a.sum(), b / b.sum()


def _lp_objective(cost, a, b):
    m, n = cost.shape
    A = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
    res = linprog(cost.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    return res.fun


def _random_distribution(rng, n, D=1):
    w = rng.uniform(0.1, 1, size=n)
    return DiscreteDistribution(rng.normal(size=(n, D)), w / w.sum())


class TestDiscreteDistribution:
    def test_uniform(self):
        P = DiscreteDistribution.uniform([0.0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(P.weights, 0.25)
        assert P.atoms.shape == (4, 1)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InfeasibleMarginals):
            DiscreteDistribution([[0.0], [1.0]], [0.5, 0.6])

    def test_negative_weight(self):
        with pytest.raises(InfeasibleMarginals):
            DiscreteDistribution([[0.0], [1.0]], [1.5, -0.5])


class TestSolveTransport:
    def test_identity(self):
        x = np.array([[0.0], [1.0], [3.0]])
        w = np.array([0.2, 0.3, 0.5])
        plan, obj = solve_transport(pairwise_distance(x, x), w, w)
        assert obj == 0.0
        np.testing.assert_allclose(plan.plan, np.diag(w), atol=1e-15)

    def test_forced_plan(self):
        plan, obj = solve_transport(np.array([[0.0], [1.0]]), [0.5, 0.5], [1.0])
        assert obj == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(plan.plan, [[0.5], [0.5]])

    def test_infeasible_marginals(self):
        with pytest.raises(InfeasibleMarginals):
            solve_transport(np.ones((2, 2)), [0.5, 0.5], [0.7, 0.7])

    def test_empty_support(self):
        with pytest.raises(DegenerateInput):
            solve_transport(np.ones((0, 2)), [], [0.5, 0.5])

    def test_negative_cost_rejected(self):
        with pytest.raises(DegenerateInput):
            solve_transport(-np.ones((2, 2)), [0.5, 0.5], [0.5, 0.5])

    def test_zero_weight_atoms_reexpanded(self):
        cost = np.array([[1.0, 2.0], [0.0, 5.0], [3.0, 1.0]])
        plan, obj = solve_transport(cost, [0.5, 0.0, 0.5], [0.5, 0.5])
        assert plan.plan.shape == (3, 2)
        np.testing.assert_array_equal(plan.plan[1], 0.0)
        assert obj == pytest.approx(1.0)

    @settings(max_examples=60, deadline=None)
    @given(seeds, st.integers(1, 4), st.integers(1, 4), st.booleans())
    def test_matches_brute_force(self, seed, m, n, zeros):
        cost, a, b = _random_instance(np.random.default_rng(seed), m, n, zeros and m > 1)
        _, obj = solve_transport(cost, a, b, method="simplex")
        assert abs(obj - brute_force_transport(cost, a, b)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.integers(2, 9), st.integers(2, 9))
    def test_matches_lp(self, seed, m, n):
        cost, a, b = _random_instance(np.random.default_rng(seed), m, n)
        _, obj = solve_transport(cost, a, b, method="simplex")
        assert obj == pytest.approx(_lp_objective(cost, a, b), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.integers(2, 8), st.integers(2, 8))
    def test_plan_feasible_and_gap(self, seed, m, n):
        cost, a, b = _random_instance(np.random.default_rng(seed), m, n)
        plan, obj = solve_transport(cost, a, b)
        assert plan.plan.min() >= 0
        np.testing.assert_allclose(plan.plan.sum(axis=1), a, atol=1e-9)
        np.testing.assert_allclose(plan.plan.sum(axis=0), b, atol=1e-9)
        assert abs((plan.plan * cost).sum() - obj) <= 1e-9
        assert abs(plan.duality_gap) <= 1e-9 * (1 + abs(obj))

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.integers(2, 6), st.integers(2, 6))
    def test_permutation_invariance(self, seed, m, n):
        rng = np.random.default_rng(seed)
        cost, a, b = _random_instance(rng, m, n)
        pr, pc = rng.permutation(m), rng.permutation(n)
        _, obj = solve_transport(cost, a, b)
        _, obj_perm = solve_transport(cost[pr][:, pc], a[pr], b[pc])
        assert obj_perm == pytest.approx(obj, abs=1e-12)

    def test_degenerate_marginals(self):
        # equal partial sums make the northwest corner degenerate
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [1.0, 2.0, 2.0]])
        a = np.array([0.25, 0.25, 0.5])
        b = np.array([0.25, 0.25, 0.5])
        _, obj = solve_transport(cost, a, b, method="simplex")
        assert obj == pytest.approx(brute_force_transport(cost, a, b), abs=1e-12)

    def test_pot_route_agrees(self):
        cost, a, b = _random_instance(np.random.default_rng(3), 12, 9)
        _, o1 = solve_transport(cost, a, b, method="simplex")
        _, o2 = solve_transport(cost, a, b, method="pot")
        assert o1 == pytest.approx(o2, abs=1e-9)

    def test_large_problem_uses_pot(self):
        cost, a, b = _random_instance(np.random.default_rng(4), 80, 80)
        plan, obj = solve_transport(cost, a, b)
        assert obj == pytest.approx(_lp_objective(cost, a, b), abs=1e-8)
        np.testing.assert_allclose(plan.plan.sum(axis=1), a, atol=1e-9)

    @pytest.mark.filterwarnings("error")
    def test_wide_cost_range(self):
        # Sample-vs-quantizer costs from an exp-transformed 4-D model, spanning
        # 1e8..1e14; unscaled, POT stops at its iteration limit on this one.
        data = np.load(Path(__file__).parent / "data" / "wide_costs.npz")
        cost, b = data["C"], data["d"]
        a = np.full(len(cost), 1.0 / len(cost))
        plan, obj = solve_transport(cost, a, b, method="pot")
        assert obj == pytest.approx(_lp_objective(cost, a, b), rel=1e-12)
        assert plan.duality_gap <= 1e-9 * obj


class TestBruteForce:
    def test_one_by_one(self):
        assert brute_force_transport(np.array([[3.5]]), [1.0], [1.0]) == 3.5

    def test_diagonal(self):
        assert brute_force_transport(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_size_limit(self):
        with pytest.raises(SizeLimitExceeded):
            brute_force_transport(np.ones((5, 5)), np.full(5, 0.2), np.full(5, 0.2))

    def test_against_lp(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            cost, a, b = _random_instance(rng, 3, 3)
            assert brute_force_transport(cost, a, b) == pytest.approx(_lp_objective(cost, a, b), abs=1e-9)


class TestKW:
    def test_equal_distributions(self):
        P = DiscreteDistribution([[0.0], [1.0]], [0.3, 0.7])
        assert kw_distance(P, P) == 0.0

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_point_masses(self, r):
        P = DiscreteDistribution([[0.0, 0.0]], [1.0])
        Q = DiscreteDistribution([[3.0, 4.0]], [1.0])
        assert kw_distance(P, Q, r=r) == pytest.approx(5.0, rel=1e-15)

    def test_uniform_three_vs_two(self):
        P = DiscreteDistribution.uniform([0.0, 1.0, 2.0])
        Q = DiscreteDistribution.uniform([0.0, 2.0])
        cost = pairwise_distance(P.atoms, Q.atoms)
        oracle = brute_force_transport(cost, P.weights, Q.weights)
        assert kw_distance(P, Q) == pytest.approx(oracle, abs=1e-12)
        assert oracle == pytest.approx(1 / 3, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.integers(1, 3))
    def test_symmetric(self, seed, D):
        rng = np.random.default_rng(seed)
        P, Q = _random_distribution(rng, 4, D), _random_distribution(rng, 5, D)
        assert kw_distance(P, Q) == pytest.approx(kw_distance(Q, P), abs=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.integers(1, 3))
    def test_triangle_inequality(self, seed, D):
        rng = np.random.default_rng(seed)
        P, Q, R = (_random_distribution(rng, k, D) for k in (3, 4, 5))
        assert kw_distance(P, R) <= kw_distance(P, Q) + kw_distance(Q, R) + 1e-8

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.floats(0.01, 100))
    def test_scale_equivariance(self, seed, s):
        rng = np.random.default_rng(seed)
        P, Q = _random_distribution(rng, 4, 2), _random_distribution(rng, 3, 2)
        Ps = DiscreteDistribution(P.atoms * s, P.weights)
        Qs = DiscreteDistribution(Q.atoms * s, Q.weights)
        assert kw_distance(Ps, Qs) == pytest.approx(s * kw_distance(P, Q), abs=1e-9 * max(1, s))

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.sampled_from([1.0, 2.0]))
    def test_1d_quantile_coupling(self, seed, r):
        rng = np.random.default_rng(seed)
        P, Q = _random_distribution(rng, 5), _random_distribution(rng, 6)
        direct = wasserstein_1d(P.atoms[:, 0], P.weights, Q.atoms[:, 0], Q.weights, r=r)
        assert direct == pytest.approx(kw_distance(P, Q, r=r), abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatch):
            kw_distance(DiscreteDistribution([[0.0]], [1.0]), DiscreteDistribution([[0.0, 1.0]], [1.0]))

    def test_empirical_against_exact(self):
        rng = np.random.default_rng(0)
        samples = rng.normal(size=(400, 1))
        atoms, weights = np.array([[-1.0], [1.0]]), np.array([0.5, 0.5])
        exact = kw_distance(DiscreteDistribution.uniform(samples), DiscreteDistribution(atoms, weights))
        assert empirical_kw(samples, atoms, weights) == pytest.approx(exact, abs=1e-9)


class TestPathMetric:
    def test_stage_sum(self):
        X = np.array([[[0.0, 0.0], [1.0, 1.0]]])  # one path, T = 2, D = 2
        Y = np.array([[[3.0, 4.0], [1.0, 1.0]]])
        np.testing.assert_allclose(pairwise_distance(X, Y, metric="path"), [[5.0]])
