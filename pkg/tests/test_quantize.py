import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import ndtr
from scipy.stats import binomtest, lognorm, norm

from scentree.errors import QuantizerDiverged, ShapeMismatch
from scentree.models import GaussianProcessModel, LognormalProcessModel
from scentree.quantize import (
    QuantizeConfig,
    _lloyd_1d,
    forward_backward,
    lognormal_quantizer_1d,
    monte_carlo_tree,
    objective_estimate,
    quantize,
    standard_normal_quantizer,
    standard_normal_quantizer_nd,
    stagewise_optimal_tree,
    update_r1,
    update_r2,
)
from scentree.tree import TreeTopology, is_nonanticipative
from trees import chain_tree

seeds = st.integers(0, 2**32 - 1)

MU = np.array([1.0, 2.0, 3.0])
C = np.array([[1.0, 0.3, 0.0], [0.3, 0.7, 0.3], [0.0, 0.3, 0.5]])


def _reference_model():
    return GaussianProcessModel(MU, C)


class TestConfig:
    def test_defaults(self):
        cfg = QuantizeConfig()
        assert cfg.r == 2 and cfg.variant == "efficient_two_stage"
        assert cfg.step(1) == 1.0
        assert cfg.step(16) == pytest.approx(16**-0.75)

    def test_alternative_rules(self):
        assert QuantizeConfig(step_rule="square-summable").step(4) == 0.25
        assert QuantizeConfig(step_rule="polyak", polyak_target=1.0).step(1, loss=3.0, grad_sq=4.0) == 0.5
        assert QuantizeConfig(step_rule="polyak").step(1, loss=-1.0, grad_sq=4.0) == 0.0

    @pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"r": 3}, {"variant": "three-stage"}, {"prob_floor": -0.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            QuantizeConfig(**kwargs)


class TestMonteCarlo:
    def test_single_path(self):
        tree = monte_carlo_tree(_reference_model(), TreeTopology.balanced([1, 1, 1]), np.random.default_rng(0))
        assert tree.n_leaves == 1

    def test_equal_probabilities(self):
        tree = monte_carlo_tree(_reference_model(), TreeTopology.balanced([5, 5, 5]), np.random.default_rng(0))
        np.testing.assert_allclose(tree.cond_probs[1:], 0.2)
        assert tree.n_leaves == 125

    def test_deterministic(self):
        topo = TreeTopology.balanced([3, 2, 2])
        a = monte_carlo_tree(_reference_model(), topo, np.random.default_rng(5))
        b = monte_carlo_tree(_reference_model(), topo, np.random.default_rng(5))
        np.testing.assert_array_equal(a.values, b.values)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            monte_carlo_tree(_reference_model(), TreeTopology.balanced([2, 2]), np.random.default_rng(0))


class TestLloyd:
    def test_two_points(self):
        q, w = standard_normal_quantizer(2)
        np.testing.assert_allclose(q, [-np.sqrt(2 / np.pi), np.sqrt(2 / np.pi)], atol=1e-12)
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)

    def test_one_point(self):
        q, _ = standard_normal_quantizer(1, r=2)
        assert q[0] == 0.0
        tree = stagewise_optimal_tree(_reference_model(), TreeTopology.balanced([1, 1, 1]))
        np.testing.assert_allclose(tree.values[1:, 0], MU, atol=1e-12)

    def test_one_point_median_for_r1(self):
        q, w = lognormal_quantizer_1d(0.3, 0.8, 1, r=1)
        assert q[0] == pytest.approx(np.exp(0.3), rel=1e-12)

    @pytest.mark.parametrize("b", [3, 5, 8])
    def test_centroid_condition(self, b):
        q, w = standard_normal_quantizer(b)
        edges = np.concatenate([[-np.inf], 0.5 * (q[1:] + q[:-1]), [np.inf]])
        for i in range(b):
            mass = integrate.quad(norm.pdf, edges[i], edges[i + 1])[0]
            first = integrate.quad(lambda x: x * norm.pdf(x), edges[i], edges[i + 1])[0]
            assert q[i] == pytest.approx(first / mass, abs=1e-6)
            assert w[i] == pytest.approx(mass, abs=1e-9)

    @pytest.mark.parametrize("b", [2, 4, 7])
    def test_r1_cells_medians(self, b):
        q, w = standard_normal_quantizer(b, r=1)
        edges = np.concatenate([[-np.inf], 0.5 * (q[1:] + q[:-1]), [np.inf]])
        F = ndtr(edges)
        np.testing.assert_allclose(ndtr(q), 0.5 * (F[:-1] + F[1:]), atol=1e-9)

    def test_lognormal_direct_centroids(self):
        mu, sigma = 0.2, 0.5
        q, w = lognormal_quantizer_1d(mu, sigma, 4)
        dist = lognorm(sigma, scale=np.exp(mu))
        edges = np.concatenate([[0.0], 0.5 * (q[1:] + q[:-1]), [dist.ppf(1 - 1e-15)]])
        for i in range(4):
            mass = integrate.quad(dist.pdf, edges[i], edges[i + 1], epsabs=1e-14)[0]
            first = integrate.quad(lambda x: x * dist.pdf(x), edges[i], edges[i + 1], epsabs=1e-14)[0]
            assert q[i] == pytest.approx(first / mass, rel=1e-6)

    def test_divergence_guard(self):
        # a deliberately wrong centroid map that shrinks every point
        cdf = ndtr

        def shrinking(a, c):
            return 0.5 * (norm.pdf(a) - norm.pdf(c))

        with pytest.raises(QuantizerDiverged):
            _lloyd_1d(cdf, norm.ppf, shrinking, 4, 2, 1e-300, 200)

    def test_lognormal_exp_transform_inherits_probabilities(self):
        topo = TreeTopology.balanced([3, 3, 3])
        g = stagewise_optimal_tree(_reference_model(), topo)
        ln = stagewise_optimal_tree(LognormalProcessModel(MU, C), topo)
        np.testing.assert_allclose(ln.values[1:], np.exp(g.values[1:]), rtol=1e-13)
        np.testing.assert_array_equal(ln.cond_probs, g.cond_probs)


class TestMultiDimensional:
    def test_four_points_in_plane(self):
        # the optimum is a square of any orientation with mean squared error 2(1 - 2/pi)
        centers, w = standard_normal_quantizer_nd(4, 2)
        fresh = np.random.default_rng(123).standard_normal((200000, 2))
        mse = ((fresh[:, None, :] - centers[None]) ** 2).sum(-1).min(axis=1).mean()
        assert mse == pytest.approx(2 * (1 - 2 / np.pi), rel=0.01)
        np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 2 / np.sqrt(np.pi), atol=0.1)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_shared_time_tree(self):
        model = GaussianProcessModel.shared_time(np.zeros((2, 3)), np.array([[1.0, 0.5], [0.5, 1.0]]), D=3)
        tree = stagewise_optimal_tree(model, TreeTopology.balanced([4, 3]))
        assert tree.values.shape == (17, 3)
        assert abs(tree.leaf_probabilities().sum() - 1) < 1e-12

    def test_correlated_coordinates(self):
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        model = GaussianProcessModel(np.zeros(2), cov, D=2)
        tree = stagewise_optimal_tree(model, TreeTopology.balanced([2]))
        # two points split along the major axis (1, 1)
        d = tree.values[1] - tree.values[2]
        assert abs(d[0] - d[1]) < 0.1 * np.abs(d).max()


class TestUpdates:
    def test_hand_update(self):
        assert update_r2(1.0, 4.0, 1.0 / 1**0.75, 3) == 2.0

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 1), st.integers(1, 50))
    def test_r2_contracts_towards_sample(self, z, xi, step, n):
        new = update_r2(z, xi, step, n)
        assert abs(new - xi) == pytest.approx((1 - step / n) * abs(z - xi), abs=1e-9)

    @settings(max_examples=50)
    @given(seeds, st.floats(1e-3, 1), st.integers(1, 5))
    def test_r1_moves_fixed_length(self, seed, step, n):
        rng = np.random.default_rng(seed)
        z, xi = rng.normal(size=3), rng.normal(size=3)
        new, skipped = update_r1(z.copy(), xi, step, n)
        assert not skipped
        assert np.linalg.norm(new - z) == pytest.approx(step / n, rel=1e-12)

    def test_r1_unit_step(self):
        z, skipped = update_r1(np.array([0.0]), np.array([5.0]), 0.1, 1)
        assert not skipped
        assert z[0] == pytest.approx(0.1, abs=1e-15)

    def test_r1_class_of_two(self):
        z, _ = update_r1(np.array([0.0]), np.array([5.0]), 0.1, 2)
        assert z[0] == pytest.approx(0.05, abs=1e-15)

    def test_r1_skip(self):
        z, skipped = update_r1(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.1, 1)
        assert skipped
        np.testing.assert_array_equal(z, [1.0, 2.0])

    def test_r1_skip_counted(self):
        # a degenerate model: every sample lands exactly on the scenario
        model = GaussianProcessModel(np.array([1.0, 2.0]), np.zeros((2, 2)) + 1e-300 * np.eye(2))
        tree = chain_tree([1.0, 2.0])
        _, trace = forward_backward(model, tree, QuantizeConfig(iterations=5, r=1))
        assert trace.skips[(1, 0)].sum() == 10


class TestForwardBackward:
    def test_scenario_matrix_nonanticipative_after_every_update(self):
        model = _reference_model()
        base = monte_carlo_tree(model, TreeTopology.balanced([3, 2, 2]), np.random.default_rng(3))
        topo = base.topology
        seen = []

        def check(t, root, k, values):
            Z = values[topo.ancestors[:, 1:]]
            seen.append(is_nonanticipative(topo, Z))

        forward_backward(model, base, QuantizeConfig(iterations=50, variant="full"), callback=check)
        assert len(seen) == 50 * (1 + 3) and all(seen)

    def test_counts_and_probabilities(self):
        model = _reference_model()
        base = stagewise_optimal_tree(model, TreeTopology.balanced([3, 3, 3]))
        K = 300
        tree, trace = forward_backward(model, base, QuantizeConfig(iterations=K))
        for key, counts in trace.counts.items():
            assert counts.sum() == K
        topo = tree.topology
        sums = np.bincount(topo.parent[1:], weights=tree.cond_probs[1:], minlength=topo.n_nodes)
        np.testing.assert_allclose(sums[topo.n_children > 0], 1.0, atol=1e-12)
        # stage-1 probabilities are count ratios
        root_counts = trace.counts[(1, 0)]
        leaf_stage1 = topo.ancestors[:, 1]
        np.testing.assert_allclose(
            tree.cond_probs[topo.children(0)], [root_counts[leaf_stage1 == c].sum() / K for c in topo.children(0)]
        )

    def test_zero_count_floor(self):
        # children far from all mass never win a sample
        model = GaussianProcessModel(np.zeros(2), np.eye(2))
        topo = TreeTopology.balanced([3, 1])
        values = np.array([[0.0], [0.0], [1e6], [-1e6], [0.0], [0.0], [0.0]])
        tree = stagewise_optimal_tree(model, topo).with_values(values)
        out, trace = forward_backward(model, tree, QuantizeConfig(iterations=20, prob_floor=0.01))
        assert trace.zero_count_children == 2
        np.testing.assert_allclose(out.cond_probs[2:4], 0.01 / 1.02)
        out0, trace0 = forward_backward(model, tree, QuantizeConfig(iterations=20))
        np.testing.assert_array_equal(out0.cond_probs[2:4], 0.0)

    def test_deterministic(self):
        model = _reference_model()
        base = stagewise_optimal_tree(model, TreeTopology.balanced([2, 2, 2]))
        a, _ = forward_backward(model, base, QuantizeConfig(iterations=100, seed=4))
        b, _ = forward_backward(model, base, QuantizeConfig(iterations=100, seed=4))
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.cond_probs, b.cond_probs)

    def test_efficient_variant_leaves_later_stages(self):
        model = GaussianProcessModel(np.zeros(4), np.eye(4) + 0.3)
        base = stagewise_optimal_tree(model, TreeTopology.balanced([2, 2, 2, 2]))
        touched = set()
        prev = [np.array(base.values)]

        def spy(t, root, k, values):
            changed = np.flatnonzero(np.any(values != prev[0], axis=1))
            touched.update((t, int(base.topology.stage[c])) for c in changed)
            prev[0] = np.array(values)

        forward_backward(model, base, QuantizeConfig(iterations=30), callback=spy)
        assert all(s in (t, t + 1) for t, s in touched)

    def test_objective_trend_from_monte_carlo_start(self):
        """The sampled cost decreases over the iterations (sign test over 30 seeds)."""
        model = _reference_model()
        topo = TreeTopology.balanced([3, 3, 3])
        wins = 0
        for seed in range(30):
            base = monte_carlo_tree(model, topo, np.random.default_rng(seed))
            _, trace = forward_backward(model, base, QuantizeConfig(iterations=400, seed=seed))
            obj = trace.mean_objective()
            wins += obj[-100:].mean() < obj[:100].mean()
        assert binomtest(wins, 30, 0.5, alternative="greater").pvalue < 0.05

    def test_independent_stages_no_drift(self):
        """Under independence the stage-wise tree is a fixed point in expectation.

        Drift is the signed change of each node value after 10^4 iterations;
        its noise level is the across-seed standard error.
        """
        model = GaussianProcessModel.shared_time(np.full(2, 5.0), np.diag([4.0, 3.0]))
        topo = TreeTopology.balanced([3, 3])
        drift = []
        for seed in range(20):
            cfg = QuantizeConfig(iterations=10**4, seed=seed)
            base = stagewise_optimal_tree(model, topo, cfg)
            out, _ = forward_backward(model, base, cfg)
            drift.append(out.values[1:, 0] - base.values[1:, 0])
        drift = np.array(drift)
        se = drift.std(axis=0, ddof=1) / np.sqrt(len(drift))
        assert np.mean(np.abs(drift.mean(axis=0))) < 3 * np.mean(se)

    def test_trace_csv(self, tmp_path):
        model = _reference_model()
        _, trace = quantize(model, TreeTopology.balanced([2, 2, 2]), "fb", QuantizeConfig(iterations=10))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "stage,node,iteration,objective,skips"
        assert len(lines) == 1 + 10 * (1 + 2)


class TestObjectiveEstimate:
    def test_deterministic_model_on_its_path(self):
        model = GaussianProcessModel(MU, 1e-300 * np.eye(3))
        tree = chain_tree(MU)
        assert objective_estimate(tree, model, 100) == pytest.approx(0.0, abs=1e-100)

    def test_standard_error_rate(self):
        """Doubling the sample count shrinks the standard error by sqrt(2)."""
        model = _reference_model()
        tree = stagewise_optimal_tree(model, TreeTopology.balanced([3, 3, 3]))
        _, se1 = objective_estimate(tree, model, 20000, rng=np.random.default_rng(1), return_se=True)
        _, se2 = objective_estimate(tree, model, 40000, rng=np.random.default_rng(2), return_se=True)
        assert se1 / se2 == pytest.approx(np.sqrt(2), rel=0.3)

    def test_optimal_beats_monte_carlo(self):
        model = _reference_model()
        topo = TreeTopology.balanced([4, 4, 4])
        opt = objective_estimate(stagewise_optimal_tree(model, topo), model, 20000)
        mc = objective_estimate(monte_carlo_tree(model, topo, np.random.default_rng(0)), model, 20000)
        assert opt < mc


class TestDispatch:
    def test_methods(self):
        topo = TreeTopology.balanced([2, 2, 2])
        for method in ("mc", "stagewise", "fb"):
            tree, trace = quantize(_reference_model(), topo, method, QuantizeConfig(iterations=20))
            assert tree.n_leaves == 8
            assert (trace is not None) == (method == "fb")
        with pytest.raises(ValueError):
            quantize(_reference_model(), topo, "qmc")
