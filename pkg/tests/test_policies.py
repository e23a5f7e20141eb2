"""Policy families: log-probabilities against closed forms, sampling
statistics, KL identities, decoupled Gaussian KLs, and snapshot round trips."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mompo.nn import FeedForwardNet
from mompo.policies import (
    DiagonalGaussianPolicy,
    GaussianDist,
    ParametricCategoricalPolicy,
    TabularCategoricalPolicy,
    gaussian_log_prob,
    kl_categorical,
    kl_gaussian_decoupled,
    load_snapshot,
    save_snapshot,
)


def make_gaussian_policy(rng=None, action_dim=1, state_dim=2, **kwargs):
    rng = rng if rng is not None else np.random.default_rng(0)
    net = FeedForwardNet((state_dim, 16, 2 * action_dim), rng=rng)
    return DiagonalGaussianPolicy(net, action_dim, **kwargs)


class TestKLCategorical:
    def test_identical_distributions(self):
        assert kl_categorical([0.2, 0.8], [0.2, 0.8]) == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_vs_uniform(self):
        assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))

    def test_hand_computed_value(self):
        expected = 0.5 * np.log(2) + 0.5 * np.log(2.0 / 3.0)
        assert kl_categorical([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected)

    def test_support_violation_raises(self):
        with pytest.raises(ValueError):
            kl_categorical([0.5, 0.5], [1.0, 0.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            kl_categorical([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_rowwise_batches(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        q = np.array([[0.5, 0.5], [0.5, 0.5]])
        out = kl_categorical(p, q)
        np.testing.assert_allclose(out, [np.log(2), 0.0], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=2, max_size=6),
           st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=2, max_size=6))
    def test_property_nonnegative_and_zero_iff_equal(self, a, b):
        n = min(len(a), len(b))
        p = np.asarray(a[:n]) / np.sum(a[:n])
        q = np.asarray(b[:n]) / np.sum(b[:n])
        assert kl_categorical(p, q) >= -1e-12
        assert kl_categorical(p, p) == pytest.approx(0.0, abs=1e-12)


class TestKLGaussianDecoupled:
    def test_identical_policies(self):
        d = GaussianDist(np.array([[0.5, -0.5]]), np.array([[1.0, 2.0]]))
        kl_mean, kl_cov = kl_gaussian_decoupled(d, d)
        assert kl_mean[0] == pytest.approx(0.0, abs=1e-15)
        assert kl_cov[0] == pytest.approx(0.0, abs=1e-15)

    def test_unit_mean_shift(self):
        old = GaussianDist(np.array([[0.0]]), np.array([[1.0]]))
        new = GaussianDist(np.array([[1.0]]), np.array([[1.0]]))
        kl_mean, kl_cov = kl_gaussian_decoupled(old, new)
        assert kl_mean[0] == pytest.approx(0.5)
        assert kl_cov[0] == pytest.approx(0.0, abs=1e-15)

    def test_doubled_std(self):
        old = GaussianDist(np.array([[0.0]]), np.array([[1.0]]))
        new = GaussianDist(np.array([[0.0]]), np.array([[2.0]]))
        kl_mean, kl_cov = kl_gaussian_decoupled(old, new)
        assert kl_mean[0] == pytest.approx(0.0, abs=1e-15)
        assert kl_cov[0] == pytest.approx(np.log(2) + 1.0 / 8.0 - 0.5)

    def test_dimension_mismatch_raises(self):
        old = GaussianDist(np.zeros((1, 2)), np.ones((1, 2)))
        new = GaussianDist(np.zeros((1, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError):
            kl_gaussian_decoupled(old, new)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=-3, max_value=3), st.floats(min_value=-3, max_value=3),
           st.floats(min_value=0.05, max_value=5), st.floats(min_value=0.05, max_value=5))
    def test_property_nonnegative_and_matches_closed_forms(self, m0, m1, s0, s1):
        old = GaussianDist(np.array([[m0]]), np.array([[s0]]))
        new = GaussianDist(np.array([[m1]]), np.array([[s1]]))
        kl_mean, kl_cov = kl_gaussian_decoupled(old, new)
        assert kl_mean[0] >= 0.0 and kl_cov[0] >= -1e-15
        assert kl_mean[0] == pytest.approx(0.5 * ((m1 - m0) / s0) ** 2, rel=1e-12, abs=0)
        assert kl_cov[0] == pytest.approx(np.log(s1 / s0) + s0**2 / (2 * s1**2) - 0.5,
                                          rel=1e-9, abs=1e-12)


class TestLogProb:
    def test_uniform_categorical(self):
        policy = TabularCategoricalPolicy(1, 3)
        assert policy.log_prob(0, 1) == pytest.approx(np.log(1.0 / 3.0))

    def test_standard_normal_at_zero(self):
        assert gaussian_log_prob([0.0], [1.0], [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_shifted_scaled_gaussian(self):
        # N(1, 2) density at 0, evaluated through the explicit formula
        mu, sigma, a = 1.0, 2.0, 0.0
        expected = -0.5 * ((a - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        assert gaussian_log_prob([mu], [sigma], [a]) == pytest.approx(expected)

    def test_categorical_mass_sums_to_one(self):
        policy = TabularCategoricalPolicy.from_probs(np.array([0.2, 0.3, 0.5]))
        total = sum(np.exp(policy.log_prob(0, a)) for a in range(3))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_density_integrates_to_one(self):
        # Monte-Carlo integral of the density over a wide box
        policy = make_gaussian_policy()
        d = policy.dist(np.zeros((1, 2)))
        mu, sigma = d.mean[0, 0], d.std[0, 0]
        rng = np.random.default_rng(5)
        lo, hi = mu - 8 * sigma, mu + 8 * sigma
        xs = rng.uniform(lo, hi, size=10**5)
        dens = np.exp(gaussian_log_prob(
            np.full((xs.shape[0], 1), mu), np.full((xs.shape[0], 1), sigma), xs[:, None]))
        integral = (hi - lo) * dens.mean()
        assert integral == pytest.approx(1.0, rel=0.02)

    def test_box_bounds_reject_outside_actions(self):
        policy = make_gaussian_policy(bounds=(-1.0, 1.0))
        with pytest.raises(ValueError):
            policy.log_prob(np.zeros(2), np.array([1.5]))


class TestSampling:
    def test_one_hot_categorical_always_returns_supported_action(self):
        policy = TabularCategoricalPolicy.from_probs(np.array([0.0, 1.0, 0.0]))
        rng = np.random.default_rng(0)
        assert all(policy.sample(0, rng) == 1 for _ in range(50))

    def test_uniform_categorical_frequencies(self):
        policy = TabularCategoricalPolicy(1, 3)
        rng = np.random.default_rng(1)
        actions, _ = policy.sample_actions(np.zeros(1, dtype=int), 10**5, rng)
        freq = np.bincount(actions[0], minlength=3) / 10**5
        np.testing.assert_allclose(freq, 1.0 / 3.0, atol=0.01)

    def test_gaussian_sample_mean(self):
        net = FeedForwardNet((1, 2))  # zero net: mean tanh(0)=0, std softplus(0)+floor
        policy = DiagonalGaussianPolicy(net, 1)
        rng = np.random.default_rng(2)
        actions, _ = policy.sample_actions(np.zeros((1, 1)), 10**5, rng)
        assert abs(actions.mean()) < 0.02 * (np.log(2) + 1)

    def test_sample_reproducible_for_fixed_seed(self):
        policy = TabularCategoricalPolicy.from_probs(np.array([0.3, 0.7]))
        a = [policy.sample(0, np.random.default_rng(42)) for _ in range(10)]
        b = [policy.sample(0, np.random.default_rng(42)) for _ in range(10)]
        assert a == b

    def test_sample_actions_log_probs_match_distribution(self):
        policy = TabularCategoricalPolicy.from_probs(np.array([[0.2, 0.8], [0.6, 0.4]]))
        rng = np.random.default_rng(3)
        actions, logp = policy.sample_actions(np.array([0, 1]), 7, rng)
        probs = policy.probs
        for i in range(2):
            for j in range(7):
                assert logp[i, j] == pytest.approx(np.log(probs[i, actions[i, j]]))

    def test_gaussian_sample_actions_log_probs(self):
        policy = make_gaussian_policy(action_dim=2)
        rng = np.random.default_rng(4)
        states = rng.standard_normal((3, 2))
        actions, logp = policy.sample_actions(states, 5, rng)
        d = policy.dist(states)
        for i in range(3):
            for j in range(5):
                expected = gaussian_log_prob(d.mean[i], d.std[i], actions[i, j])
                assert logp[i, j] == pytest.approx(float(expected))


class TestPolicySurface:
    def test_tabular_rows_are_distributions(self):
        rng = np.random.default_rng(6)
        policy = TabularCategoricalPolicy(5, 4, logits=rng.standard_normal((5, 4)))
        rows = policy.probs
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)

    def test_parametric_categorical_rows_are_distributions(self):
        rng = np.random.default_rng(7)
        policy = ParametricCategoricalPolicy(FeedForwardNet((3, 16, 4), rng=rng))
        probs = policy.dist(rng.standard_normal((6, 3))).probs
        assert np.all(np.isfinite(probs)) and np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_gaussian_std_respects_variance_floor(self):
        policy = make_gaussian_policy(min_variance=0.04)
        d = policy.dist(np.random.default_rng(8).standard_normal((10, 2)))
        assert np.all(d.std >= 0.2)

    def test_gaussian_tanh_mean_bounded(self):
        policy = make_gaussian_policy(tanh_mean=True)
        d = policy.dist(np.random.default_rng(9).standard_normal((10, 2)) * 10)
        assert np.all(np.abs(d.mean) <= 1.0)

    def test_set_params_round_trip(self):
        policy = TabularCategoricalPolicy(2, 3)
        flat = np.arange(6, dtype=np.float64)
        policy.set_params(flat)
        np.testing.assert_array_equal(policy.params, flat)

    def test_clone_detaches_parameters(self):
        policy = make_gaussian_policy()
        other = policy.clone()
        other.net.params[:] = 0.0
        assert not np.all(policy.net.params == 0.0)

    def test_backward_heads_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        policy = make_gaussian_policy(rng=rng, action_dim=2)
        states = rng.standard_normal((4, 2))
        wm = rng.standard_normal((4, 2))
        ws = rng.standard_normal((4, 2))

        def objective():
            d = policy.dist(states)
            return float(np.sum(wm * d.mean) + np.sum(ws * d.std))

        mean, std, cache = policy.heads_cached(states)
        g = policy.backward_heads(cache, wm, ws)
        h = 1e-6
        base = policy.net.params.copy()
        fd = np.empty_like(g)
        for i in range(policy.n_params):
            policy.net.params[i] = base[i] + h
            up = objective()
            policy.net.params[i] = base[i] - h
            down = objective()
            policy.net.params[i] = base[i]
            fd[i] = (up - down) / (2 * h)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(g - fd) / scale) < 1e-4


class TestSnapshots:
    def test_tabular_round_trip(self, tmp_path):
        policy = TabularCategoricalPolicy.from_probs(np.array([[0.2, 0.8], [0.5, 0.5]]))
        path = tmp_path / "snap.json"
        save_snapshot(policy, path, metadata={"run_id": "x"})
        loaded, meta = load_snapshot(path)
        assert meta["run_id"] == "x"
        np.testing.assert_allclose(loaded.probs, policy.probs, atol=1e-12)

    def test_parametric_categorical_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        policy = ParametricCategoricalPolicy(
            FeedForwardNet((3, 8, 4), layer_norm_first=True, rng=rng))
        path = tmp_path / "snap.json"
        save_snapshot(policy, path)
        loaded, _ = load_snapshot(path)
        x = rng.standard_normal((5, 3))
        np.testing.assert_allclose(loaded.dist(x).probs, policy.dist(x).probs, atol=1e-12)

    def test_gaussian_round_trip(self, tmp_path):
        policy = make_gaussian_policy(action_dim=2, bounds=(-1.0, 1.0), min_variance=1e-8)
        path = tmp_path / "snap.json"
        save_snapshot(policy, path)
        loaded, _ = load_snapshot(path)
        assert loaded.bounds == (-1.0, 1.0)
        assert loaded.min_variance == 1e-8
        x = np.random.default_rng(12).standard_normal((5, 2))
        np.testing.assert_allclose(loaded.dist(x).mean, policy.dist(x).mean, atol=1e-12)
        np.testing.assert_allclose(loaded.dist(x).std, policy.dist(x).std, atol=1e-12)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            load_snapshot({"family": "mixture", "layer_sizes": [1], "params": []})
