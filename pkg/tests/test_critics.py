"""Per-objective policy evaluation.

Oracles: closed-form bandit Q tables, a linear-system solve for exact Q^pi on
small deterministic MDPs (both the TD(0) and the off-policy corrected paths
must converge to it), hand-computed two-step corrected targets that
distinguish clipped from unclipped importance ratios, and Monte-Carlo moments
for the Gaussian value expectation."""
import numpy as np
import pytest

from mompo.critics import (
    CriticBank,
    DirectActionPenalty,
    ExactBanditCritic,
    QNetworkCritic,
    TabularQCritic,
    VNetworkCritic,
    exact_bandit_q,
    fit_q,
    fit_v,
    nstep_v_targets,
    retrace_targets,
    sync_targets,
    td0_batch_update,
    td0_update,
)
from mompo.envs import DeepSeaTreasure, SimpleWorld
from mompo.nn import FeedForwardNet
from mompo.policies import DiagonalGaussianPolicy, TabularCategoricalPolicy
from mompo.types import Box, Discrete

GAMMA = 0.9


def state_index(obs) -> int:
    return int(obs[0])


def make_det_mdp(rng):
    """Random deterministic 3-state, 2-action MDP plus a random policy.

    Deterministic dynamics make every temporal-difference error vanish
    pointwise at Q^pi, so sampled multi-step targets have a noise-free fixed
    point and tight tolerances are legitimate."""
    nxt = rng.integers(0, 3, size=(3, 2))
    rew = rng.uniform(0.0, 1.0, size=(3, 2))
    probs = rng.dirichlet(np.ones(2), size=3)
    return nxt, rew, probs


def exact_q_pi(nxt, rew, probs, gamma=GAMMA) -> np.ndarray:
    """Q^pi from the linear system (I - gamma * P_pi) q = r over (s, a) pairs."""
    P = np.zeros((6, 6))
    for s in range(3):
        for a in range(2):
            s2 = int(nxt[s, a])
            for a2 in range(2):
                P[s * 2 + a, s2 * 2 + a2] = probs[s2, a2]
    q = np.linalg.solve(np.eye(6) - gamma * P, rew.reshape(-1))
    return q.reshape(3, 2)


def behavior_sequences(nxt, rew, rng, *, n_seq, length=8, bprobs=None):
    """Length-`length` continuing windows; actions from bprobs (uniform if None)."""
    seqs = []
    for _ in range(n_seq):
        s = int(rng.integers(0, 3))
        states, actions, rewards, nstates, bp = [], [], [], [], []
        for _ in range(length):
            row = np.array([0.5, 0.5]) if bprobs is None else bprobs[s]
            a = int(rng.random() < row[1])
            states.append([float(s)])
            actions.append(a)
            rewards.append([rew[s, a]])
            bp.append(row[a])
            s = int(nxt[s, a])
            nstates.append([float(s)])
        seqs.append({
            "states": np.array(states),
            "actions": np.array(actions),
            "rewards": np.array(rewards),
            "next_states": np.array(nstates),
            "behavior_probs": np.array(bp),
            "terminals": np.zeros(length, dtype=bool),
        })
    return seqs


class TestExactBandit:
    def test_q_table_is_reward_table_transposed(self):
        np.testing.assert_array_equal(exact_bandit_q(SimpleWorld()),
                                      [[1, 4, 3], [4, 1, 3]])

    def test_scaled_first_objective(self):
        q = exact_bandit_q(SimpleWorld(scale_first_objective=20.0))
        np.testing.assert_array_equal(q, [[20, 80, 60], [4, 1, 3]])

    def test_rejects_sequential_environment(self):
        with pytest.raises(ValueError):
            exact_bandit_q(DeepSeaTreasure())

    def test_critic_wrapper_broadcasts(self):
        crit = ExactBanditCritic(np.array([1.0, 4.0, 3.0]))
        np.testing.assert_array_equal(crit.q([0, 0], [2, 0]), [3.0, 1.0])
        np.testing.assert_array_equal(crit.q_all([0, 0]), [[1, 4, 3], [1, 4, 3]])


class TestTabularTD:
    def test_single_update_nonterminal(self):
        q = np.zeros((2, 2))
        td0_update(q, 0, 1, reward=1.0, value_of_next=2.0, terminal=False,
                   gamma=0.5, lr=0.1)
        assert q[0, 1] == pytest.approx(0.2)  # 0.1 * (1 + 0.5 * 2)

    def test_single_update_terminal_ignores_bootstrap(self):
        q = np.zeros((2, 2))
        td0_update(q, 0, 1, reward=1.0, value_of_next=2.0, terminal=True,
                   gamma=0.5, lr=0.1)
        assert q[0, 1] == pytest.approx(0.1)

    def test_batch_update_averages_duplicate_pairs(self):
        crit = TabularQCritic(1, 2)
        td0_batch_update(crit, [0, 0], [0, 0], np.array([1.0, 3.0]),
                         np.zeros((2, 2)), [0, 0], [True, True],
                         gamma=GAMMA, lr=1.0)
        assert crit.online[0, 0] == pytest.approx(2.0)  # mean, not two steps

    def test_batch_update_bootstraps_from_target_table(self):
        crit = TabularQCritic(2, 2)
        crit.online[:] = 100.0  # must not be consulted for the bootstrap
        crit.target[:] = np.array([[1.0, 3.0], [0.0, 0.0]])
        crit.online[:] = 0.0
        td0_batch_update(crit, [1], [0], np.array([0.0]),
                         np.array([[0.5, 0.5]]), [0], [False],
                         gamma=0.5, lr=1.0)
        assert crit.online[1, 0] == pytest.approx(0.5 * (0.5 * 1 + 0.5 * 3))

    def test_expected_td_converges_to_exact_q(self):
        rng = np.random.default_rng(10)
        nxt, rew, probs = make_det_mdp(rng)
        crit = TabularQCritic(3, 2)
        s_idx = np.repeat(np.arange(3), 2)
        actions = np.tile(np.arange(2), 3)
        rewards = rew.reshape(-1)
        next_idx = nxt.reshape(-1)
        next_probs = probs[next_idx]
        terminals = np.zeros(6, dtype=bool)
        for _ in range(400):
            td0_batch_update(crit, s_idx, actions, rewards, next_probs,
                             next_idx, terminals, gamma=GAMMA, lr=1.0)
            crit.sync()
        np.testing.assert_allclose(crit.online, exact_q_pi(nxt, rew, probs),
                                   atol=1e-8)


class TestQNetwork:
    def test_fit_returns_prestep_mse(self):
        rng = np.random.default_rng(0)
        crit = QNetworkCritic(2, Discrete(3), (16,), rng, lr=1e-3)
        states = rng.standard_normal((8, 2))
        actions = rng.integers(0, 3, size=8)
        targets = rng.standard_normal(8)
        before = crit.q(states, actions, target=False)
        loss = crit.fit(states, actions, targets)
        assert loss == pytest.approx(np.mean((before - targets) ** 2))

    def test_target_frozen_until_sync(self):
        rng = np.random.default_rng(1)
        crit = QNetworkCritic(2, Discrete(2), (8,), rng, lr=1e-2)
        states = rng.standard_normal((4, 2))
        actions = np.array([0, 1, 0, 1])
        frozen = crit.q(states, actions, target=True)
        for _ in range(5):
            crit.fit(states, actions, np.ones(4))
        np.testing.assert_array_equal(crit.q(states, actions, target=True), frozen)
        crit.sync()
        np.testing.assert_array_equal(crit.q(states, actions, target=True),
                                      crit.q(states, actions, target=False))

    def test_regression_learns_action_identity(self):
        rng = np.random.default_rng(2)
        crit = QNetworkCritic(1, Discrete(2), (32,), rng, lr=1e-2)
        states = rng.standard_normal((64, 1))
        actions = rng.integers(0, 2, size=64)
        targets = actions.astype(float)
        losses = [crit.fit(states, actions, targets) for _ in range(600)]
        assert losses[-1] < 1e-2 < losses[0] or losses[-1] < 1e-2

    def test_nonfinite_targets_rejected(self):
        rng = np.random.default_rng(3)
        crit = QNetworkCritic(1, Discrete(2), (8,), rng)
        with pytest.raises(FloatingPointError):
            crit.fit(np.zeros((1, 1)), [0], [np.nan])

    def test_tanh_action_squashes_before_the_net(self):
        rng = np.random.default_rng(4)
        crit = QNetworkCritic(1, Box(1, -1.0, 1.0), (16,), rng, tanh_action=True)
        plain = QNetworkCritic(1, Box(1, -1.0, 1.0), (16,), rng)
        plain.online.params[:] = crit.online.params
        s = np.zeros((3, 1))
        a = np.array([[5.0], [-0.3], [0.0]])
        np.testing.assert_array_equal(crit.q(s, a, target=False),
                                      plain.q(s, np.tanh(a), target=False))


class TestPenalty:
    def test_euclidean_norm(self):
        pen = DirectActionPenalty()
        np.testing.assert_allclose(pen.q(None, np.array([[3.0, 4.0]])), [-5.0])

    def test_scalar_actions(self):
        pen = DirectActionPenalty()
        np.testing.assert_allclose(pen.q(None, np.array([2.0, -3.0])), [-2.0, -3.0])


class TestCriticBank:
    def test_q_matrix_gathers_per_objective(self):
        crit = TabularQCritic(3, 4)
        crit.online[:] = np.arange(12).reshape(3, 4)
        crit.sync()
        pen_free = TabularQCritic(3, 4)
        pen_free.online[:] = -1.0
        pen_free.sync()
        bank = CriticBank([crit, pen_free])
        actions = np.array([[0, 1], [3, 2]])
        q = bank.q_matrix(None, np.array([2, 1]), actions)
        assert q.shape == (2, 2, 2)
        np.testing.assert_array_equal(q[0], [[8, 9], [7, 6]])
        np.testing.assert_array_equal(q[1], -np.ones((2, 2)))

    def test_q_matrix_online_flag(self):
        crit = TabularQCritic(1, 2)
        crit.online[:] = 5.0  # target still zero
        bank = CriticBank([crit])
        np.testing.assert_array_equal(
            bank.q_matrix(None, [0], np.array([[0, 1]])), [[[0.0, 0.0]]])
        np.testing.assert_array_equal(
            bank.q_matrix(None, [0], np.array([[0, 1]]), target=False),
            [[[5.0, 5.0]]])

    def test_v_under_categorical_policy_is_exact(self):
        crit = TabularQCritic(1, 2)
        crit.online[:] = np.array([[1.0, 3.0]])
        crit.sync()
        bank = CriticBank([crit])
        policy = TabularCategoricalPolicy.from_probs(np.array([0.2, 0.8]))
        v = bank.v_under_policy(0, None, np.array([0]), policy)
        np.testing.assert_allclose(v, [2.6])

    def test_v_under_gaussian_policy_matches_folded_normal_moment(self):
        net = FeedForwardNet((2, 4, 2), layer_norm_first=False)  # zero weights
        policy = DiagonalGaussianPolicy(net, 1, tanh_mean=False)
        bank = CriticBank([DirectActionPenalty()])
        states = np.zeros((3, 2))
        v = bank.v_under_policy(0, states, None, policy,
                                rng=np.random.default_rng(5), n_samples=4000)
        sigma = np.log(2.0) + np.sqrt(1e-12)  # softplus(0) plus the floor
        expected = -sigma * np.sqrt(2.0 / np.pi)
        np.testing.assert_allclose(v, np.full(3, expected), atol=0.03)

    def test_v_under_gaussian_policy_requires_rng(self):
        net = FeedForwardNet((2, 4, 2), layer_norm_first=False)
        policy = DiagonalGaussianPolicy(net, 1, tanh_mean=False)
        bank = CriticBank([DirectActionPenalty()])
        with pytest.raises(ValueError):
            bank.v_under_policy(0, np.zeros((1, 2)), None, policy)

    def test_sync_targets_wrapper_returns_bank(self):
        crit = TabularQCritic(1, 1)
        crit.online[:] = 7.0
        bank = CriticBank([crit])
        assert sync_targets(bank) is bank
        assert crit.target[0, 0] == 7.0


class TestRetrace:
    def _two_step_setup(self):
        crit = TabularQCritic(2, 2)
        crit.online[:] = np.array([[1.0, 99.0], [2.0, 4.0]])
        crit.sync()
        crit.online[:] = -123.0  # targets must come from the frozen table
        bank = CriticBank([crit])
        policy = TabularCategoricalPolicy.from_probs(
            np.array([[0.2, 0.8], [0.75, 0.25]]))
        return bank, policy

    def _two_step_sequence(self, b1):
        return {
            "states": np.array([[0.0], [1.0]]),
            "actions": np.array([0, 1]),
            "rewards": np.array([[1.0], [3.0]]),
            "next_states": np.array([[1.0], [0.0]]),
            "behavior_probs": np.array([0.4, b1]),
            "terminals": np.array([False, True]),
        }

    def test_hand_computed_targets_with_partial_ratio(self):
        # V(s1) = 0.75*2 + 0.25*4 = 2.5; delta_0 = 1 + .5*2.5 - 1 = 1.25;
        # delta_1 = 3 - 4 = -1; c_1 = 0.25/0.5; target_0 = 1 + 1.25 - .125*2
        bank, policy = self._two_step_setup()
        t = retrace_targets(self._two_step_sequence(0.5), bank, policy, 0.5,
                            objective=0, state_index=state_index)
        np.testing.assert_allclose(t, [2.0, 3.0], rtol=1e-12)

    def test_importance_ratio_clipped_at_one(self):
        # pi/b = 0.25/0.125 = 2 clips to 1: target_0 = 1 + 1.25 - 0.5
        bank, policy = self._two_step_setup()
        t = retrace_targets(self._two_step_sequence(0.125), bank, policy, 0.5,
                            objective=0, state_index=state_index)
        np.testing.assert_allclose(t, [1.75, 3.0], rtol=1e-12)

    def test_zero_behavior_probability_rejected(self):
        bank, policy = self._two_step_setup()
        with pytest.raises(ValueError):
            retrace_targets(self._two_step_sequence(0.0), bank, policy, 0.5,
                            objective=0, state_index=state_index)

    def test_all_objectives_stack_rows(self):
        bank, policy = self._two_step_setup()
        other = TabularQCritic(2, 2)
        other.online[:] = 0.5
        other.sync()
        bank.estimators.append(other)
        seq = self._two_step_sequence(0.5)
        seq["rewards"] = np.hstack([seq["rewards"], [[0.0], [1.0]]])
        both = retrace_targets(seq, bank, policy, 0.5, state_index=state_index)
        assert both.shape == (2, 2)
        for k in range(2):
            np.testing.assert_array_equal(
                both[k], retrace_targets(seq, bank, policy, 0.5, objective=k,
                                         state_index=state_index))

    def test_on_policy_zero_critic_equals_monte_carlo_return(self):
        rng = np.random.default_rng(11)
        nxt, rew, probs = make_det_mdp(rng)
        bank = CriticBank([TabularQCritic(3, 2)])  # all-zero tables
        policy = TabularCategoricalPolicy.from_probs(probs)
        for seq in behavior_sequences(nxt, rew, rng, n_seq=10, bprobs=probs):
            targets = retrace_targets(seq, bank, policy, GAMMA, objective=0,
                                      state_index=state_index)
            acc, mc = 0.0, np.empty(8)
            for t in reversed(range(8)):
                acc = seq["rewards"][t, 0] + GAMMA * acc
                mc[t] = acc
            np.testing.assert_allclose(targets, mc, atol=1e-10)

    def test_off_policy_fixed_point_is_exact_q(self):
        rng = np.random.default_rng(12)
        nxt, rew, probs = make_det_mdp(rng)
        crit = TabularQCritic(3, 2)
        bank = CriticBank([crit])
        policy = TabularCategoricalPolicy.from_probs(probs)
        seqs = behavior_sequences(nxt, rew, rng, n_seq=40)  # uniform behavior
        for it in range(300):
            sums = np.zeros((3, 2))
            counts = np.zeros((3, 2))
            for seq in seqs:
                targets = retrace_targets(seq, bank, policy, GAMMA, objective=0,
                                          state_index=state_index)
                s = seq["states"][:, 0].astype(int)
                a = seq["actions"]
                np.add.at(sums, (s, a), targets)
                np.add.at(counts, (s, a), 1.0)
            assert counts.min() > 0  # every pair visited under uniform behavior
            crit.online[:] = sums / counts
            crit.sync()
        np.testing.assert_allclose(crit.online, exact_q_pi(nxt, rew, probs),
                                   atol=1e-6)


class TestValueTargets:
    def _const_vnet(self, value: float) -> VNetworkCritic:
        crit = VNetworkCritic(1, (4,), rng=None, layer_norm_first=False)
        crit.online.bias(1)[:] = value  # zero weights, constant output
        crit.sync()
        return crit

    def test_undiscounted_zero_value_gives_reward_sums(self):
        bank = CriticBank([self._const_vnet(0.0)])
        segment = {
            "states": np.zeros((2, 1)),
            "rewards": np.array([[1.0], [1.0]]),
            "next_states": np.zeros((2, 1)),
            "terminals": np.array([False, False]),
        }
        targets, adv = nstep_v_targets(segment, bank, 0, gamma=1.0)
        np.testing.assert_allclose(targets, [2.0, 1.0])
        np.testing.assert_allclose(adv, [2.0, 1.0])

    def test_bootstrap_discounts_final_value(self):
        bank = CriticBank([self._const_vnet(1.0)])
        segment = {
            "states": np.zeros((2, 1)),
            "rewards": np.zeros((2, 1)),
            "next_states": np.zeros((2, 1)),
            "terminals": np.array([False, False]),
        }
        targets, adv = nstep_v_targets(segment, bank, 0, gamma=0.5)
        np.testing.assert_allclose(targets, [0.25, 0.5])
        np.testing.assert_allclose(adv, [-0.75, -0.5])

    def test_terminal_segment_has_zero_bootstrap(self):
        bank = CriticBank([self._const_vnet(1.0)])
        segment = {
            "states": np.zeros((2, 1)),
            "rewards": np.zeros((2, 1)),
            "next_states": np.zeros((2, 1)),
            "terminals": np.array([False, True]),
        }
        targets, _ = nstep_v_targets(segment, bank, 0, gamma=0.5)
        np.testing.assert_allclose(targets, [0.0, 0.0])

    def test_fit_v_regresses_targets(self):
        rng = np.random.default_rng(6)
        crit = VNetworkCritic(1, (16,), rng, lr=1e-2)
        bank = CriticBank([crit])
        states = rng.standard_normal((32, 1))
        targets = 0.5 * states[:, 0]
        losses = [fit_v(bank, 0, states, targets) for _ in range(400)]
        assert losses[-1] < min(1e-2, losses[0])

    def test_fit_q_wrapper_updates_online_net(self):
        rng = np.random.default_rng(7)
        crit = QNetworkCritic(1, Discrete(2), (8,), rng, lr=1e-2)
        bank = CriticBank([crit])
        before = crit.online.params.copy()
        loss = fit_q(bank, 0, np.zeros((2, 1)), [0, 1], [1.0, -1.0])
        assert loss > 0
        assert not np.array_equal(crit.online.params, before)
