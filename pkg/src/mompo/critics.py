"""Per-objective policy evaluation.

One estimator per objective, every estimator evaluated against the shared
current policy pi_old (never against per-critic greedy actions, which would
re-introduce the illusion of control). Estimator kinds:

  exact_bandit  - closed-form Q for single-state bandits
  table         - tabular Q updated by expected TD(0)
  qnet          - Q-network on state (+) encoded action, trained on Retrace targets
  vnet          - V-network for the on-policy advantage path
  penalty       - critic-free action-norm penalty, Q(s, a) = -||a||_2

Each estimator keeps online and target parameters; targets are immutable
between syncs, so reads may run concurrently with online fitting.
"""
from __future__ import annotations

import numpy as np

from .nn import AdamState, FeedForwardNet, adam_step
from .policies import gaussian_log_prob

__all__ = [
    "TabularQCritic",
    "QNetworkCritic",
    "VNetworkCritic",
    "DirectActionPenalty",
    "ExactBanditCritic",
    "CriticBank",
    "exact_bandit_q",
    "td0_update",
    "td0_batch_update",
    "retrace_targets",
    "fit_q",
    "fit_v",
    "nstep_v_targets",
    "sync_targets",
]


def exact_bandit_q(env) -> np.ndarray:
    """Q table [N, |A|] for a single-state bandit: Q_k(a) = r_k(a)."""
    if env.spec.max_episode_steps != 1 or getattr(env, "n_states", 0) != 1:
        raise ValueError("exact_bandit_q requires a single-state, single-step environment")
    return env.reward_table().T.copy()


class ExactBanditCritic:
    """Wraps the closed-form bandit Q for one objective."""

    kind = "exact_bandit"
    needs_index = True

    def __init__(self, q_row: np.ndarray):
        self.q_row = np.asarray(q_row, dtype=np.float64)  # [A]

    def q(self, state_idx, actions, target: bool = True) -> np.ndarray:
        return self.q_row[np.asarray(actions, dtype=np.int64)]

    def q_all(self, state_idx, target: bool = True) -> np.ndarray:
        idx = np.asarray(state_idx, dtype=np.int64).reshape(-1)
        return np.broadcast_to(self.q_row, (idx.shape[0], self.q_row.shape[0])).copy()

    def sync(self) -> None:
        pass


class TabularQCritic:
    kind = "table"
    needs_index = True

    def __init__(self, n_states: int, n_actions: int):
        self.online = np.zeros((n_states, n_actions))
        self.target = self.online.copy()

    def q(self, state_idx, actions, target: bool = True) -> np.ndarray:
        table = self.target if target else self.online
        return table[np.asarray(state_idx, dtype=np.int64),
                     np.asarray(actions, dtype=np.int64)]

    def q_all(self, state_idx, target: bool = True) -> np.ndarray:
        table = self.target if target else self.online
        return table[np.asarray(state_idx, dtype=np.int64)]

    def sync(self) -> None:
        self.target = self.online.copy()


class QNetworkCritic:
    """Q-network taking the state concatenated with an encoded action.

    Discrete actions are one-hot encoded; box actions are passed through,
    optionally squashed by tanh.
    """

    kind = "qnet"
    needs_index = False

    def __init__(self, state_dim: int, action_space, layers, rng, *,
                 layer_norm_first: bool = True, tanh_action: bool = False,
                 lr: float = 3e-4, adam_eps: float = 1e-3):
        self.discrete = hasattr(action_space, "n")
        self.n_actions = action_space.n if self.discrete else None
        self.action_dim = self.n_actions if self.discrete else action_space.dim
        self.tanh_action = tanh_action
        sizes = (state_dim + self.action_dim, *layers, 1)
        self.online = FeedForwardNet(sizes, layer_norm_first=layer_norm_first, rng=rng)
        self.target = self.online.clone()
        self.adam = AdamState.for_params(self.online.n_params, lr=lr, eps=adam_eps)

    def _encode(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if self.discrete:
            a = np.asarray(actions, dtype=np.int64).reshape(-1)
            onehot = np.zeros((a.shape[0], self.n_actions))
            onehot[np.arange(a.shape[0]), a] = 1.0
            enc = onehot
        else:
            enc = np.asarray(actions, dtype=np.float64).reshape(states.shape[0], -1)
            if self.tanh_action:
                enc = np.tanh(enc)
        return np.concatenate([states, enc], axis=1)

    def q(self, states, actions, target: bool = True) -> np.ndarray:
        net = self.target if target else self.online
        return net.forward(self._encode(states, actions))[:, 0]

    def fit(self, states, actions, targets) -> float:
        """One Adam step on mean squared error; returns the pre-step loss."""
        x = self._encode(states, actions)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(targets)):
            raise FloatingPointError("non-finite critic targets")
        y, cache = self.online.forward_cached(x)
        err = y[:, 0] - targets
        loss = float(np.mean(err**2))
        grads = self.online.backward(cache, (2.0 * err / err.shape[0])[:, None])
        adam_step(self.online.params, grads, self.adam)
        return loss

    def sync(self) -> None:
        self.target = self.online.clone()


class VNetworkCritic:
    kind = "vnet"
    needs_index = False

    def __init__(self, state_dim: int, layers, rng, *, layer_norm_first: bool = True,
                 lr: float = 3e-4, adam_eps: float = 1e-3):
        self.online = FeedForwardNet((state_dim, *layers, 1), layer_norm_first=layer_norm_first, rng=rng)
        self.target = self.online.clone()
        self.adam = AdamState.for_params(self.online.n_params, lr=lr, eps=adam_eps)

    def v(self, states, target: bool = False) -> np.ndarray:
        net = self.target if target else self.online
        return net.forward(np.asarray(states, dtype=np.float64))[:, 0]

    def fit(self, states, targets) -> float:
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        y, cache = self.online.forward_cached(np.asarray(states, dtype=np.float64))
        err = y[:, 0] - targets
        loss = float(np.mean(err**2))
        grads = self.online.backward(cache, (2.0 * err / err.shape[0])[:, None])
        adam_step(self.online.params, grads, self.adam)
        return loss

    def sync(self) -> None:
        self.target = self.online.clone()


class DirectActionPenalty:
    """State-independent penalty objective: Q(s, a) = -||a||_2, no learning."""

    kind = "penalty"
    needs_index = False

    def q(self, states, actions, target: bool = True) -> np.ndarray:
        a = np.asarray(actions, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        return -np.sqrt((a * a).sum(axis=-1))

    def sync(self) -> None:
        pass


def td0_update(qtable: np.ndarray, s: int, a: int, reward: float, value_of_next: float,
               terminal: bool, gamma: float, lr: float) -> np.ndarray:
    """One tabular TD(0) update: Q(s,a) += lr * (r + gamma * V(s') - Q(s,a)),
    with V(s') = E_{pi_old}[Q(s', .)] supplied by the caller and 0 at terminal."""
    bootstrap = 0.0 if terminal else gamma * value_of_next
    qtable[s, a] += lr * (reward + bootstrap - qtable[s, a])
    return qtable


def td0_batch_update(critic: TabularQCritic, s_idx, actions, rewards, next_probs,
                     next_idx, terminals, gamma: float, lr: float) -> None:
    """Vectorized expected-TD(0) minibatch update.

    next_probs [B, A] are pi_old's rows at the next states; bootstrap values
    come from the target table. Repeated (s, a) pairs contribute the mean of
    their targets (one effective update per pair), which shares the fixed
    point of sequential TD while staying stable for large duplicated batches.
    """
    s_idx = np.asarray(s_idx, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    v_next = (next_probs * critic.target[np.asarray(next_idx, dtype=np.int64)]).sum(axis=1)
    targets = rewards + gamma * v_next * (~np.asarray(terminals, dtype=bool))
    n_actions = critic.online.shape[1]
    pair = s_idx * n_actions + actions
    unique, inv = np.unique(pair, return_inverse=True)
    mean_targets = np.bincount(inv, weights=targets) / np.bincount(inv)
    us, ua = unique // n_actions, unique % n_actions
    critic.online[us, ua] += lr * (mean_targets - critic.online[us, ua])


class CriticBank:
    """One estimator per objective with shared sync bookkeeping."""

    def __init__(self, estimators: list, target_period: int = 200):
        self.estimators = list(estimators)
        self.target_period = int(target_period)

    @property
    def n_objectives(self) -> int:
        return len(self.estimators)

    def sync_targets(self) -> None:
        for est in self.estimators:
            est.sync()

    def _states_for(self, est, states, state_idx):
        return state_idx if est.needs_index else states

    def q_matrix(self, states, state_idx, actions, *, target: bool = True) -> np.ndarray:
        """Q values [N, L, M] for M candidate actions per state, from the
        target parameters (the evaluation side of each improvement step)."""
        actions = np.asarray(actions)
        L, M = actions.shape[0], actions.shape[1]
        out = np.empty((len(self.estimators), L, M))
        for k, est in enumerate(self.estimators):
            s = self._states_for(est, states, state_idx)
            if est.needs_index:
                s_rep = np.repeat(np.asarray(s, dtype=np.int64), M)
            else:
                s_rep = np.repeat(np.asarray(s, dtype=np.float64), M, axis=0)
            a_flat = actions.reshape(L * M, *actions.shape[2:])
            out[k] = est.q(s_rep, a_flat, target=target).reshape(L, M)
        return out

    def v_under_policy(self, k: int, states, state_idx, policy, *, rng=None,
                       n_samples: int = 20, target: bool = True) -> np.ndarray:
        """V(s) = E_{pi_old}[Q_k(s, .)]: exact for categorical policies, by
        n_samples-draw Monte Carlo for Gaussians."""
        est = self.estimators[k]
        dist_states = state_idx if hasattr(policy, "n_states") else states
        d = policy.dist(dist_states)
        if hasattr(d, "probs"):
            if hasattr(est, "q_all"):
                q_all = est.q_all(self._states_for(est, states, state_idx), target=target)
            else:
                B, A = d.probs.shape
                q_all = np.empty((B, A))
                for a in range(A):
                    q_all[:, a] = est.q(states, np.full(B, a), target=target)
            return (d.probs * q_all).sum(axis=1)
        if rng is None:
            raise ValueError("Gaussian V expectation needs an rng for Monte Carlo")
        actions, _ = policy.sample_actions(states, n_samples, rng)
        s = self._states_for(est, states, state_idx)
        s_rep = np.repeat(np.asarray(s, dtype=np.float64), n_samples, axis=0)
        q = est.q(s_rep, actions.reshape(-1, actions.shape[-1]), target=target)
        return q.reshape(len(states), n_samples).mean(axis=1)


def _policy_action_probs(policy, states, state_idx, actions) -> np.ndarray:
    """pi_old(a_t | s_t) for the actions stored in a sequence."""
    dist_states = state_idx if hasattr(policy, "n_states") else states
    d = policy.dist(dist_states)
    if hasattr(d, "probs"):
        a = np.asarray(actions, dtype=np.int64).reshape(-1, 1)
        return np.take_along_axis(d.probs, a, axis=1)[:, 0]
    return np.exp(gaussian_log_prob(d.mean, d.std, np.asarray(actions, dtype=np.float64)))


def retrace_targets(sequence: dict, bank: CriticBank, policy_old, gamma: float, *,
                    objective: int | None = None, rng=None, n_samples: int = 20,
                    state_index=None) -> np.ndarray:
    """Off-policy corrected targets for one contiguous sequence.

    Q_ret_k(s_t, a_t) = Qhat'(s_t, a_t) + sum_{j>=t} gamma^{j-t} (prod_{z=t+1..j} c_z) delta_j
      c_z     = min(1, pi_old(a_z|s_z) / b(a_z|s_z))
      delta_j = r_k + gamma V(s_{j+1}) - Qhat'(s_j, a_j)
      V(s')   = E_{pi_old}[Qhat'(s', .)], 0 at terminal

    Returns [T] for a single objective or [N, T] when objective is None.
    """
    b = np.asarray(sequence["behavior_probs"], dtype=np.float64)
    if np.any(b <= 0.0):
        raise ValueError("zero behavior probability in sequence")
    states = sequence["states"]
    next_states = sequence["next_states"]
    terminals = np.asarray(sequence["terminals"], dtype=bool)
    actions = sequence["actions"]
    s_idx = n_idx = None
    if state_index is not None:
        s_idx = np.asarray([state_index(s) for s in states], dtype=np.int64)
        n_idx = np.asarray([state_index(s) for s in next_states], dtype=np.int64)

    pi = _policy_action_probs(policy_old, states, s_idx, actions)
    c = np.minimum(1.0, pi / b)

    ks = list(range(bank.n_objectives)) if objective is None else [objective]
    out = np.empty((len(ks), len(b)))
    for row, k in enumerate(ks):
        est = bank.estimators[k]
        qhat = est.q(bank._states_for(est, states, s_idx), actions, target=True)
        v_next = bank.v_under_policy(k, next_states, n_idx, policy_old,
                                     rng=rng, n_samples=n_samples, target=True)
        v_next = np.where(terminals, 0.0, v_next)
        delta = sequence["rewards"][:, k] + gamma * v_next - qhat
        acc = 0.0
        corr = np.empty_like(delta)
        for t in reversed(range(len(delta))):
            acc = delta[t] + (gamma * c[t + 1] * acc if t + 1 < len(delta) else 0.0)
            corr[t] = acc
        out[row] = qhat + corr
    return out if objective is None else out[0]


def fit_q(bank: CriticBank, k: int, states, actions, targets) -> float:
    """One Adam step of squared-error regression for objective k's Q-network."""
    return bank.estimators[k].fit(states, actions, targets)


def fit_v(bank: CriticBank, k: int, states, targets) -> float:
    return bank.estimators[k].fit(states, targets)


def nstep_v_targets(segment: dict, vbank: CriticBank, k: int, gamma: float):
    """T-step value targets and advantages for one on-policy segment.

    G(s_t) = sum_{l=t..T-1} gamma^{l-t} r_k + gamma^{T-t} V(s_T), bootstrapped
    from the segment's final next state (0 if terminal); A = G - V(s_t).
    """
    est = vbank.estimators[k]
    rewards = np.asarray(segment["rewards"], dtype=np.float64)[:, k]
    T = rewards.shape[0]
    if bool(segment["terminals"][-1]):
        v_boot = 0.0
    else:
        last = np.asarray(segment["next_states"], dtype=np.float64)[-1:]
        v_boot = float(est.v(last, target=False)[0])
    targets = np.empty(T)
    acc = v_boot
    for t in reversed(range(T)):
        acc = rewards[t] + gamma * acc
        targets[t] = acc
    v_states = est.v(segment["states"], target=False)
    return targets, targets - v_states


def sync_targets(bank: CriticBank) -> CriticBank:
    bank.sync_targets()
    return bank
