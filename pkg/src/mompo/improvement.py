"""Per-objective policy improvement and trust-region policy fitting.

Step 1 (per objective): given Q values for M candidate actions at each of L
states, find the temperature eta_k whose exponentiated-Q reweighting of the
base action distribution stays within the KL budget epsilon_k, by minimizing
the convex dual

    g(eta) = eta * epsilon + eta * (1/L) sum_i log sum_j rho_ij exp(Q_ij / eta)

whose gradient is epsilon minus the mean sample KL of the reweighting. The
base weights rho are uniform (1/M) when actions are sampled from the current
policy, or the policy's own probabilities when the discrete action set is
enumerated exactly.

Step 2: distill the per-objective reweightings into one parametric policy by
weighted maximum likelihood under a KL(pi_old || pi) trust region, solved as
a Lagrangian saddle point with alternating parameter / multiplier updates.
Categorical policies use a single KL; Gaussian policies use decoupled mean
and covariance constraints with separate multipliers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .nn import AdamState, adam_step, sigmoid, softplus
from .policies import (
    GaussianDist,
    TabularCategoricalPolicy,
    kl_categorical,
    kl_gaussian_decoupled,
)

__all__ = [
    "ImprovementBatch",
    "TemperatureState",
    "FitState",
    "dual_value",
    "dual_grad",
    "solve_temperature",
    "compute_weights",
    "empirical_kl",
    "assemble_batch",
    "fit_policy",
    "exact_fit_single_state",
    "scalarized_improvement",
    "movmpo_estep",
    "improvement_step",
]

ETA_MIN = 1e-8
ETA_MAX = 1e12


# ---------------------------------------------------------------------------
# domain state


@dataclass
class TemperatureState:
    """One temperature per objective, warm-started across improvement steps."""

    etas: np.ndarray
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX

    @classmethod
    def initial(cls, n_objectives: int, eta0: float = 1.0) -> "TemperatureState":
        return cls(etas=np.full(n_objectives, float(eta0)))

    def __post_init__(self):
        self.etas = np.asarray(self.etas, dtype=np.float64)
        if np.any(self.etas <= 0.0):
            raise ValueError("temperatures must stay strictly positive")


@dataclass
class FitState:
    """Trust-region bounds and Lagrange multipliers for policy fitting.

    Multipliers are kept nonnegative by parametrizing nu = softplus(raw);
    raw values persist across improvement steps (warm start). Categorical
    policies use (beta, raw_nu); Gaussians use the decoupled pairs.
    """

    beta: float = 1e-3
    beta_mean: float = 1e-3
    beta_cov: float = 1e-5
    raw_nu: float = 0.5413248546129181  # softplus(raw) = 1
    raw_nu_mean: float = 0.5413248546129181
    raw_nu_cov: float = 0.5413248546129181
    lr: float = 3e-4
    nu_lr: float = 1.0
    steps: int = 5
    adam: AdamState | None = None

    @property
    def nu(self) -> float:
        return float(softplus(np.asarray(self.raw_nu)))

    @property
    def nu_mean(self) -> float:
        return float(softplus(np.asarray(self.raw_nu_mean)))

    @property
    def nu_cov(self) -> float:
        return float(softplus(np.asarray(self.raw_nu_cov)))


@dataclass
class ImprovementBatch:
    """Everything one improvement step consumes.

    states     [L, state_dim] raw observations (state_idx for tabular lookup)
    actions    [L, M] ints or [L, M, action_dim] floats, from pi_old
    q_values   [N, L, M] per-objective Q estimates for those actions
    log_base   [L, M] log of the base weights rho: -log M for sampled
               actions, log pi_old(a|s) when the action set is enumerated
    old        frozen pi_old statistics at the batch states: {"probs": [L, A]}
               or {"mean": [L, A], "std": [L, A]}
    """

    states: np.ndarray
    actions: np.ndarray
    q_values: np.ndarray
    log_base: np.ndarray
    old: dict
    state_idx: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.q_values)):
            raise ValueError("non-finite Q values in improvement batch")
        L, M = self.actions.shape[0], self.actions.shape[1]
        if self.q_values.shape[1:] != (L, M) or self.log_base.shape != (L, M):
            raise ValueError("inconsistent batch shapes")

    @property
    def n_objectives(self) -> int:
        return self.q_values.shape[0]


def assemble_batch(policy_old, bank, states, state_idx, *, mode: str = "sampled",
                   m_actions: int = 20, rng=None) -> ImprovementBatch:
    """Draw candidate actions and evaluate every objective's critic on them.

    mode "sampled": M actions per state from pi_old, base weights 1/M.
    mode "enumerate": the full discrete action set per state, base weights
    pi_old(a|s) (the exact expectation instead of its sample estimate).
    """
    states = np.asarray(states)
    L = states.shape[0]
    if mode == "enumerate":
        dist_states = state_idx if hasattr(policy_old, "n_states") else states
        probs = policy_old.dist(dist_states).probs
        A = probs.shape[1]
        actions = np.tile(np.arange(A, dtype=np.int64), (L, 1))
        log_base = np.log(np.maximum(probs, 1e-300))
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        sample_states = state_idx if hasattr(policy_old, "n_states") else states
        actions, _ = policy_old.sample_actions(sample_states, m_actions, rng)
        log_base = np.full((L, m_actions), -np.log(m_actions))
    else:
        raise ValueError(f"unknown batch mode: {mode}")

    q = bank.q_matrix(states, state_idx, actions, target=True)

    dist_states = state_idx if hasattr(policy_old, "n_states") else states
    d = policy_old.dist(dist_states)
    old = ({"probs": d.probs.copy()} if hasattr(d, "probs")
           else {"mean": d.mean.copy(), "std": d.std.copy()})
    return ImprovementBatch(states=states, actions=actions, q_values=q,
                            log_base=log_base, old=old, state_idx=state_idx)


# ---------------------------------------------------------------------------
# Step 1: temperature dual


def _logsumexp(a: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp over the last axis (fast path for small arrays)."""
    m = np.max(a, axis=-1, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))
    return out if keepdims else out[..., 0]


def _log_weights(q_values: np.ndarray, eta: float, log_base: np.ndarray | None):
    """Unnormalized log weights log rho + Q/eta, with uniform default base."""
    q_values = np.asarray(q_values, dtype=np.float64)
    if log_base is None:
        log_base = np.full_like(q_values, -np.log(q_values.shape[-1]))
    return log_base + q_values / eta, log_base


def dual_value(eta: float, epsilon: float, q_values: np.ndarray,
               log_base: np.ndarray | None = None) -> float:
    """Sample-based dual g(eta), computed with max-shifted log-sum-exp."""
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    logits, _ = _log_weights(q_values, eta, log_base)
    return float(eta * epsilon + eta * np.mean(_logsumexp(logits)))


def dual_grad(eta: float, epsilon: float, q_values: np.ndarray,
              log_base: np.ndarray | None = None) -> float:
    """dg/deta = epsilon - mean_i KL(q_i || rho_i) of the eta-reweighting."""
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    logits, log_base = _log_weights(q_values, eta, log_base)
    log_w = logits - _logsumexp(logits, keepdims=True)
    w = np.exp(log_w)
    kl_rows = np.sum(w * (log_w - log_base), axis=-1)
    return float(epsilon - np.mean(kl_rows))


def solve_temperature(eta0: float, epsilon: float, q_values: np.ndarray,
                      log_base: np.ndarray | None = None, *, steps: int = 50,
                      lr: float = 0.01, eta_min: float = ETA_MIN,
                      eta_max: float = ETA_MAX, converge: bool = False,
                      tol: float = 1e-12) -> float:
    """Minimize the temperature dual for one objective.

    The default follows the cheap schedule (a fixed number of projected
    gradient steps, warm-started from eta0). With converge=True the convex
    dual is instead solved to its exact minimizer by bracketed root finding
    on the monotone gradient; epsilon = 0 has no interior root (the gradient
    is negative everywhere) and returns the upper cap, which sends the
    reweighting back to its base distribution.
    """
    if epsilon < 0.0:
        raise ValueError("epsilon must be nonnegative")
    if converge:
        if epsilon == 0.0:
            return eta_max
        g_lo = dual_grad(eta_min, epsilon, q_values, log_base)
        if g_lo >= 0.0:
            return eta_min
        g_hi = dual_grad(eta_max, epsilon, q_values, log_base)
        if g_hi <= 0.0:
            return eta_max
        return float(brentq(lambda e: dual_grad(e, epsilon, q_values, log_base),
                            eta_min, eta_max, xtol=tol, rtol=8.9e-16))
    eta = float(eta0)
    for _ in range(steps):
        g = dual_grad(eta, epsilon, q_values, log_base)
        if not np.isfinite(g):
            raise FloatingPointError("non-finite dual gradient")
        eta = min(max(eta - lr * g, eta_min), eta_max)
    return eta


def compute_weights(q_values: np.ndarray, eta: float,
                    log_base: np.ndarray | None = None) -> np.ndarray:
    """Row-normalized weights proportional to rho * exp(Q/eta)."""
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    logits, _ = _log_weights(q_values, eta, log_base)
    log_w = logits - _logsumexp(logits, keepdims=True)
    return np.exp(log_w)


def empirical_kl(weights: np.ndarray, log_base: np.ndarray | None = None) -> float:
    """Mean over states of KL(weights_i || base_i); base defaults to uniform."""
    weights = np.asarray(weights, dtype=np.float64)
    if log_base is None:
        log_base = np.full_like(weights, -np.log(weights.shape[-1]))
    w = np.maximum(weights, 1e-300)
    rows = np.sum(weights * (np.log(w) - log_base), axis=-1)
    return float(np.mean(rows))


# ---------------------------------------------------------------------------
# Step 2: trust-region policy fitting


def _scatter_targets(actions: np.ndarray, coeffs: np.ndarray, n_actions: int) -> np.ndarray:
    """Aggregate per-sample coefficients onto the discrete action space."""
    L, M = actions.shape
    out = np.zeros((L, n_actions))
    np.add.at(out, (np.repeat(np.arange(L), M), actions.reshape(-1)), coeffs.reshape(-1))
    return out


def _policy_dist_states(policy, batch: ImprovementBatch):
    return batch.state_idx if hasattr(policy, "n_states") else batch.states


def _fit_categorical(policy, batch: ImprovementBatch, mass: np.ndarray,
                     fit_state: FitState, steps: int) -> dict:
    """Alternating (theta, nu) updates for a categorical policy.

    mass [L, M] carries total weight 1 over the whole batch (the objective
    average of the per-objective reweightings, divided by L).
    """
    p_old = batch.old["probs"]
    L = p_old.shape[0]
    A = p_old.shape[1]
    targets = _scatter_targets(np.asarray(batch.actions, dtype=np.int64), mass, A)
    state_mass = targets.sum(axis=1, keepdims=True)  # weight of each state
    dist_states = _policy_dist_states(policy, batch)

    if fit_state.adam is None:
        fit_state.adam = AdamState.for_params(policy.params.shape[0], lr=fit_state.lr)

    kl = 0.0
    loss = 0.0
    for _ in range(steps):
        nu = fit_state.nu
        if isinstance(policy, TabularCategoricalPolicy):
            idx = np.asarray(dist_states, dtype=np.int64)
            logits = policy.logits[idx]
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            kl_rows = kl_categorical(p_old, probs)
            kl = float(np.mean(kl_rows))
            dlogits = (state_mass * probs - targets) + nu * (probs - p_old) / L
            grads = np.zeros_like(policy.logits)
            np.add.at(grads, idx, dlogits)
            loss = -float(np.sum(targets * np.log(np.maximum(probs, 1e-300))))
            adam_step(policy.params, grads.reshape(-1), fit_state.adam)
        else:
            logits, cache = policy.logits_cached(batch.states)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            kl_rows = kl_categorical(p_old, probs)
            kl = float(np.mean(kl_rows))
            dlogits = (state_mass * probs - targets) + nu * (probs - p_old) / L
            grads = policy.backward(cache, dlogits)
            loss = -float(np.sum(targets * np.log(np.maximum(probs, 1e-300))))
            adam_step(policy.net.params, grads, fit_state.adam)
        if not np.isfinite(kl):
            raise FloatingPointError("policy KL evaluated non-finite during fit")
        fit_state.raw_nu -= fit_state.nu_lr * (fit_state.beta - kl) * sigmoid(
            np.asarray(fit_state.raw_nu))

    kl = _backstop_categorical(policy, batch, p_old, fit_state.beta)
    return {"fit_kl": kl, "nu": fit_state.nu, "loss": loss}


def _current_params(policy):
    return policy.params if isinstance(policy, TabularCategoricalPolicy) else policy.net.params


def _backstop_categorical(policy, batch, p_old, beta: float) -> float:
    """Rescale the parameter step if the trust region is overshot.

    The Lagrangian keeps the KL near beta on average; this guard makes the
    bound hard by shrinking the step until KL(pi_old || pi) <= beta. The
    pre-step parameters already satisfied the bound against the same
    pi_old, so a small enough step always exists.
    """
    params = _current_params(policy)
    start = getattr(policy, "_fit_anchor", None)
    if start is None:
        return _categorical_kl_now(policy, batch, p_old)
    kl = _categorical_kl_now(policy, batch, p_old)
    t = 1.0
    delta = params - start
    for _ in range(60):
        if kl <= beta or t < 1e-12:
            break
        t *= 0.5
        params[:] = start + t * delta
        kl = _categorical_kl_now(policy, batch, p_old)
    return kl


def _categorical_kl_now(policy, batch, p_old) -> float:
    dist_states = _policy_dist_states(policy, batch)
    probs = policy.dist(dist_states).probs
    return float(np.mean(kl_categorical(p_old, probs)))


def _fit_gaussian(policy, batch: ImprovementBatch, mass: np.ndarray,
                  fit_state: FitState, steps: int) -> dict:
    """Decoupled-KL fitting for a diagonal Gaussian policy.

    The likelihood is split per the decoupled trust region: the mean head is
    trained with the old standard deviation held fixed, the std head with
    the old mean held fixed, each under its own KL constraint.
    """
    mu_old, std_old = batch.old["mean"], batch.old["std"]
    L, M = batch.actions.shape[0], batch.actions.shape[1]
    actions = np.asarray(batch.actions, dtype=np.float64).reshape(L, M, -1)

    if fit_state.adam is None:
        fit_state.adam = AdamState.for_params(policy.net.params.shape[0], lr=fit_state.lr)

    kl_mean = kl_cov = 0.0
    loss = 0.0
    for _ in range(steps):
        nu_mu, nu_sigma = fit_state.nu_mean, fit_state.nu_cov
        mean, std, cache = policy.heads_cached(batch.states)
        kl_mean_rows, kl_cov_rows = kl_gaussian_decoupled(
            GaussianDist(mu_old, std_old), GaussianDist(mean, std))
        kl_mean = float(np.mean(kl_mean_rows))
        kl_cov = float(np.mean(kl_cov_rows))
        if not (np.isfinite(kl_mean) and np.isfinite(kl_cov)):
            raise FloatingPointError("policy KL evaluated non-finite during fit")

        # d/dmean of -sum_ij m_ij log N(a_ij; mean_i, std_old_i)
        resid_mu = (actions - mean[:, None, :]) / (std_old**2)[:, None, :]
        dmean = -(mass[:, :, None] * resid_mu).sum(axis=1)
        dmean += nu_mu * (mean - mu_old) / (std_old**2) / L
        # d/dstd of -sum_ij m_ij log N(a_ij; mu_old_i, std_i)
        sq = (actions - mu_old[:, None, :]) ** 2
        dstd = -(mass[:, :, None] * (sq - (std**2)[:, None, :])).sum(axis=1) / std**3
        dstd += nu_sigma * (1.0 / std - (std_old**2) / std**3) / L

        grads = policy.backward_heads(cache, dmean, dstd)
        adam_step(policy.net.params, grads, fit_state.adam)
        fit_state.raw_nu_mean -= fit_state.nu_lr * (fit_state.beta_mean - kl_mean) * sigmoid(
            np.asarray(fit_state.raw_nu_mean))
        fit_state.raw_nu_cov -= fit_state.nu_lr * (fit_state.beta_cov - kl_cov) * sigmoid(
            np.asarray(fit_state.raw_nu_cov))
        log_prob_mu = -0.5 * ((actions - mean[:, None, :]) / std_old[:, None, :]) ** 2
        loss = -float(np.sum(mass[:, :, None] * log_prob_mu))

    kl_mean, kl_cov = _backstop_gaussian(policy, batch, mu_old, std_old,
                                         fit_state.beta_mean, fit_state.beta_cov)
    return {"fit_kl_mean": kl_mean, "fit_kl_cov": kl_cov,
            "nu_mean": fit_state.nu_mean, "nu_cov": fit_state.nu_cov, "loss": loss}


def _gaussian_kls_now(policy, batch, mu_old, std_old):
    d = policy.dist(batch.states)
    km, kc = kl_gaussian_decoupled(GaussianDist(mu_old, std_old), d)
    return float(np.mean(km)), float(np.mean(kc))


def _backstop_gaussian(policy, batch, mu_old, std_old, beta_mean, beta_cov):
    params = policy.net.params
    start = getattr(policy, "_fit_anchor", None)
    kl_mean, kl_cov = _gaussian_kls_now(policy, batch, mu_old, std_old)
    if start is None:
        return kl_mean, kl_cov
    t = 1.0
    delta = params - start
    for _ in range(60):
        if (kl_mean <= beta_mean and kl_cov <= beta_cov) or t < 1e-12:
            break
        t *= 0.5
        params[:] = start + t * delta
        kl_mean, kl_cov = _gaussian_kls_now(policy, batch, mu_old, std_old)
    return kl_mean, kl_cov


def fit_policy(policy, batch: ImprovementBatch, weights: np.ndarray,
               fit_state: FitState, steps: int | None = None) -> dict:
    """Weighted maximum-likelihood fit of the policy under a KL trust region.

    weights [N, L, M]: one matrix per objective, each with total mass 1 over
    the batch. Objectives contribute equally (their average forms the fit
    target), so a duplicated objective changes nothing.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3:
        raise ValueError("weights must be [n_objectives, L, M]")
    steps = fit_state.steps if steps is None else steps
    mass = weights.mean(axis=0)
    anchor = _current_params(policy).copy()
    policy._fit_anchor = anchor
    try:
        if "probs" in batch.old:
            return _fit_categorical(policy, batch, mass, fit_state, steps)
        return _fit_gaussian(policy, batch, mass, fit_state, steps)
    finally:
        policy._fit_anchor = None


# ---------------------------------------------------------------------------
# exact single-state solution (categorical)


def exact_fit_single_state(p_old: np.ndarray, weights_per_objective, beta: float,
                           tol: float = 1e-12) -> np.ndarray:
    """Exact KL-constrained fit when there is a single state.

    With w the objective-average of the target distributions, the optimum of
    max_p sum_a w_a log p_a + nu (beta - KL(p_old || p)) over the simplex is
    p(nu) = (w + nu * p_old) / (1 + nu); the multiplier is found by bisection
    on the monotone constraint KL(p_old || p(nu)) = beta.
    """
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    p_old = np.asarray(p_old, dtype=np.float64)
    w = np.mean(np.asarray(weights_per_objective, dtype=np.float64).reshape(-1, p_old.shape[0]),
                axis=0)
    w = w / w.sum()

    def kl_at(nu: float) -> float:
        # p can be 0 where p_old > 0 at nu = 0; the resulting inf is correct
        p = (w + nu * p_old) / (1.0 + nu)
        mask = p_old > 0.0
        with np.errstate(divide="ignore"):
            return float(np.sum(p_old[mask] * np.log(p_old[mask] / p[mask])))

    if kl_at(0.0) <= beta:
        return w.copy()
    lo, hi = 0.0, 1.0
    while kl_at(hi) > beta:
        hi *= 2.0
        if hi > 1e16:
            raise FloatingPointError("trust-region bisection failed to bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if kl_at(mid) > beta:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    return (w + hi * p_old) / (1.0 + hi)


# ---------------------------------------------------------------------------
# composite steps


def improvement_step(policy, batch: ImprovementBatch, epsilons, temp_state: TemperatureState,
                     fit_state: FitState, *, steps: int | None = None,
                     converge: bool = True, dual_steps: int = 50,
                     dual_lr: float = 0.01) -> dict:
    """One full improvement step: per-objective reweighting, then one fit.

    Returns diagnostics: per-objective temperature, dual value and empirical
    KL, plus the fit statistics.
    """
    epsilons = np.asarray(epsilons, dtype=np.float64)
    N, L, M = batch.q_values.shape
    if epsilons.shape[0] != N:
        raise ValueError("one epsilon per objective required")
    weights = np.empty((N, L, M))
    etas = np.empty(N)
    duals = np.empty(N)
    ekls = np.empty(N)
    for k in range(N):
        eta = solve_temperature(float(temp_state.etas[k]), float(epsilons[k]),
                                batch.q_values[k], batch.log_base,
                                steps=dual_steps, lr=dual_lr,
                                eta_min=temp_state.eta_min, eta_max=temp_state.eta_max,
                                converge=converge)
        temp_state.etas[k] = eta
        w = compute_weights(batch.q_values[k], eta, batch.log_base)
        weights[k] = w
        etas[k] = eta
        duals[k] = dual_value(eta, float(epsilons[k]), batch.q_values[k], batch.log_base)
        ekls[k] = empirical_kl(w, batch.log_base)
    fit = fit_policy(policy, batch, weights / L, fit_state, steps=steps)
    return {"etas": etas, "duals": duals, "empirical_kls": ekls, **fit}


def scalarized_improvement(policy, batch: ImprovementBatch, w_vec, epsilon: float,
                           temp_state: TemperatureState, fit_state: FitState, *,
                           steps: int | None = None, converge: bool = True,
                           dual_steps: int = 50, dual_lr: float = 0.01) -> dict:
    """Single-objective pipeline on the scalarized value sum_k w_k Q_k."""
    w_vec = np.asarray(w_vec, dtype=np.float64)
    if w_vec.shape[0] != batch.n_objectives:
        raise ValueError("one weight per objective required")
    if np.any(w_vec < 0.0) or abs(w_vec.sum() - 1.0) > 1e-9:
        raise ValueError("scalarization weights must be a convex combination")
    q = np.tensordot(w_vec, batch.q_values, axes=(0, 0))[None]  # [1, L, M]
    scalar_batch = ImprovementBatch(states=batch.states, actions=batch.actions,
                                    q_values=q, log_base=batch.log_base,
                                    old=batch.old, state_idx=batch.state_idx)
    return improvement_step(policy, scalar_batch, np.asarray([epsilon]), temp_state,
                            fit_state, steps=steps, converge=converge,
                            dual_steps=dual_steps, dual_lr=dual_lr)


def movmpo_estep(advantages: np.ndarray, epsilons, temp_state: TemperatureState, *,
                 converge: bool = True, dual_steps: int = 50,
                 dual_lr: float = 0.01) -> tuple[np.ndarray, dict]:
    """Advantage-based reweighting over a batch of visited (s, a) pairs.

    Per objective: keep the half of the batch with the highest advantages,
    solve the temperature dual over the retained samples, and return
    softmax(A/eta) weights over them (zero elsewhere). Each objective's
    weights sum to 1 over the batch.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.ndim != 2 or advantages.shape[1] == 0:
        raise ValueError("advantages must be [n_objectives, batch] and nonempty")
    epsilons = np.asarray(epsilons, dtype=np.float64)
    N, B = advantages.shape
    keep = int(np.ceil(B / 2))
    weights = np.zeros((N, B))
    etas = np.empty(N)
    ekls = np.empty(N)
    for k in range(N):
        order = np.argsort(-advantages[k], kind="stable")
        retained = np.sort(order[:keep])
        a_ret = advantages[k, retained][None, :]  # one "state", keep samples
        eta = solve_temperature(float(temp_state.etas[k]), float(epsilons[k]), a_ret,
                                steps=dual_steps, lr=dual_lr,
                                eta_min=temp_state.eta_min, eta_max=temp_state.eta_max,
                                converge=converge)
        temp_state.etas[k] = eta
        w = compute_weights(a_ret, eta)[0]
        weights[k, retained] = w
        etas[k] = eta
        ekls[k] = empirical_kl(w[None, :])
    return weights, {"etas": etas, "empirical_kls": ekls, "retained": keep}
