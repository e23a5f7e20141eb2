"""Config-driven training, sweeps, and result emission.

A run is a synchronous loop of collect -> critic updates -> improvement ->
target sync cycles. The actor side always uses the target ("old") policy,
the improvement step updates the online policy against the target's samples
and trust region, and syncing publishes the online parameters. Asynchronous
collection (actor threads sharing the replay buffer) is available behind a
flag; the synchronous mode is bitwise reproducible for a given (config,
seed) and is what the tests rely on.

Profiles bundle hyperparameters: "paper" mirrors the published table for
the large-scale setup, "desk" shrinks everything so a run finishes in
seconds. Any profile value can be overridden per config.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .critics import (
    CriticBank,
    DirectActionPenalty,
    ExactBanditCritic,
    QNetworkCritic,
    TabularQCritic,
    VNetworkCritic,
    exact_bandit_q,
    fit_q,
    nstep_v_targets,
    retrace_targets,
    td0_batch_update,
)
from .envs import evaluate_policy, make_env, rollout
from .improvement import (
    FitState,
    ImprovementBatch,
    TemperatureState,
    assemble_batch,
    compute_weights,
    dual_value,
    empirical_kl,
    exact_fit_single_state,
    fit_policy,
    improvement_step,
    movmpo_estep,
    scalarized_improvement,
    solve_temperature,
)
from .metrics import ParetoSet
from .nn import FeedForwardNet
from .policies import (
    DiagonalGaussianPolicy,
    ParametricCategoricalPolicy,
    TabularCategoricalPolicy,
    kl_categorical,
    save_snapshot,
)
from .replay import ReplayBuffer
from .types import PreferenceSpec, validate_preference

__all__ = [
    "ConfigError",
    "NumericalAbort",
    "PROFILES",
    "RunRecord",
    "resolve_settings",
    "expand_sweep",
    "run_training",
    "run_sweep",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class NumericalAbort(RuntimeError):
    """Training aborted on non-finite numbers (CLI exit code 3)."""


MODES = ("mo_mpo", "scalarized", "mo_vmpo")

PROFILES = {
    "paper": {
        "policy_layers": [300, 200],
        "critic_layers": [400, 400, 300],
        "batch_size": 512,
        "m_actions": 20,
        "replay_capacity": 1_000_000,
        "target_period": 200,
        "retrace_seq": 8,
        "adam_lr": 3e-4,
        "adam_eps": 1e-3,
        "policy_lr": 3e-4,
        "nu_lr": 1e-2,
        "eta0": 1.0,
        "beta": 1e-3,
        "beta_mean": 1e-3,
        "beta_cov": 1e-5,
        "layer_norm": True,
        "iterations": 1000,
        "episodes_per_iter": 1,
        "critic_updates": 1,
        "fit_steps": 1,
        "dual_steps": 50,
        "dual_lr": 0.01,
        "dual_converge": False,
        "sync_every": 200,
        "eval_every": 50,
        "eval_episodes": 100,
        "critic_lr": 0.5,
        "sequences_per_update": 16,
        "vtarget_steps": 10,
        "exact_fit": False,
        "async_actors": 0,
        "prefill_episodes": 0,
        "warmup_critic_batches": 0,
        "warmup_batch_size": 512,
        "improvement_states": "replay",
    },
    "desk": {
        "policy_layers": [64, 64],
        "critic_layers": [64, 64],
        "batch_size": 64,
        "m_actions": 20,
        "replay_capacity": 100_000,
        "target_period": 200,
        "retrace_seq": 8,
        "adam_lr": 3e-4,
        "adam_eps": 1e-3,
        "policy_lr": 0.1,
        "nu_lr": 1.0,
        "eta0": 1.0,
        "beta": 1e-3,
        "beta_mean": 1e-3,
        "beta_cov": 1e-5,
        "layer_norm": True,
        "iterations": 500,
        "episodes_per_iter": 1,
        "critic_updates": 4,
        "fit_steps": 10,
        "dual_steps": 50,
        "dual_lr": 0.01,
        "dual_converge": True,
        "sync_every": 1,
        "eval_every": 50,
        "eval_episodes": 100,
        "critic_lr": 0.5,
        "sequences_per_update": 8,
        "vtarget_steps": 10,
        "exact_fit": False,
        "async_actors": 0,
        "prefill_episodes": 0,
        "warmup_critic_batches": 0,
        "warmup_batch_size": 512,
        "improvement_states": "replay",
    },
}

# Per-environment desk defaults layered over the profile. SimpleWorld takes
# the exact single-state route (closed-form bandit critics and fit); Deep Sea
# Treasure runs tabular everything; the point mass uses the network path.
ENV_DEFAULTS = {
    "simple_world": {
        "policy": "tabular",
        "critics": "exact_bandit",
        "batch_mode": "enumerate",
        "exact_fit": True,
        "iterations": 2500,
        # Hold the anchor for 25 iterations: with a fresh anchor every step,
        # compromise fixed points are unstable (rounding noise in the
        # left/right-asymmetric mode grows ~3% per anchored update and
        # eventually tips the policy into a two-action mixture).
        "sync_every": 25,
        "episodes_per_iter": 0,
        "eval_every": 0,
    },
    "deep_sea_treasure": {
        "policy": "tabular",
        "critics": "table",
        "batch_mode": "enumerate",
        "iterations": 2500,
        "beta": 0.02,
        "policy_lr": 0.1,
        "critic_lr": 0.5,
        "eval_every": 0,
        "episodes_per_iter": 2,
        "critic_updates": 6,
        "fit_steps": 5,
        "sync_every": 25,
        "prefill_episodes": 6000,
        "warmup_critic_batches": 9000,
        "improvement_states": "support",
    },
    "point_mass_run": {
        "policy": "gaussian",
        "critics": "qnet,penalty",
        "batch_mode": "sampled",
        "iterations": 200,
        "episodes_per_iter": 2,
        "critic_updates": 4,
        "fit_steps": 5,
        "eval_every": 0,
        "eval_episodes": 20,
    },
}


@dataclass
class RunSettings:
    env_config: dict
    mode: str
    preference: PreferenceSpec | None
    scalar_weights: np.ndarray | None
    scalar_epsilon: float
    hp: dict
    out_dir: str | None


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    seed: int
    status: str
    iterations_run: int
    wall_clock: float
    final_return: list | None
    final_disc_return: list | None
    deterministic_return: list | None
    snapshot_path: str | None
    metrics_path: str | None
    error: str | None = None
    history: list = field(default_factory=list)

    def to_summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "status": self.status,
            "iterations_run": self.iterations_run,
            "wall_clock": self.wall_clock,
            "final_return": self.final_return,
            "final_disc_return": self.final_disc_return,
            "deterministic_return": self.deterministic_return,
            "snapshot": self.snapshot_path,
            "metrics": self.metrics_path,
            "error": self.error,
        }


def _config_hash(config: dict, seed: int) -> str:
    blob = json.dumps({"config": config, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def resolve_settings(config: dict, out_dir: str | None = None) -> RunSettings:
    """Validate a config dict and merge profile, env defaults, and overrides."""
    if not isinstance(config, dict):
        raise ConfigError("config must be a mapping")
    if "env" not in config or not isinstance(config["env"], dict) or "name" not in config["env"]:
        raise ConfigError("config requires an 'env' mapping with a 'name'")
    mode = config.get("mode", "mo_mpo")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    profile_name = config.get("profile", "desk")
    if isinstance(profile_name, dict):
        hp = dict(PROFILES["desk"])
        hp.update(profile_name)
    elif profile_name in PROFILES:
        hp = dict(PROFILES[profile_name])
    else:
        raise ConfigError(f"unknown profile {profile_name!r}")
    env_name = config["env"]["name"]
    hp.update(ENV_DEFAULTS.get(env_name, {}))
    overrides = config.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("'overrides' must be a mapping")
    unknown = set(overrides) - set(hp)
    if unknown:
        raise ConfigError(f"unknown override keys: {sorted(unknown)}")
    hp.update(overrides)

    try:
        env = make_env(config["env"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid env config: {exc}") from exc
    n = env.spec.num_objectives

    preference = None
    scalar_weights = None
    scalar_epsilon = float(config.get("epsilon", 0.01))
    pref_cfg = config.get("preference")
    if pref_cfg is None:
        raise ConfigError("config requires a 'preference' entry")
    try:
        preference = PreferenceSpec.from_dict(pref_cfg)
        validate_preference(preference, n)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid preference: {exc}") from exc
    if mode == "scalarized":
        if preference.mode != "weights":
            raise ConfigError("scalarized mode needs a weight-based preference")
        scalar_weights = np.asarray(preference.weights, dtype=np.float64)
    elif preference.mode != "epsilon":
        raise ConfigError(f"{mode} mode needs an epsilon-based preference")

    iterations = config.get("iterations")
    if iterations is not None:
        if not isinstance(iterations, int) or iterations < 1:
            raise ConfigError("iterations must be a positive integer")
        hp["iterations"] = iterations

    if hp["improvement_states"] not in ("replay", "support"):
        raise ConfigError("improvement_states must be 'replay' or 'support'")

    return RunSettings(env_config=dict(config["env"]), mode=mode, preference=preference,
                       scalar_weights=scalar_weights, scalar_epsilon=scalar_epsilon,
                       hp=hp, out_dir=out_dir)


# ---------------------------------------------------------------------------
# builders


def _build_policy(env, settings: RunSettings, rng) -> object:
    kind = settings.hp.get("policy", "tabular")
    discrete = hasattr(env.spec.action_space, "n")
    if kind == "tabular":
        if not discrete or not hasattr(env, "n_states"):
            raise ConfigError("tabular policy requires a discrete, indexable environment")
        return TabularCategoricalPolicy(env.n_states, env.spec.action_space.n)
    layers = settings.hp["policy_layers"]
    ln = settings.hp["layer_norm"]
    if kind == "categorical_net":
        net = FeedForwardNet((env.spec.state_dim, *layers, env.spec.action_space.n),
                             layer_norm_first=ln, rng=rng)
        return ParametricCategoricalPolicy(net)
    if kind == "gaussian":
        dim = env.spec.action_space.dim
        net = FeedForwardNet((env.spec.state_dim, *layers, 2 * dim),
                             layer_norm_first=ln, rng=rng)
        return DiagonalGaussianPolicy(net, dim, tanh_mean=True)
    raise ConfigError(f"unknown policy kind {kind!r}")


def _build_bank(env, settings: RunSettings, rng) -> CriticBank:
    mode = settings.mode
    n = env.spec.num_objectives
    if mode == "mo_vmpo":
        kinds = ["vnet"] * n
    else:
        spec = settings.hp.get("critics", "table")
        kinds = [k.strip() for k in spec.split(",")] if isinstance(spec, str) else list(spec)
        if len(kinds) == 1:
            kinds = kinds * n
    if len(kinds) != n:
        raise ConfigError(f"need one critic kind per objective, got {kinds}")
    layers = settings.hp["critic_layers"]
    ln = settings.hp["layer_norm"]
    lr, eps = settings.hp["adam_lr"], settings.hp["adam_eps"]
    ests = []
    bandit_table = None
    for k, kind in enumerate(kinds):
        if kind == "exact_bandit":
            if bandit_table is None:
                bandit_table = exact_bandit_q(env)
            ests.append(ExactBanditCritic(bandit_table[k]))
        elif kind == "table":
            ests.append(TabularQCritic(env.n_states, env.spec.action_space.n))
        elif kind == "qnet":
            ests.append(QNetworkCritic(env.spec.state_dim, env.spec.action_space, layers,
                                       rng, layer_norm_first=ln, lr=lr, adam_eps=eps))
        elif kind == "vnet":
            ests.append(VNetworkCritic(env.spec.state_dim, layers, rng,
                                       layer_norm_first=ln, lr=lr, adam_eps=eps))
        elif kind == "penalty":
            ests.append(DirectActionPenalty())
        else:
            raise ConfigError(f"unknown critic kind {kind!r}")
    return CriticBank(ests, target_period=settings.hp["target_period"])


def _state_indexer(env):
    if hasattr(env, "obs_to_index"):
        return lambda obs: env.obs_to_index(np.asarray(obs, dtype=np.float64))
    return None


# ---------------------------------------------------------------------------
# diagnostics


class _MetricsWriter:
    def __init__(self, path: str | None, n_objectives: int, gaussian: bool):
        cols = ["iteration"]
        for k in range(n_objectives):
            cols += [f"eta_{k}", f"dual_{k}", f"empirical_kl_{k}"]
        cols += (["fit_kl_mean", "fit_kl_cov", "nu_mean", "nu_cov"] if gaussian
                 else ["fit_kl", "nu"])
        cols += ["loss"]
        for k in range(n_objectives):
            cols += [f"return_{k}", f"disc_return_{k}"]
        self.columns = cols
        self.rows: list[dict] = []
        self.path = path
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=cols, restval="",
                                          extrasaction="ignore")
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _diag_row(it: int, diag: dict) -> dict:
    row = {"iteration": it}
    for k, eta in enumerate(np.atleast_1d(diag.get("etas", []))):
        row[f"eta_{k}"] = eta
    for k, d in enumerate(np.atleast_1d(diag.get("duals", []))):
        row[f"dual_{k}"] = d
    for k, e in enumerate(np.atleast_1d(diag.get("empirical_kls", []))):
        row[f"empirical_kl_{k}"] = e
    for key in ("fit_kl", "fit_kl_mean", "fit_kl_cov", "nu", "nu_mean", "nu_cov", "loss"):
        if key in diag:
            row[key] = diag[key]
    return row


# ---------------------------------------------------------------------------
# training


def _collect(env, policy_old, buffer, episodes: int, rng, support=None) -> None:
    for _ in range(episodes):
        traj = rollout(env, policy_old, rng)
        buffer.append(traj)
        if support is not None:
            support.observe(traj)


class _StateSupport:
    """Distinct visited states of an indexable environment.

    Sampling improvement states uniformly over the visited-state support
    (rather than visitation-weighted from replay) keeps rarely-visited
    states in the policy update at small batch sizes; with large batches
    the two coincide in effect.
    """

    def __init__(self, n_states: int, state_dim: int, state_index):
        self._seen = np.zeros(n_states, dtype=bool)
        self._obs = np.zeros((n_states, state_dim))
        self._index = state_index

    def observe(self, traj) -> None:
        for t in traj.transitions:
            idx = self._index(t.state)
            if not self._seen[idx]:
                self._seen[idx] = True
                self._obs[idx] = np.asarray(t.state, dtype=np.float64)

    @property
    def count(self) -> int:
        return int(self._seen.sum())

    def sample(self, batch_size: int, rng):
        idx = np.flatnonzero(self._seen)
        if len(idx) > batch_size:
            idx = rng.choice(idx, size=batch_size, replace=False)
        return self._obs[idx], idx


class _AsyncCollector:
    """Actor threads: fetch the latest published policy, roll out, append.

    The learner publishes immutable policy clones; actors pick up the newest
    one before each episode. The replay buffer's lock makes appends safe.
    """

    def __init__(self, settings: RunSettings, buffer: ReplayBuffer, policy, seed: int,
                 n_actors: int):
        self._buffer = buffer
        self._lock = threading.Lock()
        self._published = policy.clone()
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._actor_loop,
                             args=(make_env(settings.env_config),
                                   np.random.default_rng([seed, 7001 + a])),
                             daemon=True)
            for a in range(n_actors)
        ]

    def publish(self, policy) -> None:
        with self._lock:
            self._published = policy.clone()

    def _fetch(self):
        with self._lock:
            return self._published

    def _actor_loop(self, env, rng) -> None:
        while not self._stop.is_set():
            self._buffer.append(rollout(env, self._fetch(), rng))

    def start(self) -> None:
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5.0)


class _TabularTDCache:
    """Flat transition arrays with precomputed state indices.

    Refreshed at sync boundaries so TD batches index contiguous numpy
    arrays instead of gathering transitions one by one from the block
    store; within a window the newest episodes wait for the next refresh,
    mirroring how the bootstrap targets are frozen for the window anyway.
    """

    def __init__(self, env):
        self._env = env
        self.size = 0

    def refresh(self, buffer) -> None:
        if len(buffer) == 0:
            return
        cols = buffer.as_arrays()
        self.s_idx = self._env.obs_to_index_batch(cols["states"])
        self.n_idx = self._env.obs_to_index_batch(cols["next_states"])
        self.actions = cols["actions"]
        self.rewards = cols["rewards"]
        self.terminals = cols["terminals"]
        self.size = len(self.actions)

    def sample(self, count: int, rng):
        sel = rng.integers(0, self.size, size=count)
        return (self.s_idx[sel], self.actions[sel], self.rewards[sel],
                self.n_idx[sel], self.terminals[sel])


def _update_critics(env, settings, bank, buffer, policy_old, state_index, rng,
                    batches: int | None = None, td_cache=None,
                    batch_size: int | None = None) -> None:
    hp = settings.hp
    gamma = env.spec.discount
    if len(buffer) == 0:
        return
    if batch_size is None:
        batch_size = hp["batch_size"]
    for _ in range(hp["critic_updates"] if batches is None else batches):
        trainable = [(k, est) for k, est in enumerate(bank.estimators)
                     if est.kind in ("table", "qnet")]
        if not trainable:
            return
        if any(est.kind == "table" for _, est in trainable):
            if td_cache is not None and td_cache.size > 0:
                s_idx, actions, rewards, n_idx, terminals = td_cache.sample(batch_size, rng)
            else:
                cols = buffer.sample_transitions(batch_size, rng)
                s_idx = np.asarray([state_index(s) for s in cols["states"]], dtype=np.int64)
                n_idx = np.asarray([state_index(s) for s in cols["next_states"]],
                                   dtype=np.int64)
                actions, rewards, terminals = (cols["actions"], cols["rewards"],
                                               cols["terminals"])
            next_probs = policy_old.dist(n_idx).probs
            for k, est in trainable:
                if est.kind == "table":
                    td0_batch_update(est, s_idx, actions, rewards[:, k],
                                     next_probs, n_idx, terminals, gamma,
                                     hp["critic_lr"])
        qnet_ks = [k for k, est in trainable if est.kind == "qnet"]
        if qnet_ks:
            seqs = buffer.sample_sequences(hp["sequences_per_update"],
                                           length=hp["retrace_seq"], rng=rng)
            states = np.concatenate([s["states"] for s in seqs], axis=0)
            actions = np.concatenate([s["actions"] for s in seqs], axis=0)
            for k in qnet_ks:
                targets = np.concatenate([
                    retrace_targets(s, bank, policy_old, gamma, objective=k,
                                    rng=rng, state_index=state_index)
                    for s in seqs
                ])
                fit_q(bank, k, states, actions, targets)


def _run_iteration_mompo(env, settings, policy, policy_old, bank, buffer, temp_state,
                         fit_state, state_index, rng, *, collect: bool = True,
                         support=None, td_cache=None) -> dict:
    hp = settings.hp
    if collect:
        _collect(env, policy_old, buffer, hp["episodes_per_iter"], rng, support)
    _update_critics(env, settings, bank, buffer, policy_old, state_index, rng,
                    td_cache=td_cache)

    if support is not None and support.count > 0:
        states, state_idx = support.sample(hp["batch_size"], rng)
    elif len(buffer) > 0:
        states = buffer.sample_states(hp["batch_size"], rng)
        state_idx = (np.asarray([state_index(s) for s in states], dtype=np.int64)
                     if state_index is not None else None)
    elif getattr(env, "n_states", 0) == 1:
        # single-state environments need no replay for state sampling
        states = np.zeros((1, env.spec.state_dim))
        state_idx = np.zeros(1, dtype=np.int64)
    else:
        raise ConfigError("no collected data to sample improvement states from")

    batch = assemble_batch(policy_old, bank, states, state_idx,
                           mode=hp["batch_mode"], m_actions=hp["m_actions"], rng=rng)

    if settings.mode == "scalarized":
        return scalarized_improvement(policy, batch, settings.scalar_weights,
                                      settings.scalar_epsilon, temp_state, fit_state,
                                      steps=hp["fit_steps"], converge=hp["dual_converge"],
                                      dual_steps=hp["dual_steps"], dual_lr=hp["dual_lr"])
    epsilons = np.asarray(settings.preference.epsilons, dtype=np.float64)
    return improvement_step(policy, batch, epsilons, temp_state, fit_state,
                            steps=hp["fit_steps"], converge=hp["dual_converge"],
                            dual_steps=hp["dual_steps"], dual_lr=hp["dual_lr"])


def _run_iteration_exact(env, settings, policy, policy_old, bank, temp_state) -> dict:
    """Closed-form path for single-state categorical policies."""
    hp = settings.hp
    states = np.zeros((1, env.spec.state_dim))
    state_idx = np.zeros(1, dtype=np.int64)
    batch = assemble_batch(policy_old, bank, states, state_idx, mode="enumerate")
    if settings.mode == "scalarized":
        q = np.tensordot(settings.scalar_weights, batch.q_values, axes=(0, 0))[None]
        epsilons = np.asarray([settings.scalar_epsilon])
    else:
        q = batch.q_values
        epsilons = np.asarray(settings.preference.epsilons, dtype=np.float64)
    n = q.shape[0]
    etas, duals, ekls = np.empty(n), np.empty(n), np.empty(n)
    weights = np.empty((n, q.shape[2]))
    for k in range(n):
        eta = solve_temperature(float(temp_state.etas[k]), float(epsilons[k]), q[k],
                                batch.log_base, converge=True)
        temp_state.etas[k] = eta
        w = compute_weights(q[k], eta, batch.log_base)
        etas[k], duals[k] = eta, dual_value(eta, float(epsilons[k]), q[k], batch.log_base)
        ekls[k] = empirical_kl(w, batch.log_base)
        weights[k] = w[0]
    p_old = batch.old["probs"][0]
    p_new = exact_fit_single_state(p_old, weights, hp["beta"])
    policy.logits[0] = np.log(np.maximum(p_new, 1e-300))
    fit_kl = float(kl_categorical(p_old, p_new))
    return {"etas": etas, "duals": duals, "empirical_kls": ekls,
            "fit_kl": fit_kl, "nu": float("nan"),
            "loss": -float(np.mean(weights @ np.log(np.maximum(p_new, 1e-300))))}


def _segments(trajectory, length: int):
    cols = ("states", "actions", "rewards", "next_states", "behavior_probs", "terminals")
    arrays = {
        "states": np.asarray([t.state for t in trajectory.transitions], dtype=np.float64),
        "actions": np.asarray([t.action for t in trajectory.transitions], dtype=np.float64),
        "rewards": np.asarray([t.rewards.values for t in trajectory.transitions], dtype=np.float64),
        "next_states": np.asarray([t.next_state for t in trajectory.transitions], dtype=np.float64),
        "behavior_probs": np.asarray([t.behavior_prob for t in trajectory.transitions], dtype=np.float64),
        "terminals": np.asarray([t.terminal for t in trajectory.transitions], dtype=bool),
    }
    T = arrays["states"].shape[0]
    for start in range(0, T, length):
        yield {c: arrays[c][start:start + length] for c in cols}


def _run_iteration_vmpo(env, settings, policy, policy_old, bank, temp_state,
                        fit_state, rng) -> dict:
    hp = settings.hp
    gamma = env.spec.discount
    n = env.spec.num_objectives
    trajectories = [rollout(env, policy_old, rng) for _ in range(hp["episodes_per_iter"])]
    segs = [seg for traj in trajectories for seg in _segments(traj, hp["vtarget_steps"])]

    states = np.concatenate([s["states"] for s in segs], axis=0)
    actions = np.concatenate([s["actions"] for s in segs], axis=0)
    targets = np.empty((n, states.shape[0]))
    advantages = np.empty((n, states.shape[0]))
    pos = 0
    for seg in segs:
        T = seg["states"].shape[0]
        for k in range(n):
            t_k, a_k = nstep_v_targets(seg, bank, k, gamma)
            targets[k, pos:pos + T] = t_k
            advantages[k, pos:pos + T] = a_k
        pos += T

    loss = 0.0
    for _ in range(hp["critic_updates"]):
        for k in range(n):
            loss = bank.estimators[k].fit(states, targets[k])

    weights, ediag = movmpo_estep(advantages, settings.preference.epsilons, temp_state,
                                  converge=hp["dual_converge"], dual_steps=hp["dual_steps"],
                                  dual_lr=hp["dual_lr"])
    d = policy_old.dist(states)
    old = {"mean": d.mean.copy(), "std": d.std.copy()} if hasattr(d, "mean") else \
        {"probs": d.probs.copy()}
    act = actions.reshape(states.shape[0], 1, -1) if hasattr(d, "mean") else \
        actions.reshape(states.shape[0], 1).astype(np.int64)
    batch = ImprovementBatch(states=states, actions=act,
                             q_values=advantages[:, :, None],
                             log_base=np.zeros((states.shape[0], 1)), old=old)
    fit = fit_policy(policy, batch, weights[:, :, None], fit_state, steps=hp["fit_steps"])
    return {"etas": ediag["etas"], "empirical_kls": ediag["empirical_kls"],
            "critic_loss": loss, **fit}


def run_training(config: dict, seed: int = 0, out_dir: str | None = None) -> RunRecord:
    """Train one policy per the config; emit metrics.csv, snapshot, summary."""
    settings = resolve_settings(config, out_dir)
    hp = settings.hp
    run_id = config.get("run_id", f"run-{_config_hash(config, seed)}")
    t0 = time.monotonic()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    env = make_env(settings.env_config)
    n = env.spec.num_objectives
    rng = np.random.default_rng([seed, 0])
    policy = _build_policy(env, settings, rng)
    policy_old = policy.clone()
    bank = _build_bank(env, settings, rng)
    buffer = ReplayBuffer(hp["replay_capacity"])
    state_index = _state_indexer(env)

    n_temps = 1 if settings.mode == "scalarized" else n
    temp_state = TemperatureState.initial(n_temps, hp["eta0"])
    fit_state = FitState(beta=hp["beta"], beta_mean=hp["beta_mean"], beta_cov=hp["beta_cov"],
                         lr=hp["policy_lr"], nu_lr=hp["nu_lr"], steps=hp["fit_steps"])

    gaussian = hp.get("policy") == "gaussian"
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    writer = _MetricsWriter(metrics_path, n, gaussian)

    exact_path = (hp.get("exact_fit") and isinstance(policy, TabularCategoricalPolicy)
                  and getattr(env, "n_states", 0) == 1 and hp["batch_mode"] == "enumerate")

    collector = None
    if hp["async_actors"] > 0 and settings.mode != "mo_vmpo":
        collector = _AsyncCollector(settings, buffer, policy_old, seed, hp["async_actors"])
        collector.start()
        while len(buffer) == 0:
            time.sleep(0.001)

    support = None
    if (hp["improvement_states"] == "support" and collector is None
            and state_index is not None and settings.mode != "mo_vmpo"):
        support = _StateSupport(env.n_states, env.spec.state_dim, state_index)

    td_cache = None
    if (hasattr(env, "obs_to_index_batch")
            and any(est.kind == "table" for est in bank.estimators)):
        td_cache = _TabularTDCache(env)

    if hp["prefill_episodes"] and settings.mode != "mo_vmpo" and collector is None:
        _collect(env, policy_old, buffer, hp["prefill_episodes"], rng, support)
    if td_cache is not None:
        td_cache.refresh(buffer)
    if hp["warmup_critic_batches"] and settings.mode != "mo_vmpo":
        # chunked so bootstrap targets keep up with the online tables
        remaining = int(hp["warmup_critic_batches"])
        while remaining > 0:
            chunk = min(30, remaining)
            _update_critics(env, settings, bank, buffer, policy_old, state_index, rng,
                            batches=chunk, td_cache=td_cache,
                            batch_size=hp["warmup_batch_size"])
            bank.sync_targets()
            remaining -= chunk

    status, error = "ok", None
    iterations_run = 0
    try:
        for it in range(hp["iterations"]):
            if settings.mode == "mo_vmpo":
                diag = _run_iteration_vmpo(env, settings, policy, policy_old, bank,
                                           temp_state, fit_state, rng)
            elif exact_path:
                diag = _run_iteration_exact(env, settings, policy, policy_old, bank,
                                            temp_state)
            else:
                diag = _run_iteration_mompo(env, settings, policy, policy_old, bank,
                                            buffer, temp_state, fit_state, state_index,
                                            rng, collect=collector is None,
                                            support=support, td_cache=td_cache)
            iterations_run = it + 1
            row = _diag_row(it, diag)

            if it % max(1, hp["sync_every"]) == 0 or it == hp["iterations"] - 1:
                policy_old = policy.clone()
                bank.sync_targets()
                if td_cache is not None:
                    td_cache.refresh(buffer)
                if collector is not None:
                    collector.publish(policy_old)

            if hp["eval_every"] and (it % hp["eval_every"] == 0 or it == hp["iterations"] - 1):
                eval_rng = np.random.default_rng([seed, 1, it])
                und, disc = evaluate_policy(env, policy, hp["eval_episodes"], rng=eval_rng)
                for k in range(n):
                    row[f"return_{k}"] = und[k]
                    row[f"disc_return_{k}"] = disc[k]
            writer.write(row)
    except FloatingPointError as exc:
        status, error = "failed", f"numerical abort at iteration {iterations_run}: {exc}"
    finally:
        if collector is not None:
            collector.stop()
        writer.close()

    snapshot_path = None
    final_und = final_disc = det = None
    if status == "ok":
        eval_rng = np.random.default_rng([seed, 2])
        und, disc = evaluate_policy(env, policy, hp["eval_episodes"], rng=eval_rng)
        det_und, _ = evaluate_policy(env, policy, 1, rng=np.random.default_rng([seed, 3]),
                                     deterministic=True)
        final_und, final_disc, det = und.tolist(), disc.tolist(), det_und.tolist()
        if out_dir is not None:
            snapshot_path = os.path.join(out_dir, "snapshot.json")
            save_snapshot(policy, snapshot_path,
                          metadata={"env": settings.env_config, "mode": settings.mode,
                                    "seed": seed, "run_id": run_id})

    record = RunRecord(run_id=run_id, config_hash=_config_hash(config, seed), seed=seed,
                       status=status, iterations_run=iterations_run,
                       wall_clock=time.monotonic() - t0, final_return=final_und,
                       final_disc_return=final_disc, deterministic_return=det,
                       snapshot_path=snapshot_path, metrics_path=metrics_path, error=error)
    record.history = writer.rows
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump({**record.to_summary(), "config": config}, f, indent=2)
    if status == "failed":
        raise NumericalAbort(error)
    return record


# ---------------------------------------------------------------------------
# sweeps


def _axis_values(value) -> list:
    if isinstance(value, str):
        try:
            out = eval(value, {"__builtins__": {}},
                       {"linspace": lambda a, b, num: np.linspace(a, b, int(num)).tolist()})
        except Exception as exc:
            raise ConfigError(f"malformed axis expression {value!r}: {exc}") from exc
    else:
        out = value
    if not isinstance(out, (list, tuple)) or len(out) == 0:
        raise ConfigError(f"axis {value!r} must expand to a nonempty list")
    return [float(v) for v in out]


def _eval_expr(expr, env: dict) -> float:
    if isinstance(expr, (int, float)):
        return float(expr)
    try:
        return float(eval(expr, {"__builtins__": {}}, dict(env)))
    except Exception as exc:
        raise ConfigError(f"malformed sweep expression {expr!r}: {exc}") from exc


def expand_sweep(grammar: dict) -> list[dict]:
    """Expand a sweep grammar into a deterministic list of settings.

    grammar: {"axes": {name: list | "linspace(a,b,n)"},
              "preference": {"epsilons": [expr...]} or {"weights": [expr...]}}
    Each setting carries the resolved axis values and preference dict.
    """
    if "axes" not in grammar or not isinstance(grammar["axes"], dict) or not grammar["axes"]:
        raise ConfigError("sweep grammar requires a nonempty 'axes' mapping")
    if "preference" not in grammar:
        raise ConfigError("sweep grammar requires a 'preference' template")
    names = list(grammar["axes"])
    values = [_axis_values(grammar["axes"][name]) for name in names]
    template = grammar["preference"]
    if not isinstance(template, dict) or len(template) != 1 or \
            next(iter(template)) not in ("epsilons", "weights"):
        raise ConfigError("preference template must define 'epsilons' or 'weights'")
    key = next(iter(template))
    settings = []
    for combo in itertools.product(*values):
        axis_env = dict(zip(names, combo))
        pref = {key: [_eval_expr(e, axis_env) for e in template[key]]}
        if key == "weights":
            total = sum(pref[key])
            if total <= 0:
                raise ConfigError(f"sweep weights sum to {total} at {axis_env}")
            pref[key] = [w / total for w in pref[key]]
        label = ",".join(f"{k}={v:g}" for k, v in axis_env.items())
        settings.append({"axes": axis_env, "preference": pref, "label": label})
    return settings


def _sweep_worker(args):
    base_config, setting, seed, run_dir = args
    config = dict(base_config)
    config.pop("sweep", None)
    config["preference"] = setting["preference"]
    config["run_id"] = f"{setting['label']}/seed{seed}"
    try:
        record = run_training(config, seed=seed, out_dir=run_dir)
        return record.to_summary()
    except NumericalAbort as exc:
        return {"run_id": config["run_id"], "seed": seed, "status": "failed",
                "error": str(exc), "deterministic_return": None}


def run_sweep(config: dict, out_dir: str, parallel: int = 1):
    """Run every (setting, seed) combination; aggregate a Pareto summary.

    Individual run failures are recorded and do not stop the sweep. Returns
    (ParetoSet, list of per-run summary dicts).
    """
    if "sweep" not in config:
        raise ConfigError("config has no 'sweep' section")
    settings_list = expand_sweep(config["sweep"])
    seeds = config["sweep"].get("seeds", config.get("seeds", [0]))
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("sweep seeds must be a nonempty list")
    resolve_settings({**{k: v for k, v in config.items() if k != "sweep"},
                      "preference": settings_list[0]["preference"]})

    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for i, setting in enumerate(settings_list):
        for seed in seeds:
            run_dir = os.path.join(out_dir, f"run_{i:04d}_seed{seed}")
            jobs.append((config, setting, int(seed), run_dir))

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            summaries = list(pool.map(_sweep_worker, jobs))
    else:
        summaries = [_sweep_worker(job) for job in jobs]

    reference = config.get("reference")
    pareto = ParetoSet(reference=tuple(reference) if reference is not None else None)
    for s in summaries:
        if s.get("status") == "ok" and s.get("deterministic_return") is not None:
            pareto.add(s["run_id"], s["deterministic_return"])
    pareto.write_csv(os.path.join(out_dir, "pareto.csv"))
    extra = {"runs": len(summaries),
             "failed": sum(1 for s in summaries if s.get("status") != "ok")}
    pareto.write_summary(os.path.join(out_dir, "summary.json"), extra=extra)
    with open(os.path.join(out_dir, "runs.json"), "w") as f:
        json.dump(summaries, f, indent=2)
    return pareto, summaries
