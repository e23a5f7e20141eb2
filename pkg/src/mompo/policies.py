"""Policy families: tabular categorical, parametric categorical, diagonal Gaussian.

All policies expose the same surface used by the improvement module:
  dist(states)            -> distribution parameters at a batch of states
  sample / sample_actions -> reproducible draws given an rng
  log_prob                -> exact log mass/density
  params / clone          -> flat parameter access for fitting and snapshots

Categorical logits are shifted by their max before softmax (stability, no
effect on the distribution). Gaussian standard deviations are kept strictly
positive by a softplus transform plus a configured minimum-variance floor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import FeedForwardNet, sigmoid, softplus

__all__ = [
    "CategoricalDist",
    "GaussianDist",
    "TabularCategoricalPolicy",
    "ParametricCategoricalPolicy",
    "DiagonalGaussianPolicy",
    "kl_categorical",
    "kl_gaussian_decoupled",
    "gaussian_log_prob",
    "save_snapshot",
    "load_snapshot",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class CategoricalDist:
    probs: np.ndarray  # [B, A]


@dataclass
class GaussianDist:
    mean: np.ndarray  # [B, A]
    std: np.ndarray  # [B, A]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_categorical(p, q) -> float | np.ndarray:
    """KL(p || q) = sum p ln(p/q), rowwise for 2-D inputs.

    Raises on support violation (p > 0 where q = 0).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0.0
    if np.any(support & (q <= 0.0)):
        raise ValueError("support violation: q has zero mass where p is positive")
    ratio = np.ones_like(p)
    np.divide(p, q, out=ratio, where=support)
    terms = np.where(support, p * np.log(ratio), 0.0)
    return terms.sum(axis=-1)


def kl_gaussian_decoupled(old: GaussianDist, new: GaussianDist):
    """Decoupled diagonal-Gaussian KLs against the old policy.

    kl_mean = KL(old || N(mean_new, cov_old)) — mean movement only.
    kl_cov  = KL(old || N(mean_old, cov_new)) — covariance movement only.
    Both are summed over action dimensions, rowwise for batches.
    """
    mo, so = np.asarray(old.mean, dtype=np.float64), np.asarray(old.std, dtype=np.float64)
    mn, sn = np.asarray(new.mean, dtype=np.float64), np.asarray(new.std, dtype=np.float64)
    if mo.shape != mn.shape or so.shape != sn.shape:
        raise ValueError("dimension mismatch between old and new Gaussians")
    kl_mean = (0.5 * ((mn - mo) / so) ** 2).sum(axis=-1)
    kl_cov = (np.log(sn / so) + so**2 / (2.0 * sn**2) - 0.5).sum(axis=-1)
    return kl_mean, kl_cov


def gaussian_log_prob(mean, std, action) -> float | np.ndarray:
    """Diagonal Gaussian log density, summed over action dimensions."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    z = (action - mean) / std
    return (-0.5 * (z * z + _LOG_2PI) - np.log(std)).sum(axis=-1)


class TabularCategoricalPolicy:
    """Exact per-state probability rows, parametrized by a logits table.

    States are integer indices (environments provide the mapping).
    """

    family = "tabular_categorical"

    def __init__(self, n_states: int, n_actions: int, logits: np.ndarray | None = None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        if logits is None:
            logits = np.zeros((self.n_states, self.n_actions))
        self.logits = np.array(logits, dtype=np.float64).reshape(self.n_states, self.n_actions)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "TabularCategoricalPolicy":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim == 1:
            probs = probs[None, :]
        with np.errstate(divide="ignore"):
            logits = np.log(probs)
        return cls(probs.shape[0], probs.shape[1], logits)

    @property
    def probs(self) -> np.ndarray:
        return _softmax(self.logits)

    @property
    def params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    @property
    def n_params(self) -> int:
        return self.logits.size

    def set_params(self, flat: np.ndarray) -> None:
        self.logits = np.array(flat, dtype=np.float64).reshape(self.n_states, self.n_actions)

    def dist(self, state_idx) -> CategoricalDist:
        idx = np.asarray(state_idx, dtype=np.int64)
        return CategoricalDist(probs=_softmax(self.logits[idx]))

    def log_prob(self, state_idx: int, action: int) -> float:
        row = _softmax(self.logits[int(state_idx)])
        return float(np.log(row[int(action)]))

    def sample(self, state_idx: int, rng) -> int:
        row = _softmax(self.logits[int(state_idx)])
        return int(rng.choice(self.n_actions, p=row))

    def sample_actions(self, state_idx, m: int, rng):
        """M actions per state. Returns (actions [L, M] int, log_probs [L, M])."""
        idx = np.asarray(state_idx, dtype=np.int64).reshape(-1)
        probs = _softmax(self.logits[idx])  # [L, A]
        cdf = np.cumsum(probs, axis=1)
        u = rng.random((idx.shape[0], m))
        actions = (u[:, :, None] > cdf[:, None, :]).sum(axis=2)
        actions = np.minimum(actions, self.n_actions - 1)
        logp = np.log(np.take_along_axis(probs, actions.reshape(idx.shape[0], m), axis=1))
        return actions.astype(np.int64), logp

    def clone(self) -> "TabularCategoricalPolicy":
        return TabularCategoricalPolicy(self.n_states, self.n_actions, self.logits.copy())


class ParametricCategoricalPolicy:
    """Network producing one logits vector of size |A| per state."""

    family = "categorical_net"

    def __init__(self, net: FeedForwardNet):
        self.net = net
        self.n_actions = net.layer_sizes[-1]
        self.state_dim = net.layer_sizes[0]

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def set_params(self, flat: np.ndarray) -> None:
        self.net.set_params(flat)

    def _states(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return s[None, :] if s.ndim == 1 else s

    def dist(self, states) -> CategoricalDist:
        return CategoricalDist(probs=_softmax(self.net.forward(self._states(states))))

    def logits_cached(self, states):
        return self.net.forward_cached(self._states(states))

    def backward(self, cache, dlogits) -> np.ndarray:
        return self.net.backward(cache, dlogits)

    def log_prob(self, state, action: int) -> float:
        probs = self.dist(state).probs[0]
        return float(np.log(probs[int(action)]))

    def sample(self, state, rng) -> int:
        probs = self.dist(state).probs[0]
        return int(rng.choice(self.n_actions, p=probs))

    def sample_actions(self, states, m: int, rng):
        probs = self.dist(states).probs  # [L, A]
        cdf = np.cumsum(probs, axis=1)
        u = rng.random((probs.shape[0], m))
        actions = (u[:, :, None] > cdf[:, None, :]).sum(axis=2)
        actions = np.minimum(actions, self.n_actions - 1)
        logp = np.log(np.take_along_axis(probs, actions, axis=1))
        return actions.astype(np.int64), logp

    def clone(self) -> "ParametricCategoricalPolicy":
        return ParametricCategoricalPolicy(self.net.clone())


class DiagonalGaussianPolicy:
    """Network producing mean and diagonal scale per state.

    The net outputs [mean_raw, std_raw] of size 2*action_dim. The mean is
    optionally squashed with tanh; the scale is softplus(std_raw) plus a floor
    of sqrt(min_variance), so the variance never drops below min_variance.
    Sampling does not clip: if box bounds are configured, log_prob refuses
    actions outside them (such actions cannot be this policy's own samples).
    """

    family = "diagonal_gaussian"

    def __init__(self, net: FeedForwardNet, action_dim: int, *, tanh_mean: bool = True,
                 min_variance: float = 1e-12, bounds: tuple[float, float] | None = None):
        if net.layer_sizes[-1] != 2 * action_dim:
            raise ValueError("net must output 2 * action_dim values")
        self.net = net
        self.action_dim = int(action_dim)
        self.state_dim = net.layer_sizes[0]
        self.tanh_mean = bool(tanh_mean)
        self.min_variance = float(min_variance)
        self.min_std = float(np.sqrt(min_variance))
        self.bounds = bounds

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def set_params(self, flat: np.ndarray) -> None:
        self.net.set_params(flat)

    def _states(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return s[None, :] if s.ndim == 1 else s

    def _heads(self, raw: np.ndarray):
        mean_raw = raw[:, : self.action_dim]
        std_raw = raw[:, self.action_dim:]
        mean = np.tanh(mean_raw) if self.tanh_mean else mean_raw
        std = softplus(std_raw) + self.min_std
        return mean, std

    def dist(self, states) -> GaussianDist:
        raw = self.net.forward(self._states(states))
        mean, std = self._heads(raw)
        return GaussianDist(mean=mean, std=std)

    def heads_cached(self, states):
        """Returns (mean [L,A], std [L,A], cache) for use with backward_heads."""
        raw, cache = self.net.forward_cached(self._states(states))
        mean, std = self._heads(raw)
        cache = {"net": cache, "raw": raw, "mean": mean}
        return mean, std, cache

    def backward_heads(self, cache, dmean: np.ndarray, dstd: np.ndarray) -> np.ndarray:
        """Backprop gradients w.r.t. mean and std through the head transforms."""
        raw = cache["raw"]
        if self.tanh_mean:
            dmean_raw = dmean * (1.0 - cache["mean"] ** 2)
        else:
            dmean_raw = dmean
        dstd_raw = dstd * sigmoid(raw[:, self.action_dim:])
        return self.net.backward(cache["net"], np.concatenate([dmean_raw, dstd_raw], axis=1))

    def log_prob(self, state, action) -> float:
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if self.bounds is not None:
            lo, hi = self.bounds
            if np.any(action < lo) or np.any(action > hi):
                raise ValueError(f"action {action} outside box bounds [{lo}, {hi}]")
        d = self.dist(state)
        return float(gaussian_log_prob(d.mean[0], d.std[0], action))

    def sample(self, state, rng) -> np.ndarray:
        d = self.dist(state)
        return d.mean[0] + d.std[0] * rng.standard_normal(self.action_dim)

    def sample_actions(self, states, m: int, rng):
        """M actions per state. Returns (actions [L, M, A], log_probs [L, M])."""
        d = self.dist(states)
        L = d.mean.shape[0]
        eps = rng.standard_normal((L, m, self.action_dim))
        actions = d.mean[:, None, :] + d.std[:, None, :] * eps
        logp = gaussian_log_prob(d.mean[:, None, :], d.std[:, None, :], actions)
        return actions, logp

    def clone(self) -> "DiagonalGaussianPolicy":
        return DiagonalGaussianPolicy(
            self.net.clone(), self.action_dim, tanh_mean=self.tanh_mean,
            min_variance=self.min_variance, bounds=self.bounds)


# -- snapshots ---------------------------------------------------------------


def save_snapshot(policy, path, metadata: dict | None = None) -> dict:
    """Policy snapshot: JSON with family tag, layer sizes, flat parameters,
    and RNG-independent metadata. Returns the written dict."""
    meta = dict(metadata or {})
    if policy.family == "tabular_categorical":
        layer_sizes = [policy.n_states, policy.n_actions]
    else:
        layer_sizes = list(policy.net.layer_sizes)
        meta["layer_norm_first"] = policy.net.layer_norm_first
    if policy.family == "diagonal_gaussian":
        meta.update(
            action_dim=policy.action_dim,
            tanh_mean=policy.tanh_mean,
            min_variance=policy.min_variance,
            bounds=list(policy.bounds) if policy.bounds is not None else None,
        )
    snap = {
        "family": policy.family,
        "layer_sizes": layer_sizes,
        "params": [float(p) for p in policy.params],
        "metadata": meta,
    }
    if path is not None:
        with open(path, "w") as f:
            json.dump(snap, f)
    return snap


def load_snapshot(source) -> tuple[object, dict]:
    """Load a policy from a snapshot dict or file path. Returns (policy, metadata)."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source) as f:
            snap = json.load(f)
    else:
        snap = source
    family = snap["family"]
    params = np.asarray(snap["params"], dtype=np.float64)
    meta = snap.get("metadata", {})
    if family == "tabular_categorical":
        n_states, n_actions = snap["layer_sizes"]
        policy = TabularCategoricalPolicy(n_states, n_actions, params.reshape(n_states, n_actions))
    elif family == "categorical_net":
        net = FeedForwardNet(snap["layer_sizes"], layer_norm_first=meta.get("layer_norm_first", False))
        net.set_params(params)
        policy = ParametricCategoricalPolicy(net)
    elif family == "diagonal_gaussian":
        net = FeedForwardNet(snap["layer_sizes"], layer_norm_first=meta.get("layer_norm_first", False))
        net.set_params(params)
        bounds = meta.get("bounds")
        policy = DiagonalGaussianPolicy(
            net, meta["action_dim"], tanh_mean=meta.get("tanh_mean", True),
            min_variance=meta.get("min_variance", 1e-12),
            bounds=tuple(bounds) if bounds else None)
    else:
        raise ValueError(f"unknown policy family: {family}")
    return policy, meta
