"""Core data model shared by all modules.

Multi-objective MDP value objects: environment descriptors, per-objective
reward vectors, transitions, trajectories, and preference specifications.
Everything here is an immutable value object, safe to share across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

__all__ = [
    "Discrete",
    "Box",
    "EnvSpec",
    "RewardVector",
    "Transition",
    "Trajectory",
    "PreferenceSpec",
    "validate_preference",
    "transitions_to_jsonl",
    "transitions_from_jsonl",
]


@dataclass(frozen=True)
class Discrete:
    """Finite action space with actions 0..n-1."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"discrete action space needs n >= 1, got {self.n}")

    def contains(self, action) -> bool:
        return isinstance(action, (int,)) or (
            hasattr(action, "is_integer") and float(action).is_integer()
        ) and 0 <= int(action) < self.n


@dataclass(frozen=True)
class Box:
    """Continuous box action space [lower, upper]^dim."""

    dim: int
    lower: float
    upper: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"box action space needs dim >= 1, got {self.dim}")
        if not self.lower < self.upper:
            raise ValueError("box bounds must satisfy lower < upper")


@dataclass(frozen=True)
class EnvSpec:
    """Static description of a multi-objective MDP."""

    state_dim: int
    action_space: Discrete | Box
    num_objectives: int
    discount: float
    max_episode_steps: int

    def __post_init__(self):
        if self.num_objectives < 1:
            raise ValueError("num_objectives must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")


@dataclass(frozen=True)
class RewardVector:
    """Per-objective instantaneous reward r_k(s, a)."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"reward vector has non-finite entries: {self.values}")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k: int) -> float:
        return self.values[k]

    def validate(self, n: int) -> "RewardVector":
        if len(self.values) != n:
            raise ValueError(f"reward vector has {len(self.values)} entries, expected {n}")
        return self


def _as_state(x) -> tuple[float, ...]:
    return tuple(float(v) for v in x)


@dataclass(frozen=True)
class Transition:
    """One environment step, including the behavior probability b(a|s) of the
    action that produced it (a mass for discrete actions, a density for
    continuous ones)."""

    state: tuple[float, ...]
    action: int | tuple[float, ...]
    rewards: RewardVector
    next_state: tuple[float, ...]
    behavior_prob: float
    terminal: bool

    def __post_init__(self):
        object.__setattr__(self, "state", _as_state(self.state))
        object.__setattr__(self, "next_state", _as_state(self.next_state))
        if isinstance(self.action, (tuple, list)):
            object.__setattr__(self, "action", tuple(float(a) for a in self.action))
        else:
            object.__setattr__(self, "action", int(self.action))
        if not (0.0 < self.behavior_prob and math.isfinite(self.behavior_prob)):
            raise ValueError(f"behavior_prob must be positive and finite, got {self.behavior_prob}")

    def to_dict(self) -> dict:
        return {
            "state": list(self.state),
            "action": list(self.action) if isinstance(self.action, tuple) else self.action,
            "rewards": list(self.rewards.values),
            "next_state": list(self.next_state),
            "behavior_prob": self.behavior_prob,
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        action = d["action"]
        if isinstance(action, list):
            action = tuple(action)
        return cls(
            state=tuple(d["state"]),
            action=action,
            rewards=RewardVector(tuple(d["rewards"])),
            next_state=tuple(d["next_state"]),
            behavior_prob=float(d["behavior_prob"]),
            terminal=bool(d["terminal"]),
        )


@dataclass(frozen=True)
class Trajectory:
    """Contiguous episode fragment with precomputed per-objective returns.

    Rewards are stored per transition as full vectors, never scalarized at
    collection time, so one dataset serves both the multi-objective and the
    scalarized training modes.
    """

    transitions: tuple[Transition, ...]
    episode_return: tuple[float, ...]
    discounted_return: tuple[float, ...]
    discount: float

    @classmethod
    def from_transitions(cls, transitions, discount: float) -> "Trajectory":
        transitions = tuple(transitions)
        if not transitions:
            raise ValueError("trajectory needs at least one transition")
        n = len(transitions[0].rewards)
        undisc = [0.0] * n
        disc = [0.0] * n
        g = 1.0
        for t in transitions:
            for k in range(n):
                undisc[k] += t.rewards[k]
                disc[k] += g * t.rewards[k]
            g *= discount
        return cls(transitions, tuple(undisc), tuple(disc), float(discount))

    def __post_init__(self):
        terminals = [i for i, t in enumerate(self.transitions) if t.terminal]
        if terminals and (len(terminals) > 1 or terminals[0] != len(self.transitions) - 1):
            raise ValueError("at most one terminal transition is allowed, at the end")

    def __len__(self) -> int:
        return len(self.transitions)

    def to_jsonl(self) -> str:
        return transitions_to_jsonl(self.transitions)

    @classmethod
    def from_jsonl(cls, text: str, discount: float) -> "Trajectory":
        return cls.from_transitions(transitions_from_jsonl(text), discount)


def transitions_to_jsonl(transitions) -> str:
    """Newline-delimited JSON, one transition per line."""
    return "\n".join(json.dumps(t.to_dict()) for t in transitions) + "\n"


def transitions_from_jsonl(text: str) -> list[Transition]:
    return [Transition.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class PreferenceSpec:
    """Per-objective preference encoding.

    Exactly one of `epsilons` (per-objective KL budgets, MO mode) or `weights`
    (linear scalarization) is populated. epsilon_k = 0 is permitted and means
    objective k is ignored.
    """

    epsilons: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epsilons is not None:
            object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if (self.epsilons is None) == (self.weights is None):
            raise ValueError("exactly one of epsilons/weights must be given")

    @property
    def mode(self) -> str:
        return "epsilon" if self.epsilons is not None else "weights"

    def to_dict(self) -> dict:
        if self.epsilons is not None:
            return {"epsilons": list(self.epsilons)}
        return {"weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceSpec":
        return cls(
            epsilons=tuple(d["epsilons"]) if "epsilons" in d else None,
            weights=tuple(d["weights"]) if "weights" in d else None,
        )


def validate_preference(spec: PreferenceSpec, n: int) -> PreferenceSpec:
    """Check a preference against an environment's objective count.

    Raises ValueError on dimension mismatch, negative entries, or scalarization
    weights that do not sum to 1.
    """
    if spec.mode == "epsilon":
        if len(spec.epsilons) != n:
            raise ValueError(f"expected {n} epsilons, got {len(spec.epsilons)}")
        if any(e < 0 for e in spec.epsilons):
            raise ValueError(f"epsilons must be nonnegative, got {spec.epsilons}")
    else:
        if len(spec.weights) != n:
            raise ValueError(f"expected {n} weights, got {len(spec.weights)}")
        if any(w < 0 for w in spec.weights):
            raise ValueError(f"weights must be nonnegative, got {spec.weights}")
        if abs(sum(spec.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got sum {sum(spec.weights)}")
    return spec
