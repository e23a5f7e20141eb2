"""Desk-scale benchmark environments.

SimpleWorld: a single-state bandit with three actions and two objectives.
DeepSeaTreasure: the 11x10 grid world with ten treasures of increasing value.
PointMassRun: a toy continuous task with a shaped speed reward and an
action-norm penalty objective that is evaluated without a critic.

All environments are cheap value objects; each rollout worker owns its own
instance. There is no shared mutable state.
"""
from __future__ import annotations

import json
from collections import deque

import numpy as np

from .metrics import pareto_filter
from .types import Box, Discrete, EnvSpec, RewardVector, Transition, Trajectory

__all__ = [
    "SimpleWorld",
    "DeepSeaTreasure",
    "PointMassRun",
    "make_env",
    "rollout",
    "evaluate_policy",
    "true_pareto_front",
]

# SimpleWorld default rewards (objective order: first, second). The left row
# comes from the bandit's published description; right and up are chosen so
# right is optimal for the first objective, left for the second, and up is the
# equal-preference compromise. The table is fully configurable.
SIMPLE_WORLD_REWARDS = ((1.0, 4.0), (4.0, 1.0), (3.0, 3.0))
SIMPLE_WORLD_ACTIONS = ("left", "right", "up")

# DeepSeaTreasure canonical layout: treasure i sits at (row=depth[i], col=i);
# cells below the treasure row of each column are sea floor.
DST_DEPTHS = (1, 2, 3, 4, 4, 4, 7, 7, 9, 10)
DST_VALUES = (0.7, 8.2, 11.5, 14.0, 15.1, 16.1, 19.6, 20.3, 22.4, 23.7)


class SimpleWorld:
    """Single-state bandit; episode length 1.

    `scale_first_objective` multiplies objective-1 rewards, mirroring the
    reward-scale stress test.
    """

    name = "simple_world"

    def __init__(self, rewards=SIMPLE_WORLD_REWARDS, scale_first_objective: float = 1.0,
                 discount: float = 0.99):
        self.rewards = tuple(tuple(float(v) for v in row) for row in rewards)
        self.scale = float(scale_first_objective)
        n_objectives = len(self.rewards[0])
        if any(len(row) != n_objectives for row in self.rewards):
            raise ValueError("all reward rows need the same number of objectives")
        self.spec = EnvSpec(
            state_dim=1,
            action_space=Discrete(len(self.rewards)),
            num_objectives=n_objectives,
            discount=discount,
            max_episode_steps=1,
        )
        self.n_states = 1

    def reward_table(self) -> np.ndarray:
        """[A, N] table with the first-objective scale applied."""
        table = np.asarray(self.rewards, dtype=np.float64).copy()
        table[:, 0] *= self.scale
        return table

    def obs_to_index(self, obs) -> int:
        return 0

    def obs_to_index_batch(self, states) -> np.ndarray:
        return np.zeros(len(states), dtype=np.int64)

    def reset(self) -> np.ndarray:
        return np.zeros(1)

    def step(self, action: int):
        action = int(action)
        if not 0 <= action < len(self.rewards):
            raise ValueError(f"invalid action index {action}")
        rewards = self.reward_table()[action]
        return np.zeros(1), RewardVector(tuple(rewards)), True

    def to_config(self) -> dict:
        return {"name": self.name, "rewards": [list(r) for r in self.rewards],
                "scale_first_objective": self.scale}


class DeepSeaTreasure:
    """Grid world: move toward treasures of increasing value at increasing depth.

    Objectives: time (-1 per step) and treasure (value on pickup). Moves into
    the sea floor or out of bounds have no effect but still cost a step. The
    episode terminates on treasure pickup or after the step limit.
    """

    name = "deep_sea_treasure"
    ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, grid: list[str] | None = None, treasures: list | None = None,
                 horizon: int = 200, discount: float = 0.999):
        if grid is None:
            rows, cols = max(DST_DEPTHS) + 1, len(DST_DEPTHS)
            grid = ["".join("#" if r > DST_DEPTHS[c] else "." for c in range(cols))
                    for r in range(rows)]
            treasures = [(DST_DEPTHS[i], i, DST_VALUES[i]) for i in range(cols)]
        if treasures is None:
            raise ValueError("custom grids need an explicit treasure list")
        self.grid = [str(row) for row in grid]
        self.n_rows = len(self.grid)
        self.n_cols = len(self.grid[0])
        if any(len(row) != self.n_cols for row in self.grid):
            raise ValueError("ragged grid")
        self.treasures = {(int(r), int(c)): float(v) for r, c, v in treasures}
        if len(self.treasures) != len(treasures):
            raise ValueError("treasures must occupy distinct cells")
        for (r, c) in self.treasures:
            if self._blocked(r, c):
                raise ValueError(f"treasure at blocked cell ({r}, {c})")
        if self._blocked(0, 0) or (0, 0) in self.treasures:
            raise ValueError("start cell must be free")
        self.horizon = int(horizon)
        self.spec = EnvSpec(
            state_dim=2,
            action_space=Discrete(4),
            num_objectives=2,
            discount=discount,
            max_episode_steps=self.horizon,
        )
        self.n_states = self.n_rows * self.n_cols
        self._pos = (0, 0)
        self._steps = 0

    def _blocked(self, r: int, c: int) -> bool:
        return self.grid[r][c] == "#"

    def obs_to_index(self, obs) -> int:
        return int(round(float(obs[0]))) * self.n_cols + int(round(float(obs[1])))

    def obs_to_index_batch(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        return (np.rint(states[:, 0]).astype(np.int64) * self.n_cols
                + np.rint(states[:, 1]).astype(np.int64))

    def _obs(self) -> np.ndarray:
        return np.array([float(self._pos[0]), float(self._pos[1])])

    def reset(self) -> np.ndarray:
        self._pos = (0, 0)
        self._steps = 0
        return self._obs()

    def step(self, action: int):
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"invalid action index {action}")
        dr, dc = self.ACTIONS[action]
        r, c = self._pos[0] + dr, self._pos[1] + dc
        if 0 <= r < self.n_rows and 0 <= c < self.n_cols and not self._blocked(r, c):
            self._pos = (r, c)
        self._steps += 1
        value = self.treasures.get(self._pos, 0.0)
        terminal = value > 0.0 or self._steps >= self.horizon
        return self._obs(), RewardVector((-1.0, value)), terminal

    def shortest_path_steps(self) -> dict:
        """BFS step counts from the start to every treasure cell."""
        dist = {(0, 0): 0}
        queue = deque([(0, 0)])
        while queue:
            r, c = queue.popleft()
            if (r, c) in self.treasures:
                continue  # treasures are absorbing
            for dr, dc in self.ACTIONS:
                nr, nc = r + dr, c + dc
                if 0 <= nr < self.n_rows and 0 <= nc < self.n_cols \
                        and not self._blocked(nr, nc) and (nr, nc) not in dist:
                    dist[(nr, nc)] = dist[(r, c)] + 1
                    queue.append((nr, nc))
        return {cell: dist[cell] for cell in self.treasures if cell in dist}

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "grid": list(self.grid),
            "treasures": [[r, c, v] for (r, c), v in sorted(self.treasures.items())],
            "horizon": self.horizon,
            "discount": self.spec.discount,
        }


def true_pareto_front(env: DeepSeaTreasure) -> list[tuple[float, float]]:
    """(treasure value, time return) pairs: (v_i, -t_i) with t_i the BFS
    shortest path length from the start; dominated pairs removed."""
    steps = env.shortest_path_steps()
    unreachable = [cell for cell in env.treasures if cell not in steps]
    if unreachable:
        raise ValueError(f"unreachable treasure(s): {unreachable}")
    points = [(env.treasures[cell], -float(t)) for cell, t in steps.items()]
    return sorted(pareto_filter(points))


class PointMassRun:
    """1-D velocity control: reach and hold a target speed while keeping
    actions small. Dynamics v' = 0.95 v + 0.5 a with a clipped to [-1, 1];
    rewards are [min(v'/v*, 1), -|a|] with the penalty charged on the
    commanded (unclipped) action. The penalty objective needs no critic."""

    name = "point_mass_run"

    def __init__(self, target_speed: float = 1.0, horizon: int = 100, discount: float = 0.99):
        self.target_speed = float(target_speed)
        self.horizon = int(horizon)
        self.spec = EnvSpec(
            state_dim=1,
            action_space=Box(1, -1.0, 1.0),
            num_objectives=2,
            discount=discount,
            max_episode_steps=self.horizon,
        )
        self._v = 0.0
        self._steps = 0

    def reset(self) -> np.ndarray:
        self._v = 0.0
        self._steps = 0
        return np.array([self._v])

    def step(self, action):
        a = float(np.asarray(action).reshape(-1)[0])
        a_eff = min(max(a, -1.0), 1.0)
        self._v = 0.95 * self._v + 0.5 * a_eff
        self._steps += 1
        task = min(self._v / self.target_speed, 1.0)
        terminal = self._steps >= self.horizon
        return np.array([self._v]), RewardVector((task, -abs(a))), terminal

    def to_config(self) -> dict:
        return {"name": self.name, "target_speed": self.target_speed,
                "horizon": self.horizon, "discount": self.spec.discount}


_ENV_REGISTRY = {
    "simple_world": SimpleWorld,
    "deep_sea_treasure": DeepSeaTreasure,
    "point_mass_run": PointMassRun,
}


def make_env(config: dict | str):
    """Build an environment from a config dict (or path to a JSON file).

    The dict carries a "name" key plus constructor arguments, e.g. grid row
    strings and a treasure list for DeepSeaTreasure.
    """
    if isinstance(config, str) or hasattr(config, "__fspath__"):
        with open(config) as f:
            config = json.load(f)
    config = dict(config)
    name = config.pop("name")
    if name not in _ENV_REGISTRY:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(_ENV_REGISTRY)}")
    cls = _ENV_REGISTRY[name]
    if name == "deep_sea_treasure" and "treasures" in config:
        config["treasures"] = [tuple(t) for t in config["treasures"]]
    return cls(**config)


def policy_state(env, policy, obs):
    """Tabular policies index states; parametric policies take the raw obs."""
    if hasattr(policy, "n_states") and hasattr(env, "obs_to_index"):
        return env.obs_to_index(obs)
    return obs


def rollout(env, policy, rng, deterministic: bool = False) -> Trajectory:
    """One episode under `policy`, recording behavior probabilities."""
    obs = env.reset()
    transitions = []
    terminal = False
    while not terminal:
        s = policy_state(env, policy, obs)
        if deterministic:
            d = policy.dist(np.asarray([s]) if np.isscalar(s) else s)
            if hasattr(d, "probs"):
                action = int(np.argmax(d.probs[0]))
            else:
                action = d.mean[0]
        else:
            action = policy.sample(s, rng)
        logp = policy.log_prob(s, action)
        next_obs, rewards, terminal = env.step(action)
        transitions.append(Transition(
            state=tuple(np.atleast_1d(obs).astype(float)),
            action=tuple(np.atleast_1d(action).astype(float)) if not np.isscalar(action) and not isinstance(action, int) else int(action),
            rewards=rewards,
            next_state=tuple(np.atleast_1d(next_obs).astype(float)),
            behavior_prob=float(np.exp(logp)),
            terminal=bool(terminal),
        ))
        obs = next_obs
    return Trajectory.from_transitions(transitions, env.spec.discount)


def evaluate_policy(env, policy, episodes: int, discount: float | None = None,
                    rng=None, deterministic: bool = False):
    """Monte-Carlo mean return per objective.

    Returns (undiscounted [N], discounted [N]); reproducible given the rng seed.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if discount is None:
        discount = env.spec.discount
    rng = rng if rng is not None else np.random.default_rng(0)
    n = env.spec.num_objectives
    undisc = np.zeros(n)
    disc = np.zeros(n)
    for _ in range(episodes):
        traj = rollout(env, policy, rng, deterministic=deterministic)
        undisc += np.asarray(traj.episode_return)
        g = 1.0
        d = np.zeros(n)
        for t in traj.transitions:
            d += g * np.asarray(t.rewards.values)
            g *= discount
        disc += d
    return undisc / episodes, disc / episodes
