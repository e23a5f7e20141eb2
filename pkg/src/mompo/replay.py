"""Trajectory replay buffer.

Stores whole trajectories in a ring (capacity counted in transitions, eviction
at trajectory granularity so off-policy sequences are never broken), and
serves both uniform state sampling (the visitation distribution) and
contiguous sequence sampling for multi-step targets.

Concurrency contract: multiple producers may append while a single consumer
samples; appends are serialized by a lock and sampling observes a consistent
snapshot. The synchronous runner degenerates to alternating phases.
"""
from __future__ import annotations

import threading

import numpy as np

from .types import Trajectory, transitions_from_jsonl, transitions_to_jsonl

__all__ = ["ReplayBuffer"]


class _Block:
    """Columnar storage of one trajectory."""

    __slots__ = ("states", "actions", "rewards", "next_states", "behavior_probs",
                 "terminals", "length", "trajectory")

    def __init__(self, traj: Trajectory):
        ts = traj.transitions
        self.length = len(ts)
        self.states = np.asarray([t.state for t in ts], dtype=np.float64)
        first = ts[0].action
        if isinstance(first, tuple):
            self.actions = np.asarray([t.action for t in ts], dtype=np.float64)
        else:
            self.actions = np.asarray([t.action for t in ts], dtype=np.int64)
        self.rewards = np.asarray([t.rewards.values for t in ts], dtype=np.float64)
        self.next_states = np.asarray([t.next_state for t in ts], dtype=np.float64)
        self.behavior_probs = np.asarray([t.behavior_prob for t in ts], dtype=np.float64)
        self.terminals = np.asarray([t.terminal for t in ts], dtype=bool)
        self.trajectory = traj

    def window(self, start: int, stop: int) -> dict:
        return {
            "states": self.states[start:stop],
            "actions": self.actions[start:stop],
            "rewards": self.rewards[start:stop],
            "next_states": self.next_states[start:stop],
            "behavior_probs": self.behavior_probs[start:stop],
            "terminals": self.terminals[start:stop],
        }


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._blocks: list[_Block] = []
        self._size = 0
        self.write_counter = 0
        self._lock = threading.Lock()
        self._cumlens: np.ndarray | None = None

    def __len__(self) -> int:
        return self._size

    @property
    def size(self) -> int:
        return self._size

    def append(self, trajectory: Trajectory) -> None:
        block = _Block(trajectory)
        if block.length > self.capacity:
            raise ValueError(
                f"trajectory of {block.length} transitions exceeds capacity {self.capacity}")
        with self._lock:
            self._blocks.append(block)
            self._size += block.length
            self.write_counter += block.length
            while self._size > self.capacity:
                evicted = self._blocks.pop(0)
                self._size -= evicted.length
            self._cumlens = None

    def _snapshot(self):
        """Consistent (blocks, cumulative lengths) view for lock-free reads."""
        with self._lock:
            if self._cumlens is None:
                self._cumlens = np.cumsum([b.length for b in self._blocks])
            return tuple(self._blocks), self._cumlens

    def _locate(self, flat_idx: np.ndarray, cumlens: np.ndarray):
        block_idx = np.searchsorted(cumlens, flat_idx, side="right")
        starts = np.concatenate([[0], cumlens[:-1]])
        offsets = flat_idx - starts[block_idx]
        return block_idx, offsets

    def sample_states(self, L: int, rng) -> np.ndarray:
        """L states uniform with replacement over stored transitions."""
        blocks, cumlens = self._snapshot()
        if not blocks:
            raise ValueError("cannot sample from an empty buffer")
        flat = rng.integers(0, cumlens[-1], size=L)
        block_idx, offsets = self._locate(flat, cumlens)
        return np.stack([blocks[b].states[o] for b, o in zip(block_idx, offsets)])

    def sample_transitions(self, count: int, rng) -> dict:
        """Uniform transitions, returned columnar."""
        blocks, cumlens = self._snapshot()
        if not blocks:
            raise ValueError("cannot sample from an empty buffer")
        flat = rng.integers(0, cumlens[-1], size=count)
        block_idx, offsets = self._locate(flat, cumlens)
        cols = {}
        for key in ("states", "actions", "rewards", "next_states", "behavior_probs", "terminals"):
            cols[key] = np.stack([getattr(blocks[b], key)[o] for b, o in zip(block_idx, offsets)])
        return cols

    def as_arrays(self) -> dict:
        """All stored transitions as contiguous columnar arrays.

        One O(size) concatenation; callers that sample many small batches can
        materialize once and index the result instead of paying per-batch
        gather costs through the block structure.
        """
        blocks, _ = self._snapshot()
        if not blocks:
            raise ValueError("cannot materialize an empty buffer")
        cols = {}
        for key in ("states", "actions", "rewards", "next_states", "behavior_probs",
                    "terminals"):
            cols[key] = np.concatenate([getattr(b, key) for b in blocks], axis=0)
        return cols

    def sample_sequences(self, count: int, length: int = 8, rng=None) -> list[dict]:
        """Contiguous windows starting at uniform positions, truncated at the
        episode end (terminal flags preserved); windows never span episodes."""
        blocks, cumlens = self._snapshot()
        if not blocks:
            raise ValueError("cannot sample from an empty buffer")
        flat = rng.integers(0, cumlens[-1], size=count)
        block_idx, offsets = self._locate(flat, cumlens)
        out = []
        for b, o in zip(block_idx, offsets):
            block = blocks[b]
            out.append(block.window(int(o), min(int(o) + length, block.length)))
        return out

    # -- persistence -------------------------------------------------------

    def save_jsonl(self, path) -> None:
        blocks, _ = self._snapshot()
        with open(path, "w") as f:
            for block in blocks:
                f.write(transitions_to_jsonl(block.trajectory.transitions))

    @classmethod
    def load_jsonl(cls, path, capacity: int, discount: float) -> "ReplayBuffer":
        """Rebuild a buffer from the newline-delimited transition format;
        trajectory boundaries are recovered from terminal flags."""
        with open(path) as f:
            transitions = transitions_from_jsonl(f.read())
        buf = cls(capacity)
        current = []
        for t in transitions:
            current.append(t)
            if t.terminal:
                buf.append(Trajectory.from_transitions(current, discount))
                current = []
        if current:
            buf.append(Trajectory.from_transitions(current, discount))
        return buf
