"""Replay buffer: trajectory-granular eviction, uniform sampling checked
against exact stored content, episode-respecting sequence windows, and the
newline-delimited persistence round trip."""
import threading

import numpy as np
import pytest

from mompo.replay import ReplayBuffer
from mompo.types import RewardVector, Trajectory, Transition


def make_traj(tag: float, length: int, discount: float = 0.99) -> Trajectory:
    """A trajectory whose states encode (tag, step) so samples are traceable."""
    ts = []
    for i in range(length):
        ts.append(Transition(
            state=(tag, float(i)),
            action=i % 3,
            rewards=RewardVector((float(i), tag)),
            next_state=(tag, float(i + 1)),
            behavior_prob=0.5,
            terminal=(i == length - 1),
        ))
    return Trajectory.from_transitions(ts, discount)


class TestAppendAndEvict:
    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)

    def test_size_counts_transitions(self):
        buf = ReplayBuffer(100)
        buf.append(make_traj(0.0, 4))
        buf.append(make_traj(1.0, 6))
        assert len(buf) == 10
        assert buf.size == 10
        assert buf.write_counter == 10

    def test_oversized_trajectory_rejected(self):
        buf = ReplayBuffer(3)
        with pytest.raises(ValueError):
            buf.append(make_traj(0.0, 4))

    def test_eviction_removes_whole_oldest_trajectory(self):
        buf = ReplayBuffer(5)
        buf.append(make_traj(0.0, 3))
        buf.append(make_traj(1.0, 3))  # 6 > 5: first trajectory evicted
        assert len(buf) == 3
        tags = buf.as_arrays()["states"][:, 0]
        np.testing.assert_array_equal(tags, [1.0, 1.0, 1.0])

    def test_write_counter_survives_eviction(self):
        buf = ReplayBuffer(5)
        for k in range(4):
            buf.append(make_traj(float(k), 3))
        assert buf.write_counter == 12
        assert len(buf) <= 5


class TestSampling:
    def test_empty_buffer_raises_everywhere(self):
        buf = ReplayBuffer(10)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            buf.sample_states(1, rng)
        with pytest.raises(ValueError):
            buf.sample_transitions(1, rng)
        with pytest.raises(ValueError):
            buf.sample_sequences(1, rng=rng)
        with pytest.raises(ValueError):
            buf.as_arrays()

    def test_sampled_states_are_stored_states(self):
        buf = ReplayBuffer(100)
        buf.append(make_traj(0.0, 5))
        buf.append(make_traj(1.0, 7))
        stored = {tuple(s) for s in buf.as_arrays()["states"]}
        samples = buf.sample_states(64, np.random.default_rng(1))
        assert samples.shape == (64, 2)
        for s in samples:
            assert tuple(s) in stored

    def test_state_sampling_close_to_uniform(self):
        # 2 transitions: relative frequency of each within 3 sigma of 1/2
        buf = ReplayBuffer(10)
        buf.append(make_traj(0.0, 1))
        buf.append(make_traj(1.0, 1))
        n = 20_000
        samples = buf.sample_states(n, np.random.default_rng(2))
        frac = np.mean(samples[:, 0] == 0.0)
        assert abs(frac - 0.5) < 3 * 0.5 / np.sqrt(n)

    def test_sampled_transitions_match_stored_rows(self):
        buf = ReplayBuffer(100)
        buf.append(make_traj(0.0, 5))
        buf.append(make_traj(2.0, 4))
        cols = buf.sample_transitions(32, np.random.default_rng(3))
        assert set(cols) == {"states", "actions", "rewards", "next_states",
                             "behavior_probs", "terminals"}
        all_rows = buf.as_arrays()
        stored = set()
        for i in range(len(buf)):
            stored.add((tuple(all_rows["states"][i]), int(all_rows["actions"][i]),
                        tuple(all_rows["rewards"][i]), tuple(all_rows["next_states"][i]),
                        float(all_rows["behavior_probs"][i]), bool(all_rows["terminals"][i])))
        for i in range(32):
            row = (tuple(cols["states"][i]), int(cols["actions"][i]),
                   tuple(cols["rewards"][i]), tuple(cols["next_states"][i]),
                   float(cols["behavior_probs"][i]), bool(cols["terminals"][i]))
            assert row in stored

    def test_as_arrays_preserves_insertion_order(self):
        buf = ReplayBuffer(100)
        buf.append(make_traj(0.0, 2))
        buf.append(make_traj(1.0, 3))
        cols = buf.as_arrays()
        np.testing.assert_array_equal(cols["states"][:, 0], [0, 0, 1, 1, 1])
        np.testing.assert_array_equal(cols["states"][:, 1], [0, 1, 0, 1, 2])
        np.testing.assert_array_equal(cols["terminals"], [False, True, False, False, True])

    def test_continuous_actions_stored_as_float_vectors(self):
        ts = [Transition((0.0,), (0.25, -0.5), RewardVector((1.0,)), (1.0,), 0.3, True)]
        buf = ReplayBuffer(10)
        buf.append(Trajectory.from_transitions(ts, 0.99))
        cols = buf.as_arrays()
        assert cols["actions"].dtype == np.float64
        np.testing.assert_array_equal(cols["actions"], [[0.25, -0.5]])


class TestSequences:
    def test_windows_are_contiguous_and_within_one_episode(self):
        buf = ReplayBuffer(100)
        for tag in range(4):
            buf.append(make_traj(float(tag), 6))
        rng = np.random.default_rng(4)
        for seq in buf.sample_sequences(50, length=4, rng=rng):
            states = seq["states"]
            assert 1 <= len(states) <= 4
            tags = states[:, 0]
            assert np.all(tags == tags[0])  # never spans trajectories
            steps = states[:, 1]
            np.testing.assert_array_equal(np.diff(steps), np.ones(len(steps) - 1))
            # terminal can only ever be the final element of the window
            assert not np.any(seq["terminals"][:-1])

    def test_window_truncates_at_episode_end(self):
        buf = ReplayBuffer(10)
        buf.append(make_traj(0.0, 3))
        rng = np.random.default_rng(5)
        seen_short = False
        for seq in buf.sample_sequences(40, length=8, rng=rng):
            assert len(seq["states"]) <= 3
            assert seq["terminals"][-1] == (seq["states"][-1, 1] == 2.0)
            seen_short = seen_short or len(seq["states"]) < 3
        assert seen_short  # starts mid-episode must truncate


class TestPersistence:
    def test_jsonl_round_trip_restores_content_and_boundaries(self, tmp_path):
        buf = ReplayBuffer(100)
        buf.append(make_traj(0.0, 4, discount=0.9))
        buf.append(make_traj(3.0, 2, discount=0.9))
        path = tmp_path / "replay.jsonl"
        buf.save_jsonl(path)
        assert len(path.read_text().strip().splitlines()) == 6  # one line per transition
        loaded = ReplayBuffer.load_jsonl(path, capacity=100, discount=0.9)
        assert len(loaded) == 6
        a, b = buf.as_arrays(), loaded.as_arrays()
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])
        # boundaries recovered: evicting once must drop exactly 4 transitions
        loaded.append(make_traj(9.0, 95, discount=0.9))
        assert len(loaded) == 95 + 2


class TestConcurrency:
    def test_producers_appending_while_consumer_samples(self):
        buf = ReplayBuffer(500)
        buf.append(make_traj(-1.0, 5))
        errors = []

        def produce(tag):
            try:
                for i in range(30):
                    buf.append(make_traj(tag + i, 5))
            except Exception as exc:  # pragma: no cover - failure path
                errors.append(exc)

        threads = [threading.Thread(target=produce, args=(100.0 * k,)) for k in (1, 2)]
        for t in threads:
            t.start()
        rng = np.random.default_rng(6)
        try:
            for _ in range(200):
                buf.sample_states(8, rng)
                buf.sample_sequences(4, length=3, rng=rng)
        finally:
            for t in threads:
                t.join()
        assert not errors
        assert len(buf) <= 500
        assert buf.write_counter == 5 + 2 * 30 * 5
