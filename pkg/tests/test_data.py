import numpy as np
import pytest

from mixgame.data import (EpisodeRecord, add_noise, load_dataset, save_dataset, split_trials)
from mixgame.dynamics import rollout_array


def rec(trial=0, T=20, seed=3):
    rng = np.random.default_rng(trial)
    states = np.stack([rollout_array(np.array([*rng.normal(size=2), 0.1, 0.8]),
                                     rng.uniform(-1, 1, (T - 1, 2))) for _ in range(3)], axis=1)
    return EpisodeRecord(trial, seed, rng.normal(size=(3, 2)) / 3, rng.uniform(0.1, 0.9, 3), states)


def test_dataset_round_trip_is_exact(tmp_path):
    records = [rec(k) for k in range(4)]
    path = save_dataset(tmp_path / "d" / "trials.jsonl", records)
    back = load_dataset(path)
    assert len(back) == 4
    for a, b in zip(records, back):
        assert a.trial_id == b.trial_id and a.seed == b.seed
        assert a.states.tobytes() == b.states.tobytes()
        assert a.goals.tobytes() == b.goals.tobytes()
        assert a.lambdas.tobytes() == b.lambdas.tobytes()
    save_dataset(tmp_path / "again.jsonl", back)
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_malformed_line_is_reported(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"trial_id": 0}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_dataset(p)


def test_record_validation():
    with pytest.raises(ValueError):
        EpisodeRecord(0, 0, np.zeros((2, 2)), np.zeros(2), np.zeros((5, 3, 4)))


def test_noise_keeps_first_heading_and_rebuilds_the_rest():
    states = rollout_array(np.array([0, 0, 0.5, 0.9]), np.zeros((50, 2)))
    noisy = add_noise(states, 0.05, np.random.default_rng(0))
    np.testing.assert_array_equal(noisy[0, 2:], states[0, 2:])
    step = np.diff(noisy[:, :2], axis=0)
    np.testing.assert_allclose(noisy[1:, 3], np.hypot(*step.T) / 0.1, rtol=1e-12)
    np.testing.assert_allclose(add_noise(states, 0.0, None), states)
    with pytest.raises(ValueError):
        add_noise(states, -1.0, np.random.default_rng(0))


def test_noisy_states_are_reproducible_per_sigma():
    r = rec()
    a, b = r.noisy_states(0.1), r.noisy_states(0.1)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, r.noisy_states(0.05))
    assert r.noisy_states(0.0).tobytes() == r.states.tobytes()


def test_split_is_by_trial_and_deterministic():
    records = [rec(k, T=3) for k in range(20)]
    tr, te = split_trials(records, 0.1, seed=1)
    assert len(te) == 2 and len(tr) == 18
    assert not {r.trial_id for r in tr} & {r.trial_id for r in te}
    assert [r.trial_id for r in split_trials(records, 0.1, seed=1)[1]] == [r.trial_id for r in te]
