import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import make_transition
from mibrl.core import MultimodalObservation, ReplayBuffer, Transition
from mibrl.harness.config import RunConfig


def test_single_entry_is_returned():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10)
    t = make_transition(rng, tag=7.0)
    buf.push(t)
    assert len(buf) == 1
    batch = buf.sample(4, np.random.default_rng(1))
    assert len(batch) == 4
    for k in range(4):
        np.testing.assert_array_equal(batch.image[k], t.obs.image)
        np.testing.assert_array_equal(batch.next_proprio[k], t.next_obs.proprio)
    assert np.all(batch.reward == 7.0)
    assert batch.image.dtype == np.uint8


def test_ring_overwrites_oldest():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(2)
    for tag in (1.0, 2.0, 3.0):
        buf.push(make_transition(rng, tag=tag))
    assert len(buf) == 2
    assert {buf.transition(i).reward for i in range(2)} == {2.0, 3.0}
    assert buf.cursor == 1


def test_default_capacity_and_batch_sizes():
    assert ReplayBuffer().capacity == 100_000
    assert RunConfig().replay_capacity == 100_000
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(8)
    buf.push(make_transition(rng))
    for b in (128, 512):
        assert len(buf.sample(b, rng)) == b


def test_empty_buffer_errors():
    with pytest.raises(ValueError):
        ReplayBuffer(4).sample(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_rejects_bad_transitions():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(4)
    buf.push(make_transition(rng))
    bad = make_transition(rng)
    bad.obs.proprio[0] = np.nan
    with pytest.raises(ValueError):
        buf.push(bad)
    with pytest.raises(ValueError):
        buf.push(make_transition(rng, size=10))
    mismatched = make_transition(rng)
    mismatched.next_obs = MultimodalObservation(mismatched.next_obs.image, np.zeros(5, np.float32))
    with pytest.raises(ValueError):
        buf.push(mismatched)
    out_of_range = make_transition(rng)
    out_of_range.action = np.array([1.5, 0.0], np.float32)
    with pytest.raises(ValueError):
        buf.push(out_of_range)
    inf_reward = make_transition(rng, tag=float("inf"))
    with pytest.raises(ValueError):
        buf.push(inf_reward)
    assert len(buf) == 1


def test_sampling_is_uniform_chi_square():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10)
    for tag in range(10):
        buf.push(make_transition(rng, tag=float(tag)))
    draws = 100_000
    idx = buf.sample_indices(draws, np.random.default_rng(123))
    counts = np.bincount(idx, minlength=10)
    expected = draws / 10
    # per-entry frequency within 4 binomial sigmas
    sigma = np.sqrt(draws * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) < 4 * sigma)
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, df=9) > 1e-4


def test_identical_rng_identical_samples():
    rng = np.random.default_rng(0)
    transitions = [make_transition(rng, tag=float(k)) for k in range(6)]
    a, b = ReplayBuffer(4), ReplayBuffer(4)
    for t in transitions:
        a.push(t)
        b.push(t)
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(5):
        sa, sb = a.sample(3, ra), b.sample(3, rb)
        np.testing.assert_array_equal(sa.image, sb.image)
        np.testing.assert_array_equal(sa.reward, sb.reward)


@settings(max_examples=40, deadline=None)
@given(capacity=st.integers(1, 8), pushes=st.integers(0, 20))
def test_contents_are_last_capacity_pushes(capacity, pushes):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(capacity)
    for k in range(pushes):
        buf.push(make_transition(rng, size=2, tag=float(k)))
    kept = list(range(max(0, pushes - capacity), pushes))
    assert len(buf) == len(kept)
    assert [buf.transition(i).reward for i in range(len(buf))] == [float(k) for k in kept]


def test_observation_validation():
    obs = MultimodalObservation(np.zeros((9, 4, 4), np.uint8), np.zeros(3, np.float32))
    obs.validate(frame_stack=3, proprio_dim=3)
    with pytest.raises(ValueError):
        obs.validate(frame_stack=2)
    with pytest.raises(ValueError):
        obs.validate(proprio_dim=4)
    with pytest.raises(ValueError):
        MultimodalObservation(np.zeros((8, 4, 4), np.uint8), np.zeros(3)).validate()


def test_transition_dataclass_roundtrip():
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(3)
    t = make_transition(rng, tag=1.5)
    t = Transition(t.obs, t.action, t.reward, t.next_obs, True)
    buf.push(t)
    back = buf.transition(0)
    assert back.done is True
    np.testing.assert_array_equal(back.action, t.action)
