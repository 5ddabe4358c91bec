"""Ring-buffer semantics and sampling uniformity."""

import numpy as np
import pytest
from scipy import stats

from deskrl.autodiff import ContractError
from deskrl.replay import ReplayBuffer


def _buf(capacity, rng_seed=0, state_dim=1, action_dim=1):
    return ReplayBuffer(capacity, state_dim, action_dim, np.random.default_rng(rng_seed))


def _add(buf, value, done=False):
    buf.add([value], [0.0], float(value), [value + 0.5], done)


def test_fifo_eviction_keeps_newest():
    buf = _buf(5)
    for v in range(8):
        _add(buf, float(v))
    assert buf.count == 8
    assert len(buf) == 5
    assert sorted(buf.s[:, 0]) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_sampling_only_among_inserted():
    buf = _buf(10)
    for v in (1.0, 2.0, 3.0):
        _add(buf, v)
    batch = buf.sample(100)
    assert set(batch.s[:, 0]) <= {1.0, 2.0, 3.0}
    assert batch.s.shape == (100, 1)


def test_sample_uniformity_chi_squared():
    buf = _buf(1000, rng_seed=7)
    for v in range(1000):
        _add(buf, float(v))
    idx = buf.sample(100_000).s[:, 0].astype(int)
    counts = np.bincount(idx, minlength=1000)
    result = stats.chisquare(counts)
    assert result.pvalue > 0.01


def test_add_validation():
    buf = _buf(4)
    with pytest.raises(ContractError):
        buf.add([0.0], [1.2], 0.0, [0.0], False)
    with pytest.raises(ContractError):
        buf.add([0.0], [0.5], float("nan"), [0.0], False)


def test_sample_empty_buffer_rejected():
    with pytest.raises(ContractError):
        _buf(4).sample(1)


def test_sampling_deterministic_under_seed():
    a, b = _buf(50, rng_seed=3), _buf(50, rng_seed=3)
    for v in range(50):
        _add(a, float(v))
        _add(b, float(v))
    assert np.array_equal(a.sample(32).s, b.sample(32).s)


def test_done_stored_as_mask():
    buf = _buf(4)
    _add(buf, 1.0, done=True)
    _add(buf, 2.0, done=False)
    assert buf.done[0] == 1.0
    assert buf.done[1] == 0.0
