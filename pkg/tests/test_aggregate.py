import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.engine.aggregate import (AggregationError, BufferAggState, fedavg_aggregate,
                                     fedbuff_aggregate, staleness_weight)
from fedsim.model import ClientUpdate, ModelParams
from oracles import fedavg_loop


def up(delta, n=1, base=0, cid=0):
    return ClientUpdate(cid, np.asarray(delta, dtype=float), base, n)


W = ModelParams(np.array([1.0, -2.0, 0.5]), version=3)


def test_fedavg_single_update():
    d = np.array([0.1, 0.2, 0.3])
    out = fedavg_aggregate([up(d, base=3)], W)
    assert np.array_equal(out.weights, W.weights + d) and out.version == 4


def test_fedavg_weighted_mean():
    d1, d2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 2.0])
    out = fedavg_aggregate([up(d1, 1, 3), up(d2, 3, 3)], W)
    assert out.weights == pytest.approx(W.weights + (d1 + 3 * d2) / 4, rel=1e-15)


def test_fedavg_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        deltas = [rng.normal(size=3) for _ in range(5)]
        counts = [int(c) for c in rng.integers(1, 100, 5)]
        lr = float(rng.uniform(0.1, 2))
        out = fedavg_aggregate([up(d, n, 3) for d, n in zip(deltas, counts)], W, server_lr=lr)
        want = fedavg_loop(list(W.weights), [list(d) for d in deltas], counts, lr)
        np.testing.assert_allclose(out.weights, want, rtol=1e-12, atol=1e-14)


def test_fedavg_rejects_mixed_versions():
    with pytest.raises(AggregationError):
        fedavg_aggregate([up([0, 0, 0], base=3), up([0, 0, 0], base=2)], W)
    with pytest.raises(AggregationError):
        fedavg_aggregate([], W)


def test_fedbuff_single_fresh_update():
    st_ = BufferAggState(1, 5, server_version=3)
    d = np.array([0.5, 0.5, 0.5])
    assert st_.add(up(d, base=3))
    out = fedbuff_aggregate(st_, W, server_lr=0.7)
    assert out.weights == pytest.approx(W.weights + 0.7 * d, rel=1e-15)
    assert out.version == 4 and st_.server_version == 4 and st_.buffer == []


def test_fedbuff_staleness_weighting_by_hand():
    st_ = BufferAggState(2, 5, server_version=3)
    d1, d2 = np.array([1.0, 0, 0]), np.array([0, 3.0, 0])
    st_.add(up(d1, base=3))
    st_.add(up(d2, base=0))
    assert [u.staleness for u in st_.buffer] == [0, 3]
    out = fedbuff_aggregate(st_, W, server_lr=1.0)
    assert out.weights == pytest.approx(W.weights + (d1 + 0.5 * d2) / 1.5, rel=1e-15)


def test_fedbuff_not_full_is_noop_unless_partial():
    st_ = BufferAggState(3, 5, server_version=3)
    st_.add(up([1.0, 1.0, 1.0], base=3))
    assert fedbuff_aggregate(st_, W) is None
    assert len(st_.buffer) == 1
    out = fedbuff_aggregate(st_, W, partial=True)
    assert out.weights == pytest.approx(W.weights + 1.0)
    assert fedbuff_aggregate(BufferAggState(3, 5, 3), W, partial=True) is None


def test_fedbuff_rejects_too_stale():
    st_ = BufferAggState(2, 2, server_version=3)
    with pytest.raises(AggregationError):
        st_.add(up([0, 0, 0], base=0))


def test_fedbuff_version_mismatch():
    st_ = BufferAggState(1, 2, server_version=1)
    st_.add(up([0, 0, 0], base=1))
    with pytest.raises(AggregationError):
        fedbuff_aggregate(st_, W)


def test_staleness_weight():
    assert staleness_weight(0) == 1.0
    assert staleness_weight(3) == 0.5
    assert staleness_weight(3, exponent=0.0) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.floats(-10, 10)), min_size=1, max_size=8))
def test_fedbuff_is_convex_combination(items):
    st_ = BufferAggState(len(items), 4, server_version=3)
    for s, v in items:
        st_.add(up([v, v, v], base=3 - min(s, 3)))
    out = fedbuff_aggregate(st_, W)
    step = out.weights - W.weights
    vals = [v for _, v in items]
    assert min(vals) - 1e-9 <= step[0] <= max(vals) + 1e-9
