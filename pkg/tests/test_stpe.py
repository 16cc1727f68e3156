import math

import numpy as np
import pytest

from cspm import gradcheck
from cspm import tensor as T
from cspm.stpe import attention_weights, init_attention, stpe_forward
from cspm.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def dense_reference(item, sar, seq, mask, params):
    """Loop-level recomputation: per head, per position, no vectorised masking."""
    query = np.concatenate([item, sar])
    outs, weights = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q = query @ wq.data
        scores = [float(q @ (seq[t] @ wk.data)) / math.sqrt(len(q)) for t in range(len(seq))]
        live = [t for t in range(len(seq)) if mask[t]]
        top = max(scores[t] for t in live)
        z = sum(math.exp(scores[t] - top) for t in live)
        w = [math.exp(scores[t] - top) / z if mask[t] else 0.0 for t in range(len(seq))]
        outs.append(sum(w[t] * (seq[t] @ wv.data) for t in range(len(seq))))
        weights.append(w)
    return np.concatenate(outs), np.array(weights)


@pytest.fixture
def small(rng):
    params = init_attention(d_query=5, d_seq=4, heads=2, d_k=3, rng=rng)
    return params, rng.normal(size=3), rng.normal(size=2)


def test_single_event_gets_all_weight(small, rng):
    params, item, sar = small
    seq = rng.normal(size=(1, 4))
    w = attention_weights(t64(item), t64(sar), t64(seq), [True], params)
    np.testing.assert_array_equal(w, [[1.0], [1.0]])
    out = stpe_forward(t64(item), t64(sar), t64(seq), [True], params).data
    np.testing.assert_allclose(out, np.concatenate([seq[0] @ v.data for v in params.wv]), rtol=1e-14)


def test_duplicate_events_split_evenly(small, rng):
    params, item, sar = small
    e = rng.normal(size=4)
    seq = np.stack([e, e, rng.normal(size=4), rng.normal(size=4)])
    w = attention_weights(t64(item), t64(sar), t64(seq), [True, True, False, False], params)
    np.testing.assert_allclose(w, [[0.5, 0.5, 0, 0]] * 2, rtol=1e-15)


def test_matches_dense_reference(small, rng):
    params, item, sar = small
    for _ in range(10):
        seq = rng.normal(size=(3, 4))
        mask = [True, bool(rng.integers(2)), True]
        ref_out, ref_w = dense_reference(item, sar, seq, mask, params)
        out = stpe_forward(t64(item), t64(sar), t64(seq), mask, params).data
        w = attention_weights(t64(item), t64(sar), t64(seq), mask, params)
        np.testing.assert_allclose(out, ref_out, atol=1e-12, rtol=0)
        np.testing.assert_allclose(w, ref_w, atol=1e-12, rtol=0)


def test_weights_sum_to_one_and_all_masked_is_zero(small, rng):
    params, item, sar = small
    seq = rng.normal(size=(2, 5, 4))
    mask = np.array([[True, False, True, True, False], [False] * 5])
    item_b, sar_b = np.stack([item, item]), np.stack([sar, sar])
    w = attention_weights(t64(item_b), t64(sar_b), t64(seq), mask, params)
    assert w.shape == (2, 2, 5)
    np.testing.assert_allclose(w[0].sum(-1), 1.0, rtol=1e-14)
    np.testing.assert_array_equal(w[1], 0.0)
    np.testing.assert_array_equal(stpe_forward(t64(item_b), t64(sar_b), t64(seq), mask, params).data[1], 0.0)


def test_masked_rows_get_no_gradient(small, rng):
    params, item, sar = small
    seq = t64(rng.normal(size=(4, 4)), True)
    T.sum(stpe_forward(t64(item), t64(sar), seq, [True, False, True, False], params)).backward()
    np.testing.assert_array_equal(seq.grad[[1, 3]], 0.0)
    assert seq.grad[[0, 2]].any()


def test_permutation_invariance(small, rng):
    params, item, sar = small
    seq = rng.normal(size=(4, 4))
    mask = [True, True, True, False]
    perm = [2, 0, 1, 3]
    base = stpe_forward(t64(item), t64(sar), t64(seq), mask, params).data
    moved = stpe_forward(t64(item), t64(sar), t64(seq[perm]), mask, params).data
    np.testing.assert_allclose(moved, base, atol=1e-14)
    w = attention_weights(t64(item), t64(sar), t64(seq), mask, params)
    wp = attention_weights(t64(item), t64(sar), t64(seq[perm]), mask, params)
    np.testing.assert_allclose(wp, w[:, perm], atol=1e-15)


def test_gradient_t4_h2_dk3(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        params = init_attention(5, 4, 2, 3, r)
        item, sar, seq = t64(r.normal(size=(2, 3)), True), t64(r.normal(size=(2, 2)), True), t64(r.normal(size=(2, 4, 4)), True)
        mask = np.array([[True, True, False, True], [True, True, True, True]])
        w = r.normal(size=(2, 6))
        f = lambda: T.sum(T.mul(stpe_forward(item, sar, seq, mask, params), Tensor(w)))
        assert gradcheck.check(f, [item, sar, seq, *params.wq, *params.wk, *params.wv]) < 1e-4


def test_query_width_mismatch(small, rng):
    params, item, _ = small
    with pytest.raises(T.DimensionError):
        stpe_forward(t64(item), t64(np.ones(3)), t64(np.ones((2, 4))), [True, True], params)
