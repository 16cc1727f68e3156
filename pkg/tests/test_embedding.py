import numpy as np
import pytest

from cspm import tensor as T
from cspm.data import encode
from cspm.embedding import EmbeddingLookupError, EmbeddingTables, embed_batch, embed_sample, init_table, lookup, mean_pool
from cspm.trainer import AdagradDecay
from factory import VOCAB, make_sample


@pytest.fixture
def table(rng):
    return init_table("item_id", 9, 4, rng)


def test_padding_row_is_zero(table):
    np.testing.assert_array_equal(lookup(table, [0]).data, np.zeros((1, 4)))


def test_init_range(rng):
    t = init_table("x", 500, 16, rng)
    assert np.abs(t.weights.data).max() <= 1 / 4


def test_gather_scatter(table):
    T.sum(lookup(table, [3, 5, 3])).backward()
    expected = np.zeros((10, 4))
    expected[3] = 2.0
    expected[5] = 1.0
    np.testing.assert_array_equal(table.weights.grad, expected)


def test_single_visit_grad_is_one(table):
    T.sum(lookup(table, [2, 7])).backward()
    visited = np.zeros(10, bool)
    visited[[2, 7]] = True
    assert (table.weights.grad[visited] == 1).all() and (table.weights.grad[~visited] == 0).all()


def test_out_of_range_names_table_and_id(table):
    with pytest.raises(EmbeddingLookupError, match=r"item_id.*\b10\b"):
        lookup(table, [1, 10])
    with pytest.raises(EmbeddingLookupError):
        lookup(table, [-1])


def test_mean_pool_of_two_tokens(table):
    ids = np.array([[5, 7]])
    pooled = mean_pool(lookup(table, ids), ids)
    np.testing.assert_allclose(pooled.data[0], (table.weights.data[5] + table.weights.data[7]) / 2, rtol=1e-15)


def test_mean_pool_ignores_padding_and_single_token_is_identity(table):
    ids = np.array([[4, 0]])
    np.testing.assert_array_equal(mean_pool(lookup(table, ids), ids).data[0], table.weights.data[4])


def test_event_width_at_dim_32(rng):
    tables = EmbeddingTables.create(VOCAB, 32, rng)
    s = make_sample(seq=[(1, 2, 100), (3, 4, 200)])
    f = embed_sample(s, tables, max_seq_len=5, max_query_tokens=2)
    assert f.seq.shape == (1, 5, 128)
    assert f.item.shape == (1, 160)
    assert len(f.features) == 8


def test_all_padding_sequence_is_zero_matrix(rng):
    tables = EmbeddingTables.create(VOCAB, 8, rng)
    f = embed_sample(make_sample(), tables, 6, 2)
    np.testing.assert_array_equal(f.seq.data, 0.0)
    assert not f.seq_mask.any()


def test_shared_tables_between_candidate_and_events(rng):
    tables = EmbeddingTables.create(VOCAB, 4, rng)
    s = make_sample(item=6, seq=[(6, 3, 50)])
    f = embed_sample(s, tables, 3, 2)
    np.testing.assert_array_equal(f.item.data[0, :4], f.seq.data[0, 0, :4])


def test_padding_row_and_unvisited_rows_survive_optimizer(rng):
    tables = EmbeddingTables.create(VOCAB, 4, rng)
    w = tables["item_id"].weights
    before = w.data.copy()
    opt = AdagradDecay(lr0=0.5)
    batch = encode([make_sample(item=2, seq=[(3, 1, 10)]), make_sample(item=4)], 3, 2)
    for _ in range(5):
        w.zero_grad()
        f = embed_batch(batch, tables)
        T.sum(T.add(T.sum(f.item), T.sum(f.seq))).backward()
        # the padding row was gathered (padded sequence slots) and so has a gradient
        assert w.grad[0].any()
        opt.step({"emb.item_id": w})
    assert (w.data[0] == 0).all()
    unvisited = [i for i in range(w.shape[0]) if i not in (0, 2, 3, 4)]
    assert w.data[unvisited].tobytes() == before[unvisited].tobytes()
    assert not np.array_equal(w.data[2], before[2])
