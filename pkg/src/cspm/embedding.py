"""Per-vocabulary embedding tables and the field front end.

Fields that draw ids from the same vocabulary share one table: the
candidate item and the behaviour events use the same item/category tables,
the search location and event cells the same cell table, and the search time
and event times the same time table. Row 0 of every table is padding: it is
zero at init and the optimizer never updates it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import CONTEXT_FEATURE_CARD, CONTEXT_FEATURES, USER_FEATURE_CARD, USER_FEATURES, Arrays, Sample, Vocab, encode
from .tensor import Tensor


class EmbeddingLookupError(IndexError):
    """Categorical id outside its table."""


@dataclass
class EmbeddingTable:
    name: str
    weights: Tensor

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def init_table(name: str, n_ids: int, dim: int, rng: np.random.Generator, dtype=np.float64) -> EmbeddingTable:
    """Table with ``n_ids + 1`` rows, uniform in +-1/sqrt(dim), padding row zero."""
    bound = 1.0 / math.sqrt(dim)
    w = rng.uniform(-bound, bound, size=(n_ids + 1, dim)).astype(dtype)
    w[0] = 0.0
    return EmbeddingTable(name, Tensor(w, requires_grad=True, name=f"emb.{name}"))


def lookup(table: EmbeddingTable, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    bad = (ids < 0) | (ids >= table.vocab_size)
    if bad.any():
        raise EmbeddingLookupError(f"embedding {table.name!r}: id {int(ids[bad][0])} outside 0..{table.vocab_size - 1}")
    return T.take(table.weights, ids)


def mean_pool(vectors: Tensor, ids) -> Tensor:
    """Mean over the non-padding tokens of ``vectors[B, Q, d]``."""
    ids = np.asarray(ids)
    count = np.maximum((ids > 0).sum(axis=-1, keepdims=True), 1).astype(vectors.dtype)
    return T.mul(T.sum(vectors, axis=-2), Tensor(1.0 / count))


GATED_FEATURES = ("user_id",) + USER_FEATURES + CONTEXT_FEATURES


@dataclass
class EmbeddingTables:
    tables: dict[str, EmbeddingTable]

    def __getitem__(self, key: str) -> EmbeddingTable:
        return self.tables[key]

    @property
    def dim(self) -> int:
        return next(iter(self.tables.values())).dim

    @classmethod
    def create(cls, vocab: Vocab, dim: int, rng: np.random.Generator, dtype=np.float64) -> "EmbeddingTables":
        sizes = {
            "user_id": vocab.n_users,
            "query": vocab.n_query_tokens,
            "cell": vocab.n_cells,
            "time": 48,
            "item_id": vocab.n_items,
            "category": vocab.n_categories,
            "shop_id": vocab.n_shops,
            "price_band": vocab.n_price_bands,
            "subsidy_flag": 2,
            **USER_FEATURE_CARD,
            **CONTEXT_FEATURE_CARD,
        }
        return cls({k: init_table(k, n, dim, rng, dtype) for k, n in sizes.items()})


@dataclass
class FieldEmbeddings:
    seq: Tensor             # E_S   (B, T, 4d)
    seq_mask: np.ndarray    # (B, T)
    item: Tensor            # E_I   (B, 5d)
    query: Tensor           # E_Q   (B, d)
    loc: Tensor             # E_L   (B, d)
    time: Tensor            # E_T   (B, d)
    features: list[Tensor]  # E_U then E_C, each (B, d), ordered as GATED_FEATURES


_ITEM_TABLES = ("item_id", "category", "shop_id", "price_band", "subsidy_flag")
_EVENT_TABLES = ("item_id", "category", "cell", "time")


def embed_batch(batch: Arrays, tables: EmbeddingTables) -> FieldEmbeddings:
    seq = T.concat([lookup(tables[t], batch.seq[..., k]) for k, t in enumerate(_EVENT_TABLES)], axis=-1)
    item = T.concat([lookup(tables[t], batch.item[:, k]) for k, t in enumerate(_ITEM_TABLES)], axis=-1)
    query = mean_pool(lookup(tables["query"], batch.query), batch.query)
    feats = [lookup(tables["user_id"], batch.user)]
    feats += [lookup(tables[f], batch.user_feats[:, k]) for k, f in enumerate(USER_FEATURES)]
    feats += [lookup(tables[f], batch.ctx[:, k]) for k, f in enumerate(CONTEXT_FEATURES)]
    return FieldEmbeddings(
        seq=seq,
        seq_mask=batch.seq_mask,
        item=item,
        query=query,
        loc=lookup(tables["cell"], batch.loc),
        time=lookup(tables["time"], batch.time),
        features=feats,
    )


def embed_sample(sample: Sample, tables: EmbeddingTables, max_seq_len: int, max_query_tokens: int) -> FieldEmbeddings:
    return embed_batch(encode([sample], max_seq_len, max_query_tokens), tables)
