"""Small hand-built samples for tests that need exact control over fields."""

import numpy as np

from cspm.data import BehaviorEvent, ItemFeatures, Sample, Vocab, time_bucket_of

VOCAB = Vocab(n_users=10, n_items=20, n_categories=4, n_cells=16, grid_size=4, n_query_tokens=12,
              n_shops=5, n_price_bands=3, max_query_tokens=2)


def make_sample(cell=1, ts=0, tokens=(1,), user=1, item=1, seq=(), label=0, promo=1) -> Sample:
    events = [BehaviorEvent(i, 1 + i % 4, c, time_bucket_of(t), t) for i, c, t in seq]
    return Sample(
        user_id=user,
        query_tokens=list(tokens),
        geohash_cell=cell,
        time_bucket=time_bucket_of(ts),
        timestamp=ts,
        behavior_seq=events,
        candidate_item=ItemFeatures(item, 1 + item % 4, 1, 1, 1),
        user_feats=[1, 1, 1],
        context_feats=[1, promo, 1, 1],
        label=label,
    )


def random_batch(rng: np.random.Generator, n: int) -> list[Sample]:
    """Batch drawn from a tiny space so that every predicate outcome occurs."""
    out = []
    for _ in range(n):
        n_tok = int(rng.integers(1, 3))
        out.append(make_sample(
            cell=int(rng.integers(1, VOCAB.n_cells + 1)),
            ts=int(rng.choice([0, 900, 1800, 1801, 3600, 7200])) + int(rng.integers(0, 3)),
            tokens=tuple(int(t) for t in rng.choice(np.arange(1, 6), n_tok, replace=False)),
        ))
    return out
