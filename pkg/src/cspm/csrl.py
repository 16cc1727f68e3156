"""Search-state encoder (cross network) and contrastive triplet objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Arrays, Sample, Vocab
from .tensor import DimensionError, Tensor


@dataclass
class CrossNetworkParams:
    weights: list[Tensor]  # each (d_s, d_s), applied as x @ W
    biases: list[Tensor]   # each (d_s,)

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]


def init_cross_network(d_s: int, layers: int, rng: np.random.Generator, dtype=np.float64,
                       init_scale: float = 1.0) -> CrossNetworkParams:
    """Uniform weights in +-init_scale/sqrt(d_s), zero biases.

    A small ``init_scale`` starts the network close to the identity map.
    """
    if layers < 1:
        raise ValueError("cross network needs at least one layer")
    bound = init_scale / math.sqrt(d_s)
    ws = [Tensor(rng.uniform(-bound, bound, (d_s, d_s)).astype(dtype), requires_grad=True, name=f"cross.W{i}")
          for i in range(layers)]
    bs = [Tensor(np.zeros(d_s, dtype), requires_grad=True, name=f"cross.b{i}") for i in range(layers)]
    return CrossNetworkParams(ws, bs)


def encode_sar(query_vec: Tensor, loc_vec: Tensor, time_vec: Tensor, params: CrossNetworkParams) -> Tensor:
    """x0 = [q, l, t];  x_{l+1} = x0 * (x_l W_l + b_l) + x_l;  returns x_L."""
    x0 = T.concat([query_vec, loc_vec, time_vec], axis=-1)
    if x0.shape[-1] != params.dim:
        raise DimensionError(f"search state width {x0.shape[-1]} != cross network width {params.dim}")
    x = x0
    for w, b in zip(params.weights, params.biases):
        x = T.add(T.mul(x0, T.add(T.matmul(x, w), b)), x)
    return x


# ---------------------------------------------------------------------------
# pair mining


@dataclass
class TripletConfig:
    margin: float = 0.3
    n_v: int = 4
    time_window: int = 1800
    geo_mode: str = "region"  # "cell" or "region"

    def validate(self) -> None:
        if not 0.0 <= self.margin <= 2.0:
            raise ValueError("margin must lie in [0, 2]")
        if self.n_v < 1:
            raise ValueError("n_v must be >= 1")
        if self.geo_mode not in ("cell", "region"):
            raise ValueError("geo_mode must be 'cell' or 'region'")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negatives: tuple[int, ...]


@dataclass
class MinedPairs:
    triplets: list[Triplet]
    skipped: int

    def __len__(self) -> int:
        return len(self.triplets)


def _search_states(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cells, timestamps, token multi-hot) for a list of samples or an Arrays batch."""
    if isinstance(batch, Arrays):
        cells, ts, q = batch.loc, batch.timestamp, batch.query
        n_tok = int(q.max()) + 1 if q.size else 1
        hot = np.zeros((len(cells), n_tok), bool)
        rows = np.repeat(np.arange(len(cells)), q.shape[1])
        hot[rows, q.reshape(-1)] = True
        hot[:, 0] = False
        return cells, ts, hot
    samples: list[Sample] = list(batch)
    cells = np.array([s.geohash_cell for s in samples], np.int64)
    ts = np.array([s.timestamp for s in samples], np.int64)
    n_tok = max((max(s.query_tokens) for s in samples), default=0) + 1
    hot = np.zeros((len(samples), n_tok), bool)
    for i, s in enumerate(samples):
        hot[i, s.query_tokens] = True
    hot[:, 0] = False
    return cells, ts, hot


def positive_matrix(batch, vocab: Vocab, cfg: TripletConfig) -> np.ndarray:
    """``P[i, j]`` is True when j is an eligible positive for anchor i (i != j)."""
    cells, ts, hot = _search_states(batch)
    if cfg.geo_mode == "cell":
        geo = cells[:, None] == cells[None, :]
    else:
        reg = vocab.region_of(cells)
        geo = reg[:, None] == reg[None, :]
    near = np.abs(ts[:, None] - ts[None, :]) <= cfg.time_window
    h = hot.astype(np.int64)
    shared = (h @ h.T) > 0
    pos = geo & near & shared
    np.fill_diagonal(pos, False)
    return pos


def mine_pairs(batch, vocab: Vocab, cfg: TripletConfig, rng: np.random.Generator) -> MinedPairs:
    """One random positive and ``n_v`` random negatives (with replacement) per anchor.

    Anchors lacking either an eligible positive or any eligible negative are
    skipped and counted.
    """
    n = len(batch)
    if n < 3:
        return MinedPairs([], n)
    pos = positive_matrix(batch, vocab, cfg)
    neg = ~pos
    np.fill_diagonal(neg, False)
    triplets, skipped = [], 0
    for i in range(n):
        p_idx = np.flatnonzero(pos[i])
        n_idx = np.flatnonzero(neg[i])
        if len(p_idx) == 0 or len(n_idx) == 0:
            skipped += 1
            continue
        p = int(rng.choice(p_idx))
        negs = tuple(int(x) for x in rng.choice(n_idx, size=cfg.n_v, replace=True))
        triplets.append(Triplet(i, p, negs))
    return MinedPairs(triplets, skipped)


# ---------------------------------------------------------------------------
# loss


def triplet_loss(anchors: Tensor, positives: Tensor, negatives: Tensor, cfg: TripletConfig,
                 paper_literal: bool = False) -> Tensor:
    """Mean over anchors and negatives of ``max(cos(n, a) - cos(p, a) + m, 0)``.

    ``anchors`` and ``positives`` are (A, d), ``negatives`` is (A, n_v, d).
    With ``paper_literal`` the hinge is ``max(cos(p, a) - cos(n, a) + m, 0)``
    and the result is negated.
    """
    if anchors.shape[0] == 0:
        return Tensor(np.zeros((), anchors.dtype))
    a, nv, d = negatives.shape
    if anchors.shape != (a, d) or positives.shape != (a, d):
        raise DimensionError(f"triplet_loss: anchors {anchors.shape}, positives {positives.shape}, negatives {negatives.shape}")
    rep = np.repeat(np.arange(a), nv)
    a_rep = T.take(anchors, rep)
    cos_pos = T.take(T.cosine_similarity(positives, anchors), rep)
    cos_neg = T.cosine_similarity(T.reshape(negatives, (a * nv, d)), a_rep)
    margin = Tensor(np.asarray(cfg.margin, anchors.dtype))
    if paper_literal:
        return T.neg(T.mean(T.relu(T.add(T.sub(cos_pos, cos_neg), margin))))
    return T.mean(T.relu(T.add(T.sub(cos_neg, cos_pos), margin)))


def contrastive_loss(sar: Tensor, mined: MinedPairs, cfg: TripletConfig, paper_literal: bool = False) -> Tensor:
    """Triplet loss over mined in-batch triplets of a (B, d_s) SAR matrix."""
    if not mined.triplets:
        return Tensor(np.zeros((), sar.dtype))
    anchors = np.array([t.anchor for t in mined.triplets])
    positives = np.array([t.positive for t in mined.triplets])
    negatives = np.array([t.negatives for t in mined.triplets])
    d = sar.shape[-1]
    neg = T.reshape(T.take(sar, negatives.reshape(-1)), (len(anchors), negatives.shape[1], d))
    return triplet_loss(T.take(sar, anchors), T.take(sar, positives), neg, cfg, paper_literal)


def separation(sar: np.ndarray, mined: MinedPairs) -> float:
    """mean cos(anchor, positive) - mean cos(anchor, negative) over mined triplets."""
    if not mined.triplets:
        return float("nan")
    unit = sar / np.linalg.norm(sar, axis=1, keepdims=True)
    a = np.array([t.anchor for t in mined.triplets])
    p = np.array([t.positive for t in mined.triplets])
    n = np.array([t.negatives for t in mined.triplets])
    cp = (unit[a] * unit[p]).sum(-1)
    cn = (unit[a][:, None, :] * unit[n]).sum(-1)
    return float(cp.mean() - cn.mean())
