"""Multi-head attention over the behaviour sequence.

The query of head h is ``[item_vec, sar] @ W_h^Q``; keys and values are
linear maps of the event vectors. Scores are scaled by ``1/sqrt(d_k)``,
padded positions get zero weight, and a user with no real events yields a
zero preference vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class AttentionParams:
    wq: list[Tensor]  # (d_item + d_s, d_k) per head
    wk: list[Tensor]  # (d_seq, d_k)
    wv: list[Tensor]  # (d_seq, d_k)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]


def init_attention(d_query: int, d_seq: int, heads: int, d_k: int, rng: np.random.Generator,
                   dtype=np.float64) -> AttentionParams:
    if heads < 1 or d_k < 1:
        raise ValueError("heads and d_k must be >= 1")

    def mat(rows, name):
        bound = math.sqrt(6.0 / (rows + d_k))
        return Tensor(rng.uniform(-bound, bound, (rows, d_k)).astype(dtype), requires_grad=True, name=name)

    return AttentionParams(
        wq=[mat(d_query, f"stpe.Wq{h}") for h in range(heads)],
        wk=[mat(d_seq, f"stpe.Wk{h}") for h in range(heads)],
        wv=[mat(d_seq, f"stpe.Wv{h}") for h in range(heads)],
    )


def _attend(item_vec: Tensor, sar: Tensor | None, seq: Tensor, mask, params: AttentionParams):
    query_in = item_vec if sar is None else T.concat([item_vec, sar], axis=-1)
    if query_in.shape[-1] != params.wq[0].shape[0]:
        raise DimensionError(f"attention query width {query_in.shape[-1]} != {params.wq[0].shape[0]}")
    if seq.shape[-1] != params.wk[0].shape[0]:
        raise DimensionError(f"sequence width {seq.shape[-1]} != {params.wk[0].shape[0]}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != seq.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match sequence {seq.shape[:-1]}")
    scale = Tensor(np.asarray(1.0 / math.sqrt(params.d_k), dtype=seq.dtype))
    lead = query_in.shape[:-1]
    outs, weights = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q = T.reshape(T.matmul(query_in, wq), lead + (1, params.d_k))
        k = T.matmul(seq, wk)
        v = T.matmul(seq, wv)
        scores = T.mul(T.sum(T.mul(k, q), axis=-1), scale)
        w = T.softmax(scores, axis=-1, mask=mask)
        outs.append(T.sum(T.mul(T.reshape(w, w.shape + (1,)), v), axis=-2))
        weights.append(w)
    return outs, weights


def stpe_forward(item_vec: Tensor, sar: Tensor | None, seq: Tensor, mask, params: AttentionParams) -> Tensor:
    """Preference vector ``[u_1, ..., u_H]`` of width ``H * d_k``.

    Works on a single sample (item_vec (d_i,), seq (T, d_seq)) or a batch
    with a leading dimension. ``sar=None`` drops the SAR from the query,
    giving a plain target-attention baseline.
    """
    outs, _ = _attend(item_vec, sar, seq, mask, params)
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)


def attention_weights(item_vec: Tensor, sar: Tensor | None, seq: Tensor, mask, params: AttentionParams) -> np.ndarray:
    """Post-softmax weights, shape (H, T) or (B, H, T); padded positions are 0."""
    _, weights = _attend(item_vec, sar, seq, mask, params)
    return np.stack([w.data for w in weights], axis=-2)
