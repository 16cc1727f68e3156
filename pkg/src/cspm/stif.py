"""SAR-conditioned feature gating over user and context embeddings.

Each feature j gets a scalar gate ``w_j = sigmoid(phi([s, z_j, e_j]))`` where
``phi`` is a shared two-layer perceptron and ``e_j`` a learned id embedding of
the feature slot. The output is ``concat_j(w_j * z_j)``.

The first layer is evaluated as ``s @ W_s + z_j @ W_z + e_j @ W_e + b``,
which is the same affine map as applying one matrix to the concatenation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class GateParams:
    w_s: Tensor       # (d_s, hidden)
    w_z: Tensor       # (d, hidden)
    feat_emb: Tensor  # (n_features, d_f)
    w_e: Tensor       # (d_f, hidden)
    b1: Tensor        # (hidden,)
    w2: Tensor        # (hidden, 1)
    b2: Tensor        # (1,)

    @property
    def n_features(self) -> int:
        return self.feat_emb.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_s": self.w_s, "w_z": self.w_z, "feat_emb": self.feat_emb, "w_e": self.w_e,
                "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_gate(d_s: int, d: int, n_features: int, rng: np.random.Generator, hidden: int = 32, d_f: int = 8,
              dtype=np.float64) -> GateParams:
    """Final layer starts at zero so every gate begins at exactly 0.5."""
    fan_in = d_s + d + d_f
    bound = math.sqrt(6.0 / (fan_in + hidden))

    def u(shape, name):
        return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True, name=name)

    return GateParams(
        w_s=u((d_s, hidden), "stif.w_s"),
        w_z=u((d, hidden), "stif.w_z"),
        feat_emb=Tensor(rng.uniform(-1 / math.sqrt(d_f), 1 / math.sqrt(d_f), (n_features, d_f)).astype(dtype),
                        requires_grad=True, name="stif.feat_emb"),
        w_e=u((d_f, hidden), "stif.w_e"),
        b1=Tensor(np.zeros(hidden, dtype), requires_grad=True, name="stif.b1"),
        w2=Tensor(np.zeros((hidden, 1), dtype), requires_grad=True, name="stif.w2"),
        b2=Tensor(np.zeros(1, dtype), requires_grad=True, name="stif.b2"),
    )


@dataclass
class GatedFeatures:
    o: Tensor
    gates: Tensor  # (..., n_features)


def gate_logits(sar: Tensor, features: list[Tensor], params: GateParams) -> list[Tensor]:
    if not features:
        raise DimensionError("stif needs at least one feature")
    if len(features) != params.n_features:
        raise DimensionError(f"{len(features)} features but gate was built for {params.n_features}")
    if sar.shape[-1] != params.w_s.shape[0]:
        raise DimensionError(f"SAR width {sar.shape[-1]} != gate input {params.w_s.shape[0]}")
    s_part = T.add(T.matmul(sar, params.w_s), params.b1)
    logits = []
    for j, z in enumerate(features):
        if z.shape[-1] != params.w_z.shape[0] or z.shape[:-1] != sar.shape[:-1]:
            raise DimensionError(f"feature {j} has shape {z.shape}, expected {sar.shape[:-1] + (params.w_z.shape[0],)}")
        e_part = T.matmul(T.take(params.feat_emb, [j]), params.w_e)  # (1, hidden)
        e_part = T.reshape(e_part, (params.w_e.shape[1],))
        h = T.relu(T.add(T.add(s_part, T.matmul(z, params.w_z)), e_part))
        logits.append(T.add(T.matmul(h, params.w2), params.b2))  # (..., 1)
    return logits


def stif_forward(sar: Tensor, features: list[Tensor], params: GateParams, paper_literal: bool = False) -> GatedFeatures:
    """Gate each feature by a SAR-conditioned scalar.

    With ``paper_literal`` the output is ``s * sum_j w_j`` (width d_s)
    instead of the gated feature concatenation.
    """
    gates = [T.sigmoid(g) for g in gate_logits(sar, features, params)]
    gate_mat = T.concat(gates, axis=-1)
    if paper_literal:
        return GatedFeatures(T.mul(sar, T.sum(gate_mat, axis=-1, keepdims=True)), gate_mat)
    o = T.concat([T.mul(w, z) for w, z in zip(gates, features)], axis=-1)
    return GatedFeatures(o, gate_mat)


def gate_table(gates: np.ndarray, names) -> list[tuple[str, float, float]]:
    """(feature_name, mean_gate, var_gate) rows sorted by mean gate, descending."""
    gates = np.asarray(gates)
    rows = [(name, float(gates[:, j].mean()), float(gates[:, j].var())) for j, name in enumerate(names)]
    return sorted(rows, key=lambda r: -r[1])


def gate_table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature_name", "mean_gate", "var_gate"])
    for name, m, v in rows:
        w.writerow([name, repr(m), repr(v)])
    return buf.getvalue()
