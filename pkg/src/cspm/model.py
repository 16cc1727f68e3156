"""Full model: embeddings -> SAR -> sequence attention -> feature gate -> head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .csrl import CrossNetworkParams, TripletConfig, contrastive_loss, encode_sar, init_cross_network
from .data import Arrays, Sample, Vocab, encode
from .embedding import GATED_FEATURES, EmbeddingTables, FieldEmbeddings, embed_batch
from .stif import GateParams, gate_table, init_gate, stif_forward
from .stpe import AttentionParams, init_attention, stpe_forward
from .tensor import Tensor

CHECKPOINT_FORMAT = "cspm-checkpoint/1"
N_ITEM_ATTRS = 5
N_EVENT_ATTRS = 4


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 16
    max_seq_len: int = 20
    csrl_layers: int = 2
    cross_init_scale: float = 0.0
    margin: float = 0.3
    n_v: int = 4
    geo_mode: str = "region"
    paper_literal_loss: bool = False
    heads: int = 2
    d_k: int = 16
    stif_hidden: int = 32
    stif_feature_dim: int = 8
    stif_paper_literal: bool = False
    head_widths: tuple[int, ...] = (128, 64)
    alpha: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        self.head_widths = tuple(self.head_widths)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def d_s(self) -> int:
        return 3 * self.dim

    @property
    def d_item(self) -> int:
        return N_ITEM_ATTRS * self.dim

    @property
    def d_seq(self) -> int:
        return N_EVENT_ATTRS * self.dim

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(margin=self.margin, n_v=self.n_v, geo_mode=self.geo_mode)

    def validate(self) -> None:
        check_alpha(self.alpha)
        self.triplet.validate()
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        for name in ("dim", "max_seq_len", "csrl_layers", "heads", "d_k", "stif_hidden", "stif_feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class AblationSwitches:
    use_csrl_loss: bool = True
    use_cross_network: bool = True
    use_stpe: bool = True
    use_stif: bool = True
    stpe_query_sar: bool = True


ABLATION_GRID: dict[str, AblationSwitches] = {
    "full": AblationSwitches(),
    "w/o_CSRL(L_CL)": AblationSwitches(use_csrl_loss=False),
    "w/o_CSRL(DCN-v2)": AblationSwitches(use_cross_network=False),
    "w/o_CSRL": AblationSwitches(use_csrl_loss=False, use_cross_network=False),
    "w/o_StPE": AblationSwitches(use_stpe=False),
    "w/o_StIF": AblationSwitches(use_stif=False),
    "w/o_StPE+StIF": AblationSwitches(use_stpe=False, use_stif=False),
    "w/o_CSRL+StPE+StIF": AblationSwitches(False, False, False, False),
}

# reference points outside the ablation table
BASELINES: dict[str, AblationSwitches] = {
    "mlp": AblationSwitches(False, False, False, False),
    "din": AblationSwitches(use_csrl_loss=False, use_cross_network=False, use_stif=False, stpe_query_sar=False),
}


def switches_by_name(name: str) -> AblationSwitches:
    table = {**ABLATION_GRID, **BASELINES}
    key = name.replace(" ", "_")
    if key not in table:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(table)}")
    return table[key]


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


@dataclass
class ModelParams:
    embeddings: EmbeddingTables
    cross: CrossNetworkParams
    attention: AttentionParams
    gate: GateParams
    head: list[tuple[Tensor, Tensor]]

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, table in self.embeddings.tables.items():
            out[f"emb.{name}"] = table.weights
        for i, (w, b) in enumerate(zip(self.cross.weights, self.cross.biases)):
            out[f"cross.W{i}"] = w
            out[f"cross.b{i}"] = b
        for h in range(self.attention.heads):
            out[f"stpe.Wq{h}"] = self.attention.wq[h]
            out[f"stpe.Wk{h}"] = self.attention.wk[h]
            out[f"stpe.Wv{h}"] = self.attention.wv[h]
        for k, v in self.gate.tensors().items():
            out[f"stif.{k}"] = v
        for i, (w, b) in enumerate(self.head):
            out[f"head.W{i}"] = w
            out[f"head.b{i}"] = b
        return out

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}


def head_input_width(cfg: ModelConfig, switches: AblationSwitches | None = None) -> int:
    paper_literal = cfg.stif_paper_literal and (switches is None or switches.use_stif)
    o_width = cfg.d_s if paper_literal else len(GATED_FEATURES) * cfg.dim
    return cfg.heads * cfg.d_k + o_width + cfg.d_item + cfg.d_s


def init_params(cfg: ModelConfig, vocab: Vocab, seed: int, switches: AblationSwitches | None = None) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    tables = EmbeddingTables.create(vocab, cfg.dim, rng, dt)
    cross = init_cross_network(cfg.d_s, cfg.csrl_layers, rng, dt, cfg.cross_init_scale)
    attn = init_attention(cfg.d_item + cfg.d_s, cfg.d_seq, cfg.heads, cfg.d_k, rng, dt)
    gate = init_gate(cfg.d_s, cfg.dim, len(GATED_FEATURES), rng, cfg.stif_hidden, cfg.stif_feature_dim, dt)
    widths = [head_input_width(cfg, switches), *cfg.head_widths, 1]
    head = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dt), requires_grad=True, name=f"head.W{i}")
        head.append((w, Tensor(np.zeros(fan_out, dt), requires_grad=True, name=f"head.b{i}")))
    return ModelParams(tables, cross, attn, gate, head)


@dataclass
class ForwardOutput:
    logits: Tensor          # (B,)
    sar: Tensor             # (B, d_s): cross-network output, or raw search state if that is off
    gates: Tensor | None    # (B, n_features) when the gate ran
    fields: FieldEmbeddings = field(repr=False)

    @property
    def prob(self) -> np.ndarray:
        return T._stable_sigmoid(self.logits.data)


def forward_batch(batch: Arrays, params: ModelParams, switches: AblationSwitches, cfg: ModelConfig) -> ForwardOutput:
    f = embed_batch(batch, params.embeddings)
    if switches.use_cross_network:
        sar = encode_sar(f.query, f.loc, f.time, params.cross)
    else:
        sar = T.concat([f.query, f.loc, f.time], axis=-1)
    n = len(batch)
    if switches.use_stpe:
        # the item-only baseline keeps W^Q's shape and feeds a zero SAR
        q_sar = sar if switches.stpe_query_sar else Tensor(np.zeros(sar.shape, sar.dtype))
        u = stpe_forward(f.item, q_sar, f.seq, f.seq_mask, params.attention)
    else:
        u = Tensor(np.zeros((n, cfg.heads * cfg.d_k), cfg.np_dtype))
    gates = None
    if switches.use_stif:
        gated = stif_forward(sar, f.features, params.gate, paper_literal=cfg.stif_paper_literal)
        o, gates = gated.o, gated.gates
    else:
        o = T.concat(f.features, axis=-1)
    x = T.concat([u, o, f.item, sar], axis=-1)
    for i, (w, b) in enumerate(params.head):
        x = T.add(T.matmul(x, w), b)
        if i < len(params.head) - 1:
            x = T.relu(x)
    return ForwardOutput(T.reshape(x, (n,)), sar, gates, f)


def forward(sample: Sample, params: ModelParams, switches: AblationSwitches, cfg: ModelConfig) -> tuple[float, np.ndarray]:
    """Click probability and SAR of one sample."""
    batch = encode([sample], cfg.max_seq_len, max(1, len(sample.query_tokens)))
    with T.no_grad():
        out = forward_batch(batch, params, switches, cfg)
    return float(out.prob[0]), out.sar.data[0].copy()


def ctr_loss(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy, evaluated from logits so it stays finite."""
    return T.bce_with_logits(logits, labels)


def total_loss(l_ctr, l_cl, alpha: float):
    """alpha * l_ctr + (1 - alpha) * l_cl for floats or tensors."""
    check_alpha(alpha)
    if isinstance(l_ctr, Tensor) or isinstance(l_cl, Tensor):
        like = l_ctr if isinstance(l_ctr, Tensor) else l_cl
        a = Tensor(np.asarray(alpha, like.dtype))
        b = Tensor(np.asarray(1.0 - alpha, like.dtype))
        return T.add(T.mul(a, T._lift(l_ctr, like)), T.mul(b, T._lift(l_cl, like)))
    return alpha * l_ctr + (1.0 - alpha) * l_cl


@dataclass
class BatchLosses:
    total: Tensor
    ctr: float
    cl: float
    n_triplets: int


def batch_loss(batch: Arrays, params: ModelParams, switches: AblationSwitches, cfg: ModelConfig,
               vocab: Vocab, rng: np.random.Generator) -> BatchLosses:
    from .csrl import mine_pairs

    out = forward_batch(batch, params, switches, cfg)
    l_ctr = ctr_loss(out.logits, batch.label)
    if not switches.use_csrl_loss:
        return BatchLosses(l_ctr, l_ctr.item(), 0.0, 0)
    mined = mine_pairs(batch, vocab, cfg.triplet, rng)
    l_cl = contrastive_loss(out.sar, mined, cfg.triplet, paper_literal=cfg.paper_literal_loss)
    total = total_loss(l_ctr, l_cl, cfg.alpha)
    return BatchLosses(total, l_ctr.item(), l_cl.item(), len(mined))


def predict(arrays: Arrays, params: ModelParams, switches: AblationSwitches, cfg: ModelConfig,
            batch_size: int = 4096) -> np.ndarray:
    """Click probabilities for every row, without recording a graph."""
    out = np.empty(len(arrays))
    with T.no_grad():
        for lo in range(0, len(arrays), batch_size):
            sl = slice(lo, lo + batch_size)
            out[sl] = forward_batch(arrays.subset(sl), params, switches, cfg).prob
    return out


def gate_report(arrays: Arrays, params: ModelParams, cfg: ModelConfig, switches: AblationSwitches | None = None,
                batch_size: int = 4096) -> list[tuple[str, float, float]]:
    """Per-feature mean and variance of the gate over a dataset, sorted by mean."""
    switches = switches or AblationSwitches()
    if not switches.use_stif:
        raise ValueError("gate report needs the gate to be switched on")
    chunks = []
    with T.no_grad():
        for lo in range(0, len(arrays), batch_size):
            out = forward_batch(arrays.subset(slice(lo, lo + batch_size)), params, switches, cfg)
            chunks.append(out.gates.data)
    return gate_table(np.concatenate(chunks), GATED_FEATURES)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, vocab: Vocab, switches: AblationSwitches,
                    step: int = 0, optimizer_state: dict[str, np.ndarray] | None = None, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(cfg),
        "vocab": asdict(vocab),
        "switches": asdict(switches),
        "step": step,
        "shapes": {k: list(v.shape) for k, v in params.named_tensors().items()},
        **(extra or {}),
    }
    arrays = {f"param/{k}": v.data for k, v in params.named_tensors().items()}
    for k, v in (optimizer_state or {}).items():
        arrays[f"adagrad/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: Vocab
    switches: AblationSwitches
    step: int
    optimizer_state: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path, cfg: ModelConfig | None = None, vocab: Vocab | None = None) -> Checkpoint:
    """Load and shape-check a checkpoint.

    When ``cfg``/``vocab`` are given the tensors must match the shapes they
    imply; otherwise the stored config is used.
    """
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        stored = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        opt = {k[len("adagrad/"):]: z[k] for k in z.files if k.startswith("adagrad/")}
    cfg = cfg or ModelConfig(**meta["model_config"])
    vocab = vocab or Vocab(**meta["vocab"])
    switches = AblationSwitches(**meta["switches"])
    params = init_params(cfg, vocab, seed=0, switches=switches)
    named = params.named_tensors()
    for name, t in named.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tuple(stored[name].shape) != t.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(stored[name].shape)} != expected {t.shape}")
        t.data = stored[name].astype(t.dtype)
    extra = sorted(set(stored) - set(named))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    return Checkpoint(params, cfg, vocab, switches, int(meta.get("step", 0)), opt, meta)
