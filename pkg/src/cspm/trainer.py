"""Mini-batch training with Adagrad and exponential learning-rate decay."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Arrays, Vocab
from .model import AblationSwitches, ModelConfig, ModelParams, batch_loss, init_params, predict

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_ctr", "l_cl", "l_total", "lr", "eval_auc")


class NumericalAbort(FloatingPointError):
    def __init__(self, param: str, msg: str = "non-finite gradient"):
        super().__init__(f"{msg} in parameter {param!r}")
        self.param = param


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 3
    seed: int = 0
    lr0: float = 0.05
    decay_rate: float = 0.95
    decay_steps: int = 1000
    eval_every: int = 200
    epsilon: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0 or self.decay_steps < 1 or not 0 < self.decay_rate <= 1:
            raise ValueError("need lr0 > 0, decay_steps >= 1, 0 < decay_rate <= 1")


class AdagradDecay:
    """Adagrad whose base rate decays as ``lr0 * decay_rate ** (t / decay_steps)``.

    ``t`` counts completed steps, so the first update uses ``lr0``. Embedding
    tables (names starting with ``emb.``) never update their padding row.
    """

    def __init__(self, lr0: float = 0.05, decay_rate: float = 0.95, decay_steps: int = 1000,
                 epsilon: float = 1e-8, state: dict[str, np.ndarray] | None = None, t: int = 0):
        self.lr0 = lr0
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.epsilon = epsilon
        self.accum: dict[str, np.ndarray] = dict(state or {})
        self.t = t

    def lr(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        return self.lr0 * self.decay_rate ** (t / self.decay_steps)

    def step(self, params: dict[str, T.Tensor]) -> float:
        lr = self.lr()
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericalAbort(name)
            if name.startswith("emb."):
                g = g.copy()
                g[0] = 0.0
            acc = self.accum.get(name)
            if acc is None:
                acc = np.zeros_like(p.data)
            acc = acc + g * g
            self.accum[name] = acc
            p.data = p.data - (lr * g / (np.sqrt(acc) + self.epsilon)).astype(p.dtype)
        self.t += 1
        return lr


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r["step"]] + [_fmt(r[c]) for c in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class TrainResult:
    params: ModelParams
    history: History
    optimizer: AdagradDecay


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation for one epoch, seeded from (seed, epoch) only."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(dataset: Arrays, vocab: Vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
          switches: AblationSwitches | None = None, eval_data: Arrays | None = None,
          params: ModelParams | None = None, optimizer: AdagradDecay | None = None,
          callback=None) -> TrainResult:
    """Train for ``train_cfg.epochs`` epochs.

    Passing ``params`` and ``optimizer`` resumes; the step counter continues
    from ``optimizer.t`` and the epoch index is derived from it.
    """
    train_cfg.validate()
    switches = switches or AblationSwitches()
    if len(dataset) < train_cfg.batch_size:
        raise ValueError(f"dataset of {len(dataset)} samples is smaller than one batch ({train_cfg.batch_size})")
    if params is None:
        params = init_params(model_cfg, vocab, train_cfg.seed, switches)
    if optimizer is None:
        optimizer = AdagradDecay(train_cfg.lr0, train_cfg.decay_rate, train_cfg.decay_steps, train_cfg.epsilon)
    named = params.named_tensors()
    history = History()
    n = len(dataset)
    steps_per_epoch = -(-n // train_cfg.batch_size)
    first_epoch = optimizer.t // steps_per_epoch
    skip = optimizer.t % steps_per_epoch
    for epoch in range(first_epoch, first_epoch + train_cfg.epochs):
        order = epoch_order(n, train_cfg.seed, epoch)
        for b in range(skip, steps_per_epoch):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            batch = dataset.subset(idx)
            step = optimizer.t
            mine_rng = np.random.default_rng([train_cfg.seed, epoch, step, 1])
            losses = batch_loss(batch, params, switches, model_cfg, vocab, mine_rng)
            params.zero_grad()
            losses.total.backward()
            lr = optimizer.step(named)
            row = {"step": step + 1, "l_ctr": losses.ctr, "l_cl": losses.cl,
                   "l_total": losses.total.item(), "lr": lr, "eval_auc": None}
            if eval_data is not None and (step + 1) % train_cfg.eval_every == 0:
                row["eval_auc"] = _eval_auc(eval_data, params, switches, model_cfg)
                logger.info("step %d  l_total %.4f  eval_auc %.4f", step + 1, row["l_total"], row["eval_auc"])
            history.rows.append(row)
            if callback is not None:
                callback(step + 1, params, optimizer)
        skip = 0
    if eval_data is not None and history.rows and history.rows[-1]["eval_auc"] is None:
        history.rows[-1]["eval_auc"] = _eval_auc(eval_data, params, switches, model_cfg)
    return TrainResult(params, history, optimizer)


def _eval_auc(data: Arrays, params, switches, cfg) -> float:
    from .evaluation import auc

    return auc(predict(data, params, switches, cfg), data.label)
