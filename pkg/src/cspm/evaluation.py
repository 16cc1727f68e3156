"""AUC, evaluation results and the ablation grid runner."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Arrays, Vocab
from .model import ABLATION_GRID, AblationSwitches, ModelConfig, ModelParams, predict
from .trainer import TrainConfig, train

RESULT_COLUMNS = ("config", "seed", "auc", "logloss", "wall_seconds")


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def logloss(probs, labels, eps: float = 1e-15) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class EvalResult:
    auc: float
    n_pos: int
    n_neg: int
    logloss: float

    def to_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "n_pos": self.n_pos, "n_neg": self.n_neg}


def evaluate_scores(probs, labels) -> EvalResult:
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    return EvalResult(auc(probs, labels), n_pos, len(labels) - n_pos, logloss(probs, labels))


def evaluate(arrays: Arrays, params: ModelParams, switches: AblationSwitches, cfg: ModelConfig) -> EvalResult:
    return evaluate_scores(predict(arrays, params, switches, cfg), arrays.label)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class GridRow:
    config: str
    seed: int
    auc: float
    logloss: float
    wall_seconds: float


def run_ablation_grid(train_data: Arrays, test_data: Arrays, vocab: Vocab, model_cfg: ModelConfig,
                      train_cfg: TrainConfig, grid: dict[str, AblationSwitches] | None = None,
                      seeds=(0, 1, 2), results_csv=None, idempotent: bool = False, log=print) -> list[GridRow]:
    """Train every (configuration, seed) pair and score it on ``test_data``.

    Each seed fixes initialisation, batch order and pair mining, so all
    configurations see the same data order. When ``results_csv`` is given,
    rows are appended as they finish; with ``idempotent`` pairs already in
    the file are not rerun.
    """
    grid = grid if grid is not None else ABLATION_GRID
    done: dict[tuple[str, int], GridRow] = {}
    if results_csv is not None and idempotent and Path(results_csv).exists():
        for r in read_results(results_csv):
            done[(r.config, r.seed)] = r
    rows = []
    for name, sw in grid.items():
        for seed in seeds:
            if (name, seed) in done:
                rows.append(done[(name, seed)])
                continue
            t0 = time.perf_counter()
            cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
            result = train(train_data, vocab, model_cfg, cfg, sw)
            ev = evaluate(test_data, result.params, sw, model_cfg)
            row = GridRow(name, seed, ev.auc, ev.logloss, time.perf_counter() - t0)
            rows.append(row)
            if log:
                log(f"{name:<22} seed={seed}  auc={ev.auc:.4f}  logloss={ev.logloss:.4f}  ({row.wall_seconds:.0f}s)")
            if results_csv is not None:
                _append_row(results_csv, row)
    return rows


def _append_row(path, row: GridRow) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        w.writerow([row.config, row.seed, repr(row.auc), repr(row.logloss), f"{row.wall_seconds:.3f}"])


def read_results(path) -> list[GridRow]:
    with open(path, newline="") as fh:
        return [GridRow(r["config"], int(r["seed"]), float(r["auc"]), float(r["logloss"]), float(r["wall_seconds"]))
                for r in csv.DictReader(fh)]


def summarize(rows: list[GridRow]) -> list[tuple[str, float, float, int]]:
    """(config, mean auc, std auc, n seeds) sorted by mean AUC, descending."""
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r.config, []).append(r.auc)
    out = [(k, float(np.mean(v)), float(np.std(v)), len(v)) for k, v in by.items()]
    return sorted(out, key=lambda t: -t[1])


def format_summary(summary) -> str:
    width = max([len("config")] + [len(s[0]) for s in summary])
    lines = [f"{'config':<{width}}  {'mean_auc':>8}  {'std':>7}  n"]
    for name, m, s, n in summary:
        lines.append(f"{name:<{width}}  {m:>8.4f}  {s:>7.4f}  {n}")
    return "\n".join(lines)


@dataclass
class OrderingCheck:
    ok: bool
    inversions: list[str]
    full_gap: float


def check_ablation_ordering(means: dict[str, float], tolerance: float = 0.002, min_gap: float = 0.005) -> OrderingCheck:
    """Directional ablation check.

    Requires full >= every partial ablation >= all-off, and the
    w/o_CSRL row at or below w/o_StIF. One violation no larger than
    ``tolerance`` is forgiven; the full vs all-off gap must exceed
    ``min_gap``.
    """
    full, none = means["full"], means["w/o_CSRL+StPE+StIF"]
    violations: list[tuple[str, float]] = []
    for name, m in means.items():
        if name in ("full", "w/o_CSRL+StPE+StIF"):
            continue
        if m > full:
            violations.append((f"{name} > full", m - full))
        if m < none:
            violations.append((f"{name} < w/o_CSRL+StPE+StIF", none - m))
    if means["w/o_CSRL"] > means["w/o_StIF"]:
        violations.append(("w/o_CSRL > w/o_StIF", means["w/o_CSRL"] - means["w/o_StIF"]))
    gap = full - none
    forgiven = len(violations) == 1 and violations[0][1] <= tolerance
    ok = (not violations or forgiven) and gap > min_gap
    return OrderingCheck(ok, [f"{v} (by {d:.4f})" for v, d in violations], gap)
