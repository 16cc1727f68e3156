"""``cspm`` command line: generate | train | eval | ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .data import ConfigError, DataParseError, GeneratedData, ValidationError, Vocab, encode, generate, load_jsonl, save_jsonl
from .evaluation import (
    UndefinedMetricError,
    check_ablation_ordering,
    evaluate,
    evaluate_scores,
    format_summary,
    run_ablation_grid,
    summarize,
)
from .model import ABLATION_GRID, CheckpointError, gate_report, load_checkpoint, save_checkpoint, switches_by_name
from .stif import gate_table_csv
from .trainer import AdagradDecay, NumericalAbort, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cspm")


class DataError(Exception):
    pass


def build_hash() -> str:
    """sha256 over the package's Python sources, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: config_mod.ExperimentConfig, argv: list[str], **extra) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_toml": config_mod.to_toml(cfg),
        "build_hash": build_hash(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# data helpers


def _data_files(path: Path) -> tuple[Path, Path | None]:
    """(train, test) for a dataset directory, or (file, None) for a single JSONL file."""
    if path.is_dir():
        train_p, test_p = path / "train.jsonl", path / "test.jsonl"
        if not train_p.exists():
            raise DataError(f"{path}: no train.jsonl")
        return train_p, test_p if test_p.exists() else None
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    return path, None


def _dataset_vocab(path: Path, cfg: config_mod.ExperimentConfig) -> Vocab:
    """Vocabulary recorded by ``generate`` next to the data, else the config's."""
    root = path if path.is_dir() else path.parent
    manifest = root / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if "vocab" in meta:
            return Vocab(**meta["vocab"])
    return cfg.generator_config().vocab


def _load(path: Path, vocab: Vocab):
    try:
        return load_jsonl(path, vocab)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    except (DataParseError, ValidationError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _encode(samples, cfg: config_mod.ExperimentConfig, vocab: Vocab):
    return encode(samples, cfg.stpe.max_seq_len, vocab.max_query_tokens)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg, argv) -> int:
    out = _out_dir(args, cfg)
    gen_cfg = cfg.generator_config()
    if cfg.eval.test_size >= gen_cfg.samples:
        raise ConfigError(f"eval.test_size ({cfg.eval.test_size}) must be below generator.samples ({gen_cfg.samples})")
    data: GeneratedData = generate(gen_cfg)
    n_train = len(data.samples) - cfg.eval.test_size
    save_jsonl(data.samples[:n_train], out / "train.jsonl")
    save_jsonl(data.samples[n_train:], out / "test.jsonl")
    data.truth.save(out / "truth.json")
    rate = float(np.mean([s.label for s in data.samples]))
    write_manifest(out, "generate", cfg, argv, vocab=asdict(gen_cfg.vocab), n_train=n_train,
                   n_test=cfg.eval.test_size, positive_rate=rate)
    print(f"wrote {len(data.samples)} samples ({n_train} train / {cfg.eval.test_size} test) to {out}; "
          f"positive rate {rate:.4f}")
    return EXIT_OK


def cmd_train(args, cfg, argv) -> int:
    out = _out_dir(args, cfg)
    data_path = Path(args.data)
    train_p, test_p = _data_files(data_path)
    vocab = _dataset_vocab(data_path, cfg)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    switches = switches_by_name(args.ablation) if args.ablation else ABLATION_GRID["full"]
    params = optimizer = None
    if args.resume:
        ck = load_checkpoint(args.resume, model_cfg, vocab)
        if ck.switches != switches:
            raise ConfigError(f"{args.resume}: checkpoint was trained with switches {asdict(ck.switches)}")
        params = ck.params
        optimizer = AdagradDecay(train_cfg.lr0, train_cfg.decay_rate, train_cfg.decay_steps, train_cfg.epsilon,
                                 state=ck.optimizer_state, t=ck.step)
    train_data = _encode(_load(train_p, vocab), cfg, vocab)
    eval_data = _encode(_load(test_p, vocab), cfg, vocab) if test_p else None
    ckpt = out / "checkpoint.npz"

    def save(step, p, opt):
        save_checkpoint(ckpt, p, model_cfg, vocab, switches, step=step, optimizer_state=opt.accum)

    def periodic(step, p, opt):
        if step % train_cfg.eval_every == 0:
            save(step, p, opt)

    write_manifest(out, "train", cfg, argv, ablation=args.ablation or "full", switches=asdict(switches),
                   data=str(data_path), resume=args.resume, vocab=asdict(vocab))
    try:
        result = train(train_data, vocab, model_cfg, train_cfg, switches, eval_data, params, optimizer, periodic)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save(result.optimizer.t, result.params, result.optimizer)
    metrics = out / "metrics.csv"
    if args.resume and metrics.exists():
        # continue the existing history rather than overwrite it
        body = result.history.to_csv().split("\n", 1)[1]
        with open(metrics, "a") as fh:
            fh.write(body)
    else:
        metrics.write_text(result.history.to_csv())
    last = result.history.rows[-1]
    auc_txt = "" if last["eval_auc"] is None else f"  eval_auc {last['eval_auc']:.4f}"
    print(f"trained to step {last['step']}  l_total {last['l_total']:.4f}{auc_txt}; wrote {ckpt} and {metrics}")
    return EXIT_OK


def cmd_eval(args, cfg, argv) -> int:
    out = _out_dir(args, cfg)
    data_path = Path(args.data)
    train_p, test_p = _data_files(data_path)
    target = test_p or train_p
    if args.scores:
        labels = [s.label for s in _load(target, None)]
        try:
            scores = np.loadtxt(args.scores, dtype=np.float64, ndmin=1)
        except (OSError, ValueError) as exc:
            raise DataError(f"{args.scores}: {exc}") from exc
        if len(scores) != len(labels):
            raise DataError(f"{args.scores}: {len(scores)} scores for {len(labels)} samples")
        result = evaluate_scores(scores, labels)
        source = {"scores": str(args.scores)}
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --scores")
        vocab = _dataset_vocab(data_path, cfg)
        # an explicit config must agree with the checkpoint's shapes
        explicit = cfg.model_config() if (args.config or args.set) else None
        ck = load_checkpoint(args.checkpoint, explicit, vocab)
        arrays = encode(_load(target, vocab), ck.config.max_seq_len, vocab.max_query_tokens)
        result = evaluate(arrays, ck.params, ck.switches, ck.config)
        source = {"checkpoint": str(args.checkpoint)}
        if args.gates and ck.switches.use_stif:
            (out / "gates.csv").write_text(gate_table_csv(gate_report(arrays, ck.params, ck.config, ck.switches)))
    payload = {**result.to_dict(), "data": str(target), **source}
    (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest(out, "eval", cfg, argv, **source, data=str(target))
    print(json.dumps(payload))
    return EXIT_OK


def cmd_ablate(args, cfg, argv) -> int:
    out = _out_dir(args, cfg)
    data_path = Path(args.data)
    train_p, test_p = _data_files(data_path)
    if test_p is None:
        raise DataError(f"{data_path}: ablation needs a dataset directory with train.jsonl and test.jsonl")
    vocab = _dataset_vocab(data_path, cfg)
    names = args.configs.split(",") if args.configs else list(cfg.ablation.configs)
    unknown = [n for n in names if n not in ABLATION_GRID]
    if unknown:
        raise ConfigError(f"unknown ablation configuration {unknown[0]!r}; choose from {list(ABLATION_GRID)}")
    seeds = tuple(range(cfg.seed, cfg.seed + args.seeds)) if args.seeds else cfg.ablation.seeds
    write_manifest(out, "ablate", cfg, argv, configs=names, seeds=list(seeds), data=str(data_path), vocab=asdict(vocab))
    train_data = _encode(_load(train_p, vocab), cfg, vocab)
    test_data = _encode(_load(test_p, vocab), cfg, vocab)
    rows = run_ablation_grid(train_data, test_data, vocab, cfg.model_config(), cfg.train_config(),
                             {n: ABLATION_GRID[n] for n in names}, seeds, out / "results.csv",
                             idempotent=args.idempotent, log=lambda m: print(m, flush=True))
    summary = summarize(rows)
    text = format_summary(summary)
    if set(names) == set(ABLATION_GRID):
        check = check_ablation_ordering({name: m for name, m, _, _ in summary})
        text += f"\n\nordering {'holds' if check.ok else 'violated'}; full - all-off = {check.full_gap:.4f}"
        for inv in check.inversions:
            text += f"\n  inversion: {inv}"
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set train.epochs=1 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="cspm", description="Spatiotemporal CTR model: data, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"cspm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset with ground truth")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset directory (train.jsonl, optional test.jsonl) or JSONL file")
    t.add_argument("--ablation", help=f"switch set to train, one of {list(ABLATION_GRID)} or mlp, din")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint or a scores file")
    e.add_argument("--data", required=True, help="dataset directory (uses test.jsonl) or JSONL file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint.npz written by train")
    src.add_argument("--scores", help="text file with one score per sample, in file order")
    e.add_argument("--gates", action="store_true", help="also write the per-feature gate table to gates.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and score the ablation grid")
    a.add_argument("--data", required=True, help="dataset directory with train.jsonl and test.jsonl")
    a.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
    a.add_argument("--configs", help="comma-separated subset of the grid")
    a.add_argument("--idempotent", action="store_true", help="skip (config, seed) pairs already in results.csv")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = config_mod.load(args.config, overrides)
        cfg.validate()
        return args.func(args, cfg, argv)
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataParseError, ValidationError, DataError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CheckpointError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
