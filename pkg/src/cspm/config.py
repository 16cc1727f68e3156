"""Experiment configuration: TOML file + command-line overrides.

Precedence is flags > file > built-in defaults. Every key of every section
is optional; unknown sections or keys are rejected by name.

    seed = 0
    output_dir = "runs/default"

    [generator]      # GeneratorConfig fields, except seed
    [embedding]      # dim
    [csrl]           # layers, init_scale, margin, n_v, geo_mode, paper_literal_loss
    [stpe]           # heads, d_k, max_seq_len
    [stif]           # hidden, feature_dim, paper_literal
    [model]          # alpha, head_widths, dtype
    [train]          # TrainConfig fields, except seed
    [eval]           # test_size, batch_size
    [ablation]       # configs, seeds
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import ConfigError, GeneratorConfig
from .model import ABLATION_GRID, ModelConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class EmbeddingSection:
    dim: int = 16


@dataclass
class CsrlSection:
    layers: int = 2
    init_scale: float = 0.0
    margin: float = 0.3
    n_v: int = 4
    geo_mode: str = "region"
    paper_literal_loss: bool = False


@dataclass
class StpeSection:
    heads: int = 2
    d_k: int = 16
    max_seq_len: int = 20


@dataclass
class StifSection:
    hidden: int = 32
    feature_dim: int = 8
    paper_literal: bool = False


@dataclass
class ModelSection:
    alpha: float = 0.5
    head_widths: tuple[int, ...] = (128, 64)
    dtype: str = "float32"


@dataclass
class TrainSection:
    batch_size: int = 256
    epochs: int = 3
    lr0: float = 0.05
    decay_rate: float = 0.95
    decay_steps: int = 1000
    eval_every: int = 200
    epsilon: float = 1e-8


@dataclass
class EvalSection:
    test_size: int = 20_000
    batch_size: int = 4096


@dataclass
class AblationSection:
    configs: tuple[str, ...] = tuple(ABLATION_GRID)
    seeds: tuple[int, ...] = (0, 1, 2)


def _generator_default() -> GeneratorConfig:
    return GeneratorConfig()


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    generator: GeneratorConfig = field(default_factory=_generator_default)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    csrl: CsrlSection = field(default_factory=CsrlSection)
    stpe: StpeSection = field(default_factory=StpeSection)
    stif: StifSection = field(default_factory=StifSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- derived component configs ------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        return replace(self.generator, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.embedding.dim,
            max_seq_len=self.stpe.max_seq_len,
            csrl_layers=self.csrl.layers,
            cross_init_scale=self.csrl.init_scale,
            margin=self.csrl.margin,
            n_v=self.csrl.n_v,
            geo_mode=self.csrl.geo_mode,
            paper_literal_loss=self.csrl.paper_literal_loss,
            heads=self.stpe.heads,
            d_k=self.stpe.d_k,
            stif_hidden=self.stif.hidden,
            stif_feature_dim=self.stif.feature_dim,
            stif_paper_literal=self.stif.paper_literal,
            head_widths=self.model.head_widths,
            alpha=self.model.alpha,
            dtype=self.model.dtype,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.train))

    def validate(self) -> None:
        try:
            self.generator_config().validate()
            self.model_config().validate()
            self.train_config().validate()
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = [c for c in self.ablation.configs if c not in ABLATION_GRID]
        if unknown:
            raise ConfigError(f"ablation.configs: unknown configuration {unknown[0]!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["generator"]["seed"]  # the top-level seed is authoritative
        return d


_SECTIONS = ("generator", "embedding", "csrl", "stpe", "stif", "model", "train", "eval", "ablation")
_TOP = ("seed", "output_dir")
_EXCLUDED = {("generator", "seed")}


def _coerce(where: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(where, default[0], v) for v in value) if default else tuple(value)
    return value


def _apply(cfg: ExperimentConfig, key: str, value: Any) -> ExperimentConfig:
    """Return ``cfg`` with dotted ``key`` set, type-checked against the default."""
    parts = key.split(".")
    if len(parts) == 1:
        if key not in _TOP:
            raise ConfigError(f"unknown config key {key!r}")
        return replace(cfg, **{key: _coerce(key, getattr(cfg, key), value)})
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = parts
    obj = getattr(cfg, section)
    if name not in {f.name for f in fields(obj)} or (section, name) in _EXCLUDED:
        raise ConfigError(f"unknown config key {key!r}")
    new = replace(obj, **{name: _coerce(key, getattr(obj, name), value)})
    return replace(cfg, **{section: new})


def from_mapping(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
            for sub, v in value.items():
                cfg = _apply(cfg, f"{key}.{sub}", v)
        else:
            cfg = _apply(cfg, key, value)
    return cfg


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then ``path`` (TOML), then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            cfg = from_mapping(data, cfg)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides or []:
        key, value = parse_override(item)
        cfg = _apply(cfg, key, value)
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    """``section.key=value`` with a TOML value; bare words are taken as strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def to_toml(cfg: ExperimentConfig) -> str:
    """Render a config as TOML that :func:`load` reads back to an equal config."""
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(d[k])}" for k in _TOP]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r}")
