"""Sample schema, synthetic OFD generator, JSONL IO and array encoding.

Raw ids in a :class:`Sample` are the ids the generator draws: every
vocabulary reserves 0 for padding, except ``time_bucket`` which is the
half-hour slot of day (0..47) and is shifted by one when encoded for the
embedding tables.

Generative story (per impression)::

    logit = base + signal * (sharpness * A[u, region, period, category]
                             + context_strength * B[region, period] * promo_on
                             + taste_strength * <taste_u, taste_item>)

``A`` is a sparse per-user affinity tensor (a few hotspot cells). Behaviour
sequences are drawn from the same hotspots, so a model that matches the
candidate's (region, period, category) against the sequence can recover most
of the planted signal. Every planted term is scaled by ``signal``; at
``signal=0`` the labels are independent of all features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

SECONDS_PER_DAY = 86_400
BUCKET_SECONDS = 1_800
N_TIME_BUCKETS = SECONDS_PER_DAY // BUCKET_SECONDS
N_REGIONS = 4

USER_FEATURES = ("age_band", "gender", "membership")
CONTEXT_FEATURES = ("weather", "promo", "platform", "app_version")
ITEM_ATTRS = ("item_id", "category", "shop_id", "price_band", "subsidy_flag")
EVENT_ATTRS = ("item_id", "category", "geohash_cell", "time_bucket")

# vocabulary sizes of the fixed categorical features, excluding padding id 0
USER_FEATURE_CARD = {"age_band": 6, "gender": 3, "membership": 2}
CONTEXT_FEATURE_CARD = {"weather": 4, "promo": 2, "platform": 3, "app_version": 1}
PROMO_ON = 2


class ConfigError(ValueError):
    pass


class DataParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    def __init__(self, fieldname: str, msg: str, lineno: int | None = None):
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}invalid field {fieldname!r}: {msg}")
        self.msg = msg
        self.field = fieldname
        self.lineno = lineno


@dataclass(frozen=True)
class BehaviorEvent:
    item_id: int
    category: int
    geohash_cell: int
    time_bucket: int
    timestamp: int


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    category: int
    shop_id: int
    price_band: int
    subsidy_flag: int


@dataclass(frozen=True)
class Sample:
    user_id: int
    query_tokens: list[int]
    geohash_cell: int
    time_bucket: int
    timestamp: int
    behavior_seq: list[BehaviorEvent]
    candidate_item: ItemFeatures
    user_feats: list[int]
    context_feats: list[int]
    label: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        expected = {f.name for f in fields(cls)}
        missing = expected - d.keys()
        if missing:
            raise ValidationError(sorted(missing)[0], "missing")
        extra = d.keys() - expected
        if extra:
            raise ValidationError(sorted(extra)[0], "unknown field")
        try:
            seq = [BehaviorEvent(**e) for e in d["behavior_seq"]]
        except TypeError as exc:
            raise ValidationError("behavior_seq", str(exc)) from None
        try:
            item = ItemFeatures(**d["candidate_item"])
        except TypeError as exc:
            raise ValidationError("candidate_item", str(exc)) from None
        return cls(
            user_id=d["user_id"],
            query_tokens=list(d["query_tokens"]),
            geohash_cell=d["geohash_cell"],
            time_bucket=d["time_bucket"],
            timestamp=d["timestamp"],
            behavior_seq=seq,
            candidate_item=item,
            user_feats=list(d["user_feats"]),
            context_feats=list(d["context_feats"]),
            label=d["label"],
        )


def time_bucket_of(timestamp: int) -> int:
    return (int(timestamp) % SECONDS_PER_DAY) // BUCKET_SECONDS


def validate_sample(s: Sample, vocab: "Vocab | None" = None) -> None:
    """Raise :class:`ValidationError` naming the first offending field."""
    def is_int(x):
        return isinstance(x, (int, np.integer)) and not isinstance(x, bool)

    if s.label not in (0, 1) or not is_int(s.label):
        raise ValidationError("label", f"must be 0 or 1, got {s.label!r}")
    for name in ("user_id", "geohash_cell", "time_bucket", "timestamp"):
        if not is_int(getattr(s, name)):
            raise ValidationError(name, "must be an integer")
    if not 0 <= s.time_bucket < N_TIME_BUCKETS:
        raise ValidationError("time_bucket", f"{s.time_bucket} outside 0..{N_TIME_BUCKETS - 1}")
    if s.time_bucket != time_bucket_of(s.timestamp):
        raise ValidationError("time_bucket", "does not match timestamp")
    if not s.query_tokens or not all(is_int(t) and t > 0 for t in s.query_tokens):
        raise ValidationError("query_tokens", "need at least one positive token id")
    prev = None
    for ev in s.behavior_seq:
        if ev.timestamp >= s.timestamp:
            raise ValidationError("behavior_seq", "event not strictly before the impression")
        if prev is not None and ev.timestamp < prev:
            raise ValidationError("behavior_seq", "events not timestamp-ascending")
        if ev.time_bucket != time_bucket_of(ev.timestamp):
            raise ValidationError("behavior_seq", "event time_bucket does not match timestamp")
        prev = ev.timestamp
    if vocab is None:
        return
    _check_range("user_id", s.user_id, 1, vocab.n_users)
    _check_range("geohash_cell", s.geohash_cell, 1, vocab.n_cells)
    for t in s.query_tokens:
        _check_range("query_tokens", t, 1, vocab.n_query_tokens)
    it = s.candidate_item
    for name, hi in zip(ITEM_ATTRS, vocab.item_attr_cards()):
        _check_range(f"candidate_item.{name}", getattr(it, name), 1, hi)
    for ev in s.behavior_seq:
        _check_range("behavior_seq.item_id", ev.item_id, 1, vocab.n_items)
        _check_range("behavior_seq.category", ev.category, 1, vocab.n_categories)
        _check_range("behavior_seq.geohash_cell", ev.geohash_cell, 1, vocab.n_cells)
    if len(s.user_feats) != len(USER_FEATURES):
        raise ValidationError("user_feats", f"expected {len(USER_FEATURES)} values")
    if len(s.context_feats) != len(CONTEXT_FEATURES):
        raise ValidationError("context_feats", f"expected {len(CONTEXT_FEATURES)} values")
    for name, v in zip(USER_FEATURES, s.user_feats):
        _check_range(f"user_feats.{name}", v, 1, USER_FEATURE_CARD[name])
    for name, v in zip(CONTEXT_FEATURES, s.context_feats):
        _check_range(f"context_feats.{name}", v, 1, CONTEXT_FEATURE_CARD[name])


def _check_range(name, v, lo, hi):
    if not lo <= v <= hi:
        raise ValidationError(name, f"id {v} outside {lo}..{hi}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class GeneratorConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_categories: int = 8
    grid_size: int = 8
    n_time_buckets: int = N_TIME_BUCKETS
    samples: int = 120_000
    seq_len_range: tuple[int, int] = (0, 30)
    preference_sharpness: float = 4.0
    spatiotemporal_signal: float = 1.0
    seed: int = 0
    n_time_periods: int = 6
    n_shops: int = 100
    n_price_bands: int = 5
    tokens_per_category: int = 3
    max_query_tokens: int = 2
    hotspots_range: tuple[int, int] = (2, 5)
    affinity_noise: float = 0.05
    hotspot_event_share: float = 0.85
    impression_affinity: float = 0.5
    context_strength: float = 1.0
    taste_strength: float = 0.3
    taste_dim: int = 4
    target_positive_rate: float = 0.12
    impression_days: int = 1
    history_days: int = 30

    def __post_init__(self):
        self.seq_len_range = tuple(self.seq_len_range)
        self.hotspots_range = tuple(self.hotspots_range)

    def validate(self) -> None:
        if self.n_time_buckets != N_TIME_BUCKETS:
            raise ConfigError(f"n_time_buckets must be {N_TIME_BUCKETS} (half-hour slots)")
        if N_TIME_BUCKETS % self.n_time_periods:
            raise ConfigError("n_time_periods must divide 48")
        if self.grid_size < 2 or self.grid_size % 2:
            raise ConfigError("grid_size must be an even integer >= 2")
        for name in ("n_users", "n_items", "n_categories", "samples", "n_shops", "n_price_bands",
                     "tokens_per_category", "max_query_tokens", "taste_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_items < self.n_categories:
            raise ConfigError("vocab overflow: every category needs at least one item")
        lo, hi = self.seq_len_range
        if not 0 <= lo <= hi:
            raise ConfigError("seq_len_range must satisfy 0 <= lo <= hi")
        hlo, hhi = self.hotspots_range
        n_cells = N_REGIONS * self.n_time_periods * self.n_categories
        if not 1 <= hlo <= hhi <= n_cells:
            raise ConfigError(f"hotspots_range must lie in 1..{n_cells}")
        if self.preference_sharpness <= 0:
            raise ConfigError("preference_sharpness must be > 0")
        if not 0.0 <= self.spatiotemporal_signal <= 1.0:
            raise ConfigError("spatiotemporal_signal must lie in [0, 1]")
        if not 0.05 <= self.target_positive_rate <= 0.25:
            raise ConfigError("target_positive_rate must lie in [0.05, 0.25]")
        for name in ("hotspot_event_share", "impression_affinity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.max_query_tokens > self.tokens_per_category:
            raise ConfigError("max_query_tokens cannot exceed tokens_per_category")

    @property
    def vocab(self) -> "Vocab":
        return Vocab(
            n_users=self.n_users,
            n_items=self.n_items,
            n_categories=self.n_categories,
            n_cells=self.grid_size ** 2,
            grid_size=self.grid_size,
            n_query_tokens=self.n_categories * self.tokens_per_category,
            n_shops=self.n_shops,
            n_price_bands=self.n_price_bands,
            max_query_tokens=self.max_query_tokens,
        )


@dataclass(frozen=True)
class Vocab:
    """Sizes of every id space (excluding the reserved padding id 0)."""

    n_users: int
    n_items: int
    n_categories: int
    n_cells: int
    grid_size: int
    n_query_tokens: int
    n_shops: int
    n_price_bands: int
    max_query_tokens: int

    def item_attr_cards(self) -> tuple[int, ...]:
        return (self.n_items, self.n_categories, self.n_shops, self.n_price_bands, 2)

    def region_of(self, cells):
        """Quadrant of the grid (0..3) for 1-based cell ids."""
        c = np.asarray(cells) - 1
        row, col = c // self.grid_size, c % self.grid_size
        half = self.grid_size // 2
        return (row >= half).astype(np.int64) * 2 + (col >= half).astype(np.int64)


# ---------------------------------------------------------------------------
# encoded arrays


@dataclass
class Arrays:
    """Column-oriented, model-ready view of a dataset.

    All id columns are embedding ids (0 = padding). ``time`` and the event
    time column hold ``bucket + 1``.
    """

    user: np.ndarray          # (N,)
    query: np.ndarray         # (N, Q)
    loc: np.ndarray           # (N,)
    time: np.ndarray          # (N,)
    timestamp: np.ndarray     # (N,)
    item: np.ndarray          # (N, 5)
    seq: np.ndarray           # (N, T, 4)
    seq_mask: np.ndarray      # (N, T) bool
    user_feats: np.ndarray    # (N, 3)
    ctx: np.ndarray           # (N, 4)
    label: np.ndarray         # (N,)

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx) -> "Arrays":
        return Arrays(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def equals(self, other: "Arrays") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def truncate_and_pad(seq: list[BehaviorEvent], max_len: int) -> tuple[list[BehaviorEvent | None], list[bool]]:
    """Keep the ``max_len`` most recent events, right-pad with ``None``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    kept = list(seq[-max_len:])
    pad = max_len - len(kept)
    return kept + [None] * pad, [True] * len(kept) + [False] * pad


def encode(samples: list[Sample], max_seq_len: int, max_query_tokens: int) -> Arrays:
    n = len(samples)
    q = np.zeros((n, max_query_tokens), np.int64)
    seq = np.zeros((n, max_seq_len, len(EVENT_ATTRS)), np.int64)
    mask = np.zeros((n, max_seq_len), bool)
    item = np.zeros((n, len(ITEM_ATTRS)), np.int64)
    for i, s in enumerate(samples):
        toks = s.query_tokens[:max_query_tokens]
        q[i, : len(toks)] = toks
        events, m = truncate_and_pad(s.behavior_seq, max_seq_len)
        for j, ev in enumerate(events):
            if ev is None:
                break
            seq[i, j] = (ev.item_id, ev.category, ev.geohash_cell, ev.time_bucket + 1)
        mask[i] = m
        it = s.candidate_item
        item[i] = (it.item_id, it.category, it.shop_id, it.price_band, it.subsidy_flag)
    return Arrays(
        user=np.array([s.user_id for s in samples], np.int64),
        query=q,
        loc=np.array([s.geohash_cell for s in samples], np.int64),
        time=np.array([s.time_bucket + 1 for s in samples], np.int64),
        timestamp=np.array([s.timestamp for s in samples], np.int64),
        item=item,
        seq=seq,
        seq_mask=mask,
        user_feats=np.array([s.user_feats for s in samples], np.int64).reshape(n, len(USER_FEATURES)),
        ctx=np.array([s.context_feats for s in samples], np.int64).reshape(n, len(CONTEXT_FEATURES)),
        label=np.array([s.label for s in samples], np.int64),
    )


# ---------------------------------------------------------------------------
# generator


@dataclass
class GroundTruth:
    """Everything needed to recompute the true click logit of a sample."""

    affinity: np.ndarray        # (n_users + 1, 4, P, C + 1)
    context_effect: np.ndarray  # (4, P)
    user_taste: np.ndarray      # (n_users + 1, k)
    item_taste: np.ndarray      # (n_items + 1, k)
    base_logit: float
    signal: float
    sharpness: float
    context_strength: float
    taste_strength: float
    grid_size: int
    n_time_periods: int

    def to_json(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        out["format"] = "cspm-ground-truth/1"
        return out

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        d = {k: v for k, v in d.items() if k != "format"}
        for k in ("affinity", "context_effect", "user_taste", "item_taste"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class GeneratedData:
    samples: list[Sample]
    truth: GroundTruth
    config: GeneratorConfig = field(repr=False)


def _solve_base_logit(rest: np.ndarray, target: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = np.mean(1.0 / (1.0 + np.exp(-(mid + rest))))
        if rate > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _cells_in_region(region: np.ndarray, grid_size: int, rng: np.random.Generator) -> np.ndarray:
    half = grid_size // 2
    row = (region // 2) * half + rng.integers(0, half, size=region.shape)
    col = (region % 2) * half + rng.integers(0, half, size=region.shape)
    return 1 + row * grid_size + col


def generate(config: GeneratorConfig) -> GeneratedData:
    """Draw a dataset; identical configs (seed included) give identical data."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    P, C, G = cfg.n_time_periods, cfg.n_categories, cfg.grid_size
    per_period = N_TIME_BUCKETS // P
    n_st = N_REGIONS * P * C

    # items: category round-robin so every category owns items
    item_cat = np.zeros(cfg.n_items + 1, np.int64)
    item_cat[1:] = 1 + rng.permutation(np.arange(cfg.n_items) % C)
    item_shop = np.r_[0, rng.integers(1, cfg.n_shops + 1, cfg.n_items)]
    item_price = np.r_[0, rng.integers(1, cfg.n_price_bands + 1, cfg.n_items)]
    item_subsidy = np.r_[0, rng.integers(1, 3, cfg.n_items)]
    items_by_cat = [np.flatnonzero(item_cat == c) for c in range(C + 1)]

    # users: sparse hotspot affinities over (region, period, category)
    affinity = np.zeros((cfg.n_users + 1, N_REGIONS, P, C + 1))
    hot_cells, hot_weights = [], []
    for u in range(1, cfg.n_users + 1):
        k = rng.integers(cfg.hotspots_range[0], cfg.hotspots_range[1] + 1)
        cells = rng.choice(n_st, size=k, replace=False)
        vals = rng.uniform(0.5, 1.0, size=k)
        flat = affinity[u, :, :, 1:].reshape(-1)
        flat += cfg.affinity_noise * rng.standard_normal(n_st)
        flat[cells] += vals
        affinity[u, :, :, 1:] = flat.reshape(N_REGIONS, P, C)
        hot_cells.append(cells)
        hot_weights.append(vals / vals.sum())
    user_feats = np.stack(
        [rng.integers(1, USER_FEATURE_CARD[f] + 1, cfg.n_users + 1) for f in USER_FEATURES], axis=1
    )
    user_taste = rng.standard_normal((cfg.n_users + 1, cfg.taste_dim)) / math.sqrt(cfg.taste_dim)
    item_taste = rng.standard_normal((cfg.n_items + 1, cfg.taste_dim))
    context_effect = rng.standard_normal((N_REGIONS, P))
    context_effect -= context_effect.mean()

    def draw_st(u: int, n: int, hot_share: float) -> np.ndarray:
        hot = rng.random(n) < hot_share
        out = rng.integers(0, n_st, size=n)
        nh = int(hot.sum())
        if nh:
            out[hot] = rng.choice(hot_cells[u - 1], size=nh, p=hot_weights[u - 1])
        return out

    def split_st(st: np.ndarray):
        region, rem = np.divmod(st, P * C)
        period, cat = np.divmod(rem, C)
        return region, period, cat + 1

    # behaviour histories, all before the impression window
    start = cfg.history_days * SECONDS_PER_DAY
    histories: list[list[BehaviorEvent]] = [[]]
    for u in range(1, cfg.n_users + 1):
        n = int(rng.integers(cfg.seq_len_range[0], cfg.seq_len_range[1] + 1))
        region, period, cat = split_st(draw_st(u, n, cfg.hotspot_event_share))
        cells = _cells_in_region(region, G, rng)
        ts = np.sort(rng.integers(0, start, size=n))
        # pin each event's time of day inside its period
        buckets = period * per_period + rng.integers(0, per_period, size=n)
        ts = (ts // SECONDS_PER_DAY) * SECONDS_PER_DAY + buckets * BUCKET_SECONDS + rng.integers(0, BUCKET_SECONDS, size=n)
        order = np.argsort(ts, kind="stable")
        items = np.array([rng.choice(items_by_cat[c]) for c in cat], np.int64)
        histories.append([
            BehaviorEvent(int(items[i]), int(cat[i]), int(cells[i]), time_bucket_of(ts[i]), int(ts[i]))
            for i in order
        ])

    # impressions
    n = cfg.samples
    users = rng.integers(1, cfg.n_users + 1, size=n)
    st = np.empty(n, np.int64)
    for u in np.unique(users):
        sel = np.flatnonzero(users == u)
        st[sel] = draw_st(int(u), len(sel), cfg.impression_affinity)
    region, period, cat = split_st(st)
    cells = _cells_in_region(region, G, rng)
    buckets = period * per_period + rng.integers(0, per_period, size=n)
    day = rng.integers(0, cfg.impression_days, size=n)
    ts = start + day * SECONDS_PER_DAY + buckets * BUCKET_SECONDS + rng.integers(0, BUCKET_SECONDS, size=n)
    cand = np.array([rng.choice(items_by_cat[c]) for c in cat], np.int64)
    n_tok = rng.integers(1, cfg.max_query_tokens + 1, size=n)
    tok_perm = np.argsort(rng.random((n, cfg.tokens_per_category)), axis=1)
    ctx = np.stack(
        [rng.integers(1, CONTEXT_FEATURE_CARD[f] + 1, n) for f in CONTEXT_FEATURES], axis=1
    )
    ctx[:, CONTEXT_FEATURES.index("promo")] = np.where(rng.random(n) < 0.3, PROMO_ON, 1)

    promo_on = ctx[:, CONTEXT_FEATURES.index("promo")] == PROMO_ON
    rest = cfg.spatiotemporal_signal * (
        cfg.preference_sharpness * affinity[users, region, period, cat]
        + cfg.context_strength * context_effect[region, period] * promo_on
        + cfg.taste_strength * np.einsum("nk,nk->n", user_taste[users], item_taste[cand])
    )
    base = _solve_base_logit(rest, cfg.target_positive_rate)
    prob = 1.0 / (1.0 + np.exp(-(base + rest)))
    labels = (rng.random(n) < prob).astype(np.int64)

    samples = []
    for i in range(n):
        c = int(cat[i])
        toks = sorted(int((c - 1) * cfg.tokens_per_category + 1 + t) for t in tok_perm[i, : n_tok[i]])
        u = int(users[i])
        it = int(cand[i])
        samples.append(Sample(
            user_id=u,
            query_tokens=toks,
            geohash_cell=int(cells[i]),
            time_bucket=int(buckets[i]),
            timestamp=int(ts[i]),
            behavior_seq=histories[u],
            candidate_item=ItemFeatures(it, int(item_cat[it]), int(item_shop[it]), int(item_price[it]), int(item_subsidy[it])),
            user_feats=[int(v) for v in user_feats[u]],
            context_feats=[int(v) for v in ctx[i]],
            label=int(labels[i]),
        ))
    truth = GroundTruth(
        affinity=affinity,
        context_effect=context_effect,
        user_taste=user_taste,
        item_taste=item_taste,
        base_logit=float(base),
        signal=cfg.spatiotemporal_signal,
        sharpness=cfg.preference_sharpness,
        context_strength=cfg.context_strength,
        taste_strength=cfg.taste_strength,
        grid_size=G,
        n_time_periods=P,
    )
    return GeneratedData(samples=samples, truth=truth, config=cfg)


def generate_sharded(config: GeneratorConfig, n_shards: int) -> GeneratedData:
    """Concatenate ``n_shards`` independent generations seeded ``seed + k``.

    Each shard draws its own users, items and ground truth, so the result is
    a different dataset from ``generate(config)``; user and item ids collide
    across shards on purpose (they index different latent draws). The
    returned ground truth is that of shard 0 and only scores shard 0 samples
    correctly.
    """
    if n_shards < 1:
        raise ConfigError("n_shards must be >= 1")
    sizes = [config.samples // n_shards + (k < config.samples % n_shards) for k in range(n_shards)]
    parts = [generate(replace(config, seed=config.seed + k, samples=n)) for k, n in enumerate(sizes)]
    return GeneratedData([s for p in parts for s in p.samples], parts[0].truth, config)


def oracle_logits(samples: Iterable[Sample], truth: GroundTruth) -> np.ndarray:
    """True generative logit of each sample, recomputed from the ground truth."""
    samples = list(samples)
    g = truth.grid_size
    half = g // 2
    per_period = N_TIME_BUCKETS // truth.n_time_periods
    out = np.empty(len(samples))
    promo_idx = CONTEXT_FEATURES.index("promo")
    for i, s in enumerate(samples):
        row, col = divmod(s.geohash_cell - 1, g)
        region = (row >= half) * 2 + (col >= half)
        period = s.time_bucket // per_period
        it = s.candidate_item
        term = (
            truth.sharpness * truth.affinity[s.user_id, region, period, it.category]
            + truth.context_strength * truth.context_effect[region, period] * (s.context_feats[promo_idx] == PROMO_ON)
            + truth.taste_strength * float(truth.user_taste[s.user_id] @ truth.item_taste[it.item_id])
        )
        out[i] = truth.base_logit + truth.signal * term
    return out


def mutual_information(x_keys, y) -> float:
    """Plug-in MI (nats) between discrete keys and labels, Miller-Madow corrected.

    The raw plug-in estimate is biased upward by roughly
    ``(|X|-1)(|Y|-1) / 2N``; that term is subtracted.
    """
    x_keys = np.asarray(x_keys)
    y = np.asarray(y)
    _, xi = np.unique(x_keys, return_inverse=True, axis=0 if x_keys.ndim > 1 else None)
    _, yi = np.unique(y, return_inverse=True)
    xi, yi = xi.reshape(-1), yi.reshape(-1)
    n = len(y)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1)
    pxy = joint / n
    px = pxy.sum(1, keepdims=True)
    py = pxy.sum(0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    kx, ky = int((joint.sum(1) > 0).sum()), int((joint.sum(0) > 0).sum())
    return mi - (kx - 1) * (ky - 1) / (2 * n)


def train_test_split(samples: list, n_test: int) -> tuple[list, list]:
    """Last ``n_test`` samples form the test set (generation order is already random)."""
    if not 0 < n_test < len(samples):
        raise ConfigError(f"n_test={n_test} must be in 1..{len(samples) - 1}")
    return samples[:-n_test], samples[-n_test:]


# ---------------------------------------------------------------------------
# JSONL


def save_jsonl(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path, vocab: Vocab | None = None) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataParseError(lineno, exc.msg) from None
            if not isinstance(d, dict):
                raise DataParseError(lineno, "expected a JSON object")
            try:
                s = Sample.from_dict(d)
                validate_sample(s, vocab)
            except ValidationError as exc:
                raise ValidationError(exc.field, exc.msg, lineno) from None
            out.append(s)
    return out
