"""Synthetic three-table databases with planted relational signal.

Schema: ``entities`` and ``items`` (static) plus ``events`` with foreign keys
to both and a time column. Time is cut into windows of 255 hours, the edge of
a time-embedding bucket, and events keep at least an hour away from window
and recency edges so bucket membership is unambiguous.

Signals:

* ``recency_churn``: whether an entity has any event in the next window
  depends on how long ago its last event was (under 127h, 127-255h, older).
  With ``informative_features`` the entity's ``segment`` flips the rule for
  the first two recency classes, so both the row and its events are needed.
* ``degree_regression``: the summed event value in the next window equals
  ``(1 - noise) * (events in the trailing window) + noise * N(0, 1)``.
* ``copurchase_rec``: entities buy from their item cluster, re-buying a few
  personal favourites with probability ``repeat_prob``, otherwise by item
  popularity.

Entity columns other than ``segment`` under ``informative_features`` are
pure noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .relational import ColumnSpec, Database, SchemaManifest, Table, TableSpec, write_database
from .tasks import LabelRule, SplitConfig, TaskSpec

HOUR = 3600
WINDOW = 255 * HOUR
RECENT = 127 * HOUR
EPOCH = 1577836800  # 2020-01-01T00:00:00Z
SIGNALS = ("recency_churn", "degree_regression", "copurchase_rec")
_WORDS = ("alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima mike november "
          "oscar papa quebec romeo sierra tango uniform victor whiskey xray yankee zulu").split()


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 2000
    n_items: int = 100
    n_events: int = 30000
    time_span: int = 9 * WINDOW
    signal: str = "recency_churn"
    noise: float = 0.1
    rng_seed: int = 0
    informative_features: bool = False
    n_clusters: int = 10
    repeat_prob: float = 0.7
    popularity_skew: float = 1.0
    K: int = 10

    def __post_init__(self):
        if min(self.n_entities, self.n_items, self.n_events) < 10:
            raise ValueError("entity, item and event counts must be at least 10")
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if self.time_span < 4 * WINDOW:
            raise ValueError(f"time_span must cover at least 4 windows of {WINDOW} s")
        if not 0.0 <= self.repeat_prob <= 1.0 or self.n_clusters < 1:
            raise ValueError("repeat_prob must lie in [0, 1] and n_clusters be positive")

    @property
    def n_windows(self) -> int:
        return self.time_span // WINDOW

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class SynthData:
    db: Database
    task: TaskSpec
    split: SplitConfig
    oracle: dict  # entity -> {seed_time: generating-rule score}
    config: SynthConfig


def _rng(cfg: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, stream]))


def _words(rng, n, k=3):
    idx = rng.integers(0, len(_WORDS), size=(n, k))
    return [" ".join(_WORDS[j] for j in row) for row in idx]


def _schema() -> SchemaManifest:
    entities = TableSpec("entities", "entities.csv", (
        ColumnSpec("entity_id", "primary_key"),
        ColumnSpec("age", "numeric", nullable=True),
        ColumnSpec("segment", "categorical", nullable=True),
        ColumnSpec("bio", "text", nullable=True),
    ))
    items = TableSpec("items", "items.csv", (
        ColumnSpec("item_id", "primary_key"),
        ColumnSpec("price", "numeric"),
        ColumnSpec("category", "categorical"),
        ColumnSpec("title", "text", nullable=True),
    ))
    events = TableSpec("events", "events.csv", (
        ColumnSpec("event_id", "primary_key"),
        ColumnSpec("entity_id", "foreign_key", "entities"),
        ColumnSpec("item_id", "foreign_key", "items"),
        ColumnSpec("time", "timestamp"),
        ColumnSpec("value", "numeric"),
    ), time_column="time")
    return SchemaManifest((entities, items, events))


def _window_start(k: int) -> int:
    return EPOCH + k * WINDOW


def _uniform_times(rng, lo: int, hi: int, n: int) -> np.ndarray:
    return rng.integers(lo, hi + 1, size=n)


def _churn_events(cfg: SynthConfig, rng, segment: np.ndarray, rate: float):
    """Returns (entity, time) event arrays and oracle scores per (entity, seed time)."""
    lo, hi = cfg.noise / 2.0, 1.0 - cfg.noise / 2.0
    # churn probability by recency class (near, mid, far); casual entities flip near/mid
    loyal_p = np.array([lo, hi, lo])
    casual_p = np.array([hi, lo, lo])
    n = cfg.n_entities
    ents, times = [], []
    last = np.full(n, -1, dtype=np.int64)
    oracle: dict[int, dict[int, float]] = {e: {} for e in range(n)}

    def emit(e_idx, k):
        start = _window_start(k)
        end = start + WINDOW
        m = 1 + rng.poisson(max(rate - 1.0, 0.0), size=len(e_idx))
        late = rng.random(len(e_idx)) < 0.5
        for e, cnt, is_late in zip(e_idx, m, late):
            if is_late:
                t_last = int(_uniform_times(rng, end - RECENT + HOUR, end - HOUR, 1)[0])
            else:
                t_last = int(_uniform_times(rng, start + HOUR, end - RECENT - HOUR, 1)[0])
            rest = _uniform_times(rng, start + HOUR, t_last, cnt - 1)
            ev_t = np.sort(np.append(rest, t_last))
            ents.extend([e] * cnt)
            times.extend(ev_t.tolist())
            last[e] = t_last

    emit(np.arange(n), 0)
    for k in range(1, cfg.n_windows):
        t = _window_start(k)
        r = t - last
        cls = np.where(r < RECENT, 0, np.where(r < WINDOW, 1, 2))
        casual = segment == "casual" if cfg.informative_features else np.zeros(n, dtype=bool)
        p_churn = np.where(casual, casual_p[cls], loyal_p[cls])
        for e in range(n):
            oracle[e][t] = float(p_churn[e])
        active = rng.random(n) >= p_churn
        emit(np.flatnonzero(active), k)
    return np.array(ents, dtype=np.int64), np.array(times, dtype=np.int64), None, oracle


def _regression_events(cfg: SynthConfig, rng, rate: float):
    n = cfg.n_entities
    counts = 1 + rng.poisson(max(rate - 1.0, 0.0), size=(cfg.n_windows, n))
    ents, times, values = [], [], []
    oracle: dict[int, dict[int, float]] = {e: {} for e in range(n)}
    for k in range(cfg.n_windows):
        start = _window_start(k)
        if k == 0:
            totals = rng.normal(size=n) + counts[0]
        else:
            totals = (1 - cfg.noise) * counts[k - 1] + cfg.noise * rng.normal(size=n)
            for e in range(n):
                oracle[e][start] = float((1 - cfg.noise) * counts[k - 1][e])
        for e in range(n):
            c = int(counts[k, e])
            ts = np.sort(_uniform_times(rng, start + HOUR, start + WINDOW - HOUR, c))
            ents.extend([e] * c)
            times.extend(ts.tolist())
            values.extend([float(totals[e]) / c] * c)
    return np.array(ents, dtype=np.int64), np.array(times, dtype=np.int64), np.array(values), oracle


def _rec_events(cfg: SynthConfig, rng, rate: float):
    n, m = cfg.n_entities, cfg.n_items
    item_cluster = np.arange(m) % cfg.n_clusters
    weight = (1.0 + rng.permutation(m)) ** (-cfg.popularity_skew)
    user_cluster = rng.integers(0, cfg.n_clusters, size=n)
    members = [np.flatnonzero(item_cluster == c) for c in range(cfg.n_clusters)]
    favourites = [rng.choice(members[c], size=min(4, len(members[c])), replace=False) for c in user_cluster]
    global_p = weight / weight.sum()
    cluster_p = [weight[idx] / weight[idx].sum() for idx in members]
    ents, times, items = [], [], []
    for k in range(cfg.n_windows):
        start = _window_start(k)
        counts = rng.poisson(rate, size=n)
        for e in range(n):
            for _ in range(int(counts[e])):
                u = rng.random()
                if u < cfg.repeat_prob:
                    it = int(rng.choice(favourites[e]))
                elif rng.random() >= cfg.noise:
                    c = user_cluster[e]
                    it = int(rng.choice(members[c], p=cluster_p[c]))
                else:
                    it = int(rng.choice(m, p=global_p))
                ents.append(e)
                items.append(it)
                times.append(int(_uniform_times(rng, start + HOUR, start + WINDOW - HOUR, 1)[0]))
    return (np.array(ents, dtype=np.int64), np.array(times, dtype=np.int64), np.array(items, dtype=np.int64),
            item_cluster)


def generate(cfg: SynthConfig) -> SynthData:
    manifest = _schema()
    n, m = cfg.n_entities, cfg.n_items
    ent_rng, item_rng, ev_rng = _rng(cfg, 1), _rng(cfg, 2), _rng(cfg, 3)

    segment = np.where(ent_rng.random(n) < 0.5, "loyal", "casual")
    entity_cols = {
        "entity_id": [f"e{i}" for i in range(n)],
        "age": [float(x) for x in np.round(ent_rng.normal(40, 12, size=n), 1)],
        "segment": segment.tolist(),
        "bio": _words(ent_rng, n),
    }
    rate = cfg.n_events / (n * cfg.n_windows)
    item_cluster = np.arange(m) % cfg.n_clusters
    oracle: dict = {}
    values = None
    if cfg.signal == "recency_churn":
        ev_ent, ev_time, _, oracle = _churn_events(cfg, ev_rng, segment, rate)
        ev_item = ev_rng.integers(0, m, size=len(ev_ent))
    elif cfg.signal == "degree_regression":
        ev_ent, ev_time, values, oracle = _regression_events(cfg, ev_rng, rate)
        ev_item = ev_rng.integers(0, m, size=len(ev_ent))
    else:
        ev_ent, ev_time, ev_item, item_cluster = _rec_events(cfg, ev_rng, rate)
    if values is None:
        values = np.round(ev_rng.exponential(10.0, size=len(ev_ent)), 2)
    item_cols = {
        "item_id": [f"i{j}" for j in range(m)],
        "price": [float(x) for x in np.round(item_rng.lognormal(2.0, 0.5, size=m), 2)],
        "category": [f"c{c}" for c in item_cluster],
        "title": _words(item_rng, m, 2),
    }
    order = np.lexsort((ev_ent, ev_time))
    event_cols = {
        "event_id": [f"v{i}" for i in range(len(order))],
        "entity_id": [f"e{i}" for i in ev_ent[order]],
        "item_id": [f"i{j}" for j in ev_item[order]],
        "time": ev_time[order].tolist(),
        "value": [float(x) for x in values[order]],
    }
    tables = {
        "entities": Table(manifest.table("entities"), entity_cols),
        "items": Table(manifest.table("items"), item_cols),
        "events": Table(manifest.table("events"), event_cols),
    }
    db = Database(manifest, tables)
    split = SplitConfig(_window_start(cfg.n_windows - 2), _window_start(cfg.n_windows - 1))
    common = dict(entity_table="entities", event_table="events", event_fkey_to_entity="entity_id",
                  window=WINDOW)
    if cfg.signal == "recency_churn":
        task = TaskSpec("entity-churn", "entity_classification", label_rule=LabelRule("exists"),
                        negate=True, **common)
    elif cfg.signal == "degree_regression":
        task = TaskSpec("entity-value", "entity_regression", label_rule=LabelRule("sum", value_column="value"),
                        **common)
    else:
        task = TaskSpec("entity-item-purchase", "recommendation", dst_table="items", event_fkey_to_dst="item_id",
                        K=cfg.K, **common)
    return SynthData(db, task, split, oracle, cfg)


def write_synth(data: SynthData, directory) -> Path:
    directory = Path(directory)
    mpath = write_database(data.db, directory)
    (directory / "task.json").write_text(json.dumps(data.task.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    (directory / "split.json").write_text(json.dumps(asdict(data.split), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return mpath
