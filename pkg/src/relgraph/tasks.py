"""Training-table generation with temporal splits.

A task is declared as a JSON document (see :class:`TaskSpec`). For every seed
time on a stride grid and every entity active before it, the target is
computed from event rows whose time falls in ``(seed_time, seed_time + window]``.

Seed grid: ``val_timestamp + j * seed_stride`` for integer ``j``. Train rows
are grid points before the validation timestamp whose label window closes by
it; validation rows start at or after it and close by the test timestamp;
test rows start at or after the test timestamp and close by the data horizon
(the end of the stride cell holding the last event). Grid points whose window
would cross a boundary are dropped and counted.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import NodeRef
from .relational import Database

TASK_TYPES = ("entity_classification", "entity_regression", "recommendation")
RULES = ("exists", "count", "sum", "threshold")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabelRule:
    kind: str = "exists"
    value_column: str | None = None
    c: int | None = None

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown label rule {self.kind!r}")
        if self.kind == "sum" and not self.value_column:
            raise ValueError("sum rule needs value_column")
        if self.kind == "threshold" and (self.c is None or self.c < 1):
            raise ValueError("threshold rule needs c >= 1")

    @property
    def binary(self) -> bool:
        return self.kind in ("exists", "threshold")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_type: str
    entity_table: str
    event_table: str
    event_fkey_to_entity: str
    window: int
    label_rule: LabelRule = field(default_factory=LabelRule)
    negate: bool = False
    seed_stride: int | None = None
    dst_table: str | None = None
    event_fkey_to_dst: str | None = None
    K: int | None = None

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.task_type!r}")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.seed_stride is not None and self.seed_stride <= 0:
            raise ValueError("seed_stride must be positive")
        if self.task_type == "recommendation":
            if not self.dst_table or not self.event_fkey_to_dst:
                raise ValueError("recommendation tasks need dst_table and event_fkey_to_dst")
            if self.K is None or self.K < 1:
                raise ValueError("recommendation tasks need K >= 1")
        elif self.task_type == "entity_classification" and not self.label_rule.binary:
            raise ValueError(f"classification needs a binary label rule, got {self.label_rule.kind!r}")
        elif self.task_type == "entity_regression" and self.label_rule.binary:
            raise ValueError(f"regression needs a count or sum rule, got {self.label_rule.kind!r}")

    @property
    def stride(self) -> int:
        return self.seed_stride or self.window

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_rule"] = {k: v for k, v in asdict(self.label_rule).items() if v is not None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        rule = d.pop("label_rule", {"kind": "exists"})
        if isinstance(rule, str):
            rule = {"kind": rule}
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown task fields {sorted(extra)}")
        return cls(label_rule=LabelRule(**rule), **d)


def load_task_spec(path) -> TaskSpec:
    with open(path, encoding="utf-8") as fh:
        return TaskSpec.from_dict(json.load(fh))


@dataclass(frozen=True)
class SplitConfig:
    val_timestamp: int
    test_timestamp: int

    def __post_init__(self):
        if not self.val_timestamp < self.test_timestamp:
            raise ValueError("val_timestamp must precede test_timestamp")


@dataclass
class TrainingTable:
    task_name: str
    task_type: str
    split: str
    entity_type: str
    window: int
    entity: np.ndarray
    seed_time: np.ndarray
    target: np.ndarray | list[np.ndarray]
    dst_type: str | None = None
    K: int | None = None
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.entity)

    @property
    def is_recommendation(self) -> bool:
        return self.task_type == "recommendation"

    def seeds(self) -> list[tuple[NodeRef, int]]:
        return [(NodeRef(self.entity_type, int(e)), int(t)) for e, t in zip(self.entity, self.seed_time)]

    def subset(self, idx) -> "TrainingTable":
        idx = np.asarray(idx, dtype=np.int64)
        target = [self.target[i] for i in idx] if self.is_recommendation else self.target[idx]
        return TrainingTable(self.task_name, self.task_type, self.split, self.entity_type, self.window,
                             self.entity[idx], self.seed_time[idx], target, self.dst_type, self.K)


class TaskError(ValueError):
    pass


def _event_arrays(db: Database, spec: TaskSpec):
    for tname in (spec.entity_table, spec.event_table) + ((spec.dst_table,) if spec.dst_table else ()):
        if tname not in db.tables:
            raise TaskError(f"task {spec.name!r} references missing table {tname!r}")
    ev = db.tables[spec.event_table]
    if ev.time_column is None:
        raise TaskError(f"event table {spec.event_table!r} has no time column")
    cols = {c.name: c for c in ev.spec.columns}

    def fk(col, target):
        if col not in cols or cols[col].semantic_type != "foreign_key" or cols[col].target != target:
            raise TaskError(f"{spec.event_table}.{col} is not a foreign key to {target!r}")
        return db.resolve_fkey(spec.event_table, col)

    ent = fk(spec.event_fkey_to_entity, spec.entity_table)
    times = ev.times()
    keep = (ent >= 0) & (times != np.iinfo(np.int64).min)
    out = {"entity": ent[keep], "time": times[keep]}
    if spec.task_type == "recommendation":
        dst = fk(spec.event_fkey_to_dst, spec.dst_table)[keep]
        ok = dst >= 0
        out = {k: v[ok] for k, v in out.items()}
        out["dst"] = dst[ok]
    elif spec.label_rule.kind == "sum":
        vc = spec.label_rule.value_column
        if vc not in cols or cols[vc].semantic_type != "numeric":
            raise TaskError(f"{spec.event_table}.{vc} is not a numeric column")
        vals = np.array([np.nan if v is None else v for v in ev.columns[vc]], dtype=np.float64)[keep]
        out["value"] = np.nan_to_num(vals, nan=0.0)
    return out


def _grid(split: str, spec: TaskSpec, sc: SplitConfig, first: int, last: int):
    """Yield (seed_time, fits) for grid points belonging to ``split``."""
    s, w, v, te = spec.stride, spec.window, sc.val_timestamp, sc.test_timestamp
    if split == "train":
        lo_j = -((v - first) // s) - 1
        for j in range(lo_j, 0):
            t = v + j * s
            if t > first:
                yield t, t + w <= v
    elif split == "val":
        j = 0
        while v + j * s < te:
            t = v + j * s
            yield t, t + w <= te
            j += 1
    else:
        if last < te:
            return
        j0 = -(-(te - v) // s)
        horizon_cells = (last - te) // s + 1
        horizon = te + horizon_cells * s
        j = j0
        while v + j * s < horizon:
            t = v + j * s
            yield t, t + w <= horizon
            j += 1


def make_training_table(db: Database, spec: TaskSpec, split: SplitConfig) -> dict[str, TrainingTable]:
    ev = _event_arrays(db, spec)
    ent_tab = db.tables[spec.entity_table]
    n_ent = len(ent_tab)
    ent_time = ent_tab.times() if ent_tab.time_column else np.full(n_ent, np.iinfo(np.int64).min)
    if len(ev["time"]) == 0:
        raise TaskError(f"event table {spec.event_table!r} has no usable events")
    first_event = np.full(n_ent, np.iinfo(np.int64).max)
    np.minimum.at(first_event, ev["entity"], ev["time"])
    t_first, t_last = int(ev["time"].min()), int(ev["time"].max())
    rule = spec.label_rule
    tables = {}
    for name in SPLITS:
        ents, times, targets = [], [], []
        dropped = 0
        for t, fits in _grid(name, spec, split, t_first, t_last):
            eligible = (first_event < t) & (ent_time <= t)
            if not fits:
                dropped += int(eligible.sum())
                continue
            in_win = (ev["time"] > t) & (ev["time"] <= t + spec.window)
            e_win = ev["entity"][in_win]
            idx = np.flatnonzero(eligible)
            if spec.task_type == "recommendation":
                pairs = np.unique(np.stack([e_win, ev["dst"][in_win]], axis=1), axis=0) if len(e_win) else np.empty((0, 2), np.int64)
                bounds = np.searchsorted(pairs[:, 0], idx), np.searchsorted(pairs[:, 0], idx, side="right")
                for e, lo, hi in zip(idx, *bounds):
                    if hi > lo:
                        ents.append(e)
                        times.append(t)
                        targets.append(pairs[lo:hi, 1].astype(np.int64))
                continue
            if rule.kind == "sum":
                y = np.bincount(e_win, weights=ev["value"][in_win], minlength=n_ent)
            else:
                y = np.bincount(e_win, minlength=n_ent).astype(np.float64)
            if rule.kind == "exists":
                y = (y > 0).astype(np.float64)
            elif rule.kind == "threshold":
                y = (y >= rule.c).astype(np.float64)
            if rule.binary and spec.negate:
                y = 1.0 - y
            ents.extend(idx.tolist())
            times.extend([t] * len(idx))
            targets.extend(y[idx].tolist())
        ents = np.array(ents, dtype=np.int64)
        times = np.array(times, dtype=np.int64)
        order = np.lexsort((times, ents))
        if spec.task_type == "recommendation":
            target = [targets[i] for i in order]
        else:
            target = np.array(targets, dtype=np.float64)[order]
        tables[name] = TrainingTable(spec.name, spec.task_type, name, spec.entity_table, spec.window,
                                     ents[order], times[order], target, spec.dst_table, spec.K, dropped)
    return tables


def leakage_guard(t: TrainingTable, split: SplitConfig) -> bool:
    st = t.seed_time
    if len(st) == 0:
        return True
    v, te = split.val_timestamp, split.test_timestamp
    if t.split == "train":
        return bool(np.all(st + t.window <= v))
    if t.split == "val":
        return bool(np.all(st >= v) and np.all(st + t.window <= te))
    if t.split == "test":
        return bool(np.all(st >= te))
    raise ValueError(f"unknown split {t.split!r}")


def table_stats(t: TrainingTable, earlier: list[TrainingTable] | tuple = ()) -> dict:
    if t.task_type == "entity_classification":
        pos = int(np.sum(t.target == 1))
        return {"split": t.split, "rows": len(t), "positives": pos, "negatives": len(t) - pos}
    if t.task_type == "entity_regression":
        y = np.asarray(t.target, dtype=np.float64)
        if len(y) == 0:
            return {"split": t.split, "rows": 0}
        return {"split": t.split, "rows": len(t), "min": float(y.min()), "median": float(np.median(y)),
                "mean": float(y.mean()), "max": float(y.max())}
    # a link repeats if the same (entity, destination) pair occurs at an earlier seed time,
    # in this table or in any of the earlier splits passed in
    first_seen: dict[tuple[int, int], int] = {}
    for tab in (*earlier, t):
        for e, st, dsts in zip(tab.entity, tab.seed_time, tab.target):
            for d in dsts:
                key = (int(e), int(d))
                first_seen[key] = min(first_seen.get(key, int(st)), int(st))
    links = repeated = 0
    for e, st, dsts in zip(t.entity, t.seed_time, t.target):
        for d in dsts:
            links += 1
            repeated += int(first_seen[(int(e), int(d))] < st)
    return {"split": t.split, "rows": len(t), "links": links,
            "avg_links_per_row": links / len(t) if len(t) else 0.0,
            "pct_repeated": 100.0 * repeated / links if links else 0.0}


# -- serialization ----------------------------------------------------------------

def write_training_table(t: TrainingTable, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity_type", "entity_index", "seed_time", "target"])
        for i in range(len(t)):
            if t.is_recommendation:
                tgt = "|".join(str(int(d)) for d in t.target[i])
            else:
                tgt = repr(float(t.target[i]))
            w.writerow([t.entity_type, int(t.entity[i]), int(t.seed_time[i]), tgt])


def read_training_table(path, spec: TaskSpec, split: str) -> TrainingTable:
    ents, times, targets = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["entity_type", "entity_index", "seed_time", "target"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            if row[0] != spec.entity_table:
                raise ValueError(f"{path}: entity type {row[0]!r} does not match task")
            ents.append(int(row[1]))
            times.append(int(row[2]))
            if spec.task_type == "recommendation":
                targets.append(np.array([int(x) for x in row[3].split("|") if x], dtype=np.int64))
            else:
                targets.append(float(row[3]))
    target = targets if spec.task_type == "recommendation" else np.array(targets, dtype=np.float64)
    return TrainingTable(spec.name, spec.task_type, split, spec.entity_table, spec.window,
                         np.array(ents, dtype=np.int64), np.array(times, dtype=np.int64), target,
                         spec.dst_table, spec.K)


@dataclass
class TaskDir:
    spec: TaskSpec
    split: SplitConfig
    tables: dict[str, TrainingTable]
    manifest_path: str | None = None


def save_task_dir(directory, spec: TaskSpec, split: SplitConfig, tables: dict[str, TrainingTable],
                  manifest_path: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "task": spec.to_dict(),
        "split": asdict(split),
        "manifest": os.path.relpath(manifest_path, directory) if manifest_path else None,
        "dropped": {k: t.dropped for k, t in tables.items()},
    }
    (directory / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, t in tables.items():
        write_training_table(t, directory / f"{name}.csv")
    stats = {}
    prev = []
    for name in SPLITS:
        if name in tables:
            stats[name] = table_stats(tables[name], prev)
            prev.append(tables[name])
    (directory / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_task_dir(directory) -> TaskDir:
    directory = Path(directory)
    meta = json.loads((directory / "task.json").read_text(encoding="utf-8"))
    spec = TaskSpec.from_dict(meta["task"])
    split = SplitConfig(**meta["split"])
    tables = {}
    for name in SPLITS:
        p = directory / f"{name}.csv"
        if p.exists():
            tables[name] = read_training_table(p, spec, name)
            tables[name].dropped = meta.get("dropped", {}).get(name, 0)
    manifest = str((directory / meta["manifest"]).resolve()) if meta.get("manifest") else None
    return TaskDir(spec, split, tables, manifest)
