"""Command-line driver: ``relgraph <command> ...``.

Exit codes: 0 success, 1 validation or evaluation failure, 2 usage error.
Every command prints one RunManifest JSON line on stderr; commands that write
a directory also store it there as ``run_manifest.json``. Run manifests carry
wall-clock timings and are therefore the only outputs that differ between
identical runs.

Seeds: ``train --seed S`` sets the model seed; sampling, shuffling, negatives
and initialization draw from ``SeedSequence([S, stream, ...])`` substreams.
``build-graph --permute-edges S`` seeds the per-edge-type permutation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import baselines
from .graph import attach_features, build_graph, load_graph, save_graph
from .metrics import evaluate
from .model import (
    ModelConfig, Trainer, default_config, merge_config, params_to_bytes, train,
)
from .relational import DataError, SchemaError, load_database, load_manifest, validate
from .synth import SynthConfig, generate, write_synth
from .tasks import SplitConfig, TaskError, leakage_guard, load_task_dir, load_task_spec, make_training_table, save_task_dir

ABLATIONS = {"feature-mask": {"encoder": {"feature_mask": True}},
             "time-embedding": {"encoder": {"time_embedding": False}}}


class UsageError(Exception):
    pass


class Failure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run manifest ----------------------------------------------------------------

class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.doc = {"command": command, "argv": list(argv), "config_paths": [], "seeds": {},
                    "artifacts": {}, "timings": {}}
        self._t0 = time.perf_counter()

    def config(self, path):
        self.doc["config_paths"].append(str(path))

    def seed(self, name: str, value):
        self.doc["seeds"][name] = value

    def artifact(self, path):
        path = Path(path)
        if path.is_file():
            self.doc["artifacts"][str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()

    def finish(self, out_dir: Path | None = None):
        self.doc["timings"]["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        line = json.dumps(self.doc, sort_keys=True)
        print(line, file=sys.stderr)
        if out_dir is not None:
            (Path(out_dir) / "run_manifest.json").write_text(line + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: list[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise Failure(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing file: {path}")
    return p


# -- predictions -----------------------------------------------------------------

def write_predictions(path: Path, table, preds):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "row", "prediction"])
        for i, p in enumerate(preds):
            cell = "|".join(str(int(x)) for x in p) if table.is_recommendation else repr(float(p))
            w.writerow([table.split, i, cell])


def read_predictions(path: Path, recommendation: bool):
    split = None
    preds = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["split", "row", "prediction"]:
            raise Failure(f"{path}: expected header split,row,prediction")
        for row in reader:
            split = split or row[0]
            if recommendation:
                preds.append([int(x) for x in row[2].split("|") if x])
            else:
                preds.append(float(row[2]))
    return split, preds


# -- commands --------------------------------------------------------------------

def cmd_validate(a, rm: RunManifest):
    mpath = _require(a.manifest)
    rm.config(mpath)
    db = load_database(load_manifest(mpath))
    rep = validate(db)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    if a.strict and rep.total_dangling:
        raise Failure(f"{rep.total_dangling} dangling foreign keys")


def cmd_build_graph(a, rm: RunManifest):
    mpath = _require(a.manifest)
    rm.config(mpath)
    db = load_database(load_manifest(mpath))
    if a.permute_edges is not None:
        rm.seed("permute_edges", a.permute_edges)
        g = build_graph(db, "permuted", seed=a.permute_edges)
    else:
        g = build_graph(db)
    Path(a.output).parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, a.output)
    rm.artifact(a.output)
    summary = {"node_counts": g.node_counts, "edges": {et.name: g.num_edges(et) for et in g.edge_types},
               "edge_policy": "permuted" if a.permute_edges is not None else "normal"}
    print(json.dumps(summary, sort_keys=True))


def cmd_make_task(a, rm: RunManifest):
    mpath, tpath = _require(a.manifest), _require(a.task)
    rm.config(mpath)
    rm.config(tpath)
    db = load_database(load_manifest(mpath))
    spec = load_task_spec(tpath)
    split = SplitConfig(a.val_ts, a.test_ts)
    tables = make_training_table(db, spec, split)
    for t in tables.values():
        if not leakage_guard(t, split):
            raise Failure(f"leakage guard failed on split {t.split}")
    out = save_task_dir(a.output, spec, split, tables, mpath)
    for name in ("task.json", "stats.json", "train.csv", "val.csv", "test.csv"):
        rm.artifact(out / name)
    print((out / "stats.json").read_text(encoding="utf-8").replace("\n", " ").strip())
    return out


def _task_db(td):
    if not td.manifest_path:
        raise UsageError("task directory does not record a database manifest")
    return load_database(load_manifest(td.manifest_path))


def cmd_baseline(a, rm: RunManifest):
    td = load_task_dir(_require(a.task_dir))
    if a.kind not in baselines.KINDS:
        raise UsageError(f"unknown baseline {a.kind!r}; choose from {', '.join(baselines.KINDS)}")
    db = _task_db(td)
    p = baselines.fit(a.kind, td.tables["train"], db)
    out = Path(a.output or Path(a.task_dir) / f"baseline_{a.kind}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in ("val", "test"):
        t = td.tables.get(split)
        if t is None or len(t) == 0:
            continue
        preds = baselines.predict(p, t, db)
        write_predictions(out / f"predictions_{split}.csv", t, preds)
        rep = evaluate(t, preds)
        rep.extra = {"model": f"baseline-{a.kind}", "ablation": "none", "seed": 0}
        rows.append(rep.to_dict())
        print(rep.to_json())
        rm.artifact(out / f"predictions_{split}.csv")
    _write_jsonl(out / "metrics.jsonl", rows)
    rm.artifact(out / "metrics.jsonl")
    return out


def load_model_config(task_type: str, path=None, ablate=None, seed=None) -> ModelConfig:
    overrides = _read_json(path) if path else {}
    head = overrides.get("head", {}).get("head_type")
    cfg = merge_config(default_config(task_type, head), overrides)
    if ablate:
        cfg = merge_config(cfg, ABLATIONS[ablate])
    if seed is not None:
        cfg = merge_config(cfg, {"train": {"rng_seed": seed}})
    return cfg


def cmd_train(a, rm: RunManifest):
    g = load_graph(_require(a.graph))
    td = load_task_dir(_require(a.task_dir))
    db = _task_db(td)
    attach_features(g, db)
    if a.config:
        rm.config(a.config)
    cfg = load_model_config(td.spec.task_type, a.config, a.ablate, a.seed)
    rm.seed("train", cfg.train.rng_seed)
    for t in td.tables.values():
        if not leakage_guard(t, td.split):
            raise Failure(f"leakage guard failed on split {t.split}")
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    tags = {"model": f"rdl-{cfg.head.head_type}", "ablation": a.ablate or "none", "seed": cfg.train.rng_seed}
    res = train(g, td.tables, cfg, fit_until=td.split.val_timestamp)
    meta = {"config": cfg.to_dict(), "featurizers": res.featurizer_states, "popularity": res.popularity,
            "task": td.spec.to_dict(), "best_epoch": res.best_epoch}
    (out / "model.rpm").write_bytes(params_to_bytes(res.params, meta))
    rows = []
    for rep in res.history:
        d = rep.to_dict()
        d.update(tags, kind="epoch")
        rows.append(d)
    trainer = Trainer(g, td.tables, cfg, feats=None, fit_until=td.split.val_timestamp)
    for split in ("val", "test"):
        t = td.tables.get(split)
        if t is None or len(t) == 0:
            continue
        preds = trainer.predict(res.params, t)
        write_predictions(out / f"predictions_{split}.csv", t, preds)
        rep = evaluate(t, preds)
        d = rep.to_dict()
        d.update(tags, kind="final", best_epoch=res.best_epoch, **res.flags)
        rows.append(d)
        print(json.dumps(d, sort_keys=True))
        rm.artifact(out / f"predictions_{split}.csv")
    _write_jsonl(out / "metrics.jsonl", rows)
    for name in ("model.rpm", "metrics.jsonl"):
        rm.artifact(out / name)
    return out


def cmd_evaluate(a, rm: RunManifest):
    td = load_task_dir(_require(a.task_dir))
    split, preds = read_predictions(_require(a.predictions), td.spec.task_type == "recommendation")
    split = a.split or split or "test"
    if split not in td.tables:
        raise UsageError(f"task directory has no {split!r} split")
    try:
        rep = evaluate(td.tables[split], preds)
    except ValueError as e:
        raise Failure(str(e)) from None
    print(rep.to_json())


def cmd_synth(a, rm: RunManifest):
    cfg_path = _require(a.config)
    rm.config(cfg_path)
    try:
        cfg = SynthConfig.from_dict(_read_json(cfg_path))
    except TypeError as e:
        raise Failure(f"{cfg_path}: {e}") from None
    rm.seed("synth", cfg.rng_seed)
    data = generate(cfg)
    out = Path(a.output)
    write_synth(data, out)
    for p in sorted(out.iterdir()):
        rm.artifact(p)
    print(json.dumps({"row_counts": data.db.row_counts(), "task": data.task.name,
                      "val_timestamp": data.split.val_timestamp, "test_timestamp": data.split.test_timestamp},
                     sort_keys=True))
    return out


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and population std of final metrics, grouped by task, split, metric, model and ablation."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        if r.get("kind", "final") != "final":
            continue
        key = (r["task"], r["split"], r["metric"], r.get("model", "?"), r.get("ablation", "none"))
        groups[key].append(float(r["value"]))
    out = []
    for key in sorted(groups):
        v = np.array(groups[key])
        out.append({"task": key[0], "split": key[1], "metric": key[2], "model": key[3], "ablation": key[4],
                    "mean": float(v.mean()), "std": float(v.std()), "n_runs": len(v)})
    return out


def cmd_report(a, rm: RunManifest):
    root = _require(a.run_dir)
    rows = []
    for p in sorted(root.rglob("metrics.jsonl")):
        with open(p, encoding="utf-8") as fh:
            rows.extend(json.loads(line) for line in fh if line.strip())
    if not rows:
        raise Failure(f"no metrics.jsonl files under {root}")
    summary = aggregate(rows)
    for s in summary:
        print(json.dumps(s, sort_keys=True))
    if a.output:
        _write_jsonl(Path(a.output), summary)
        rm.artifact(a.output)


# -- dispatch --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relgraph", description="Relational deep learning pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("validate", help="load a database and print a validation report")
    s.add_argument("manifest")
    s.add_argument("--strict", action="store_true", help="fail on dangling foreign keys")

    s = sub.add_parser("build-graph", help="convert a database into an RGH1 graph snapshot")
    s.add_argument("manifest")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--permute-edges", type=int, metavar="SEED")

    s = sub.add_parser("make-task", help="generate train/val/test training tables")
    s.add_argument("manifest")
    s.add_argument("task")
    s.add_argument("--val-ts", type=int, required=True)
    s.add_argument("--test-ts", type=int, required=True)
    s.add_argument("-o", "--output", required=True)

    s = sub.add_parser("baseline", help="fit a baseline and score val/test")
    s.add_argument("kind")
    s.add_argument("task_dir")
    s.add_argument("-o", "--output")

    s = sub.add_parser("train", help="train the GNN and score val/test")
    s.add_argument("graph")
    s.add_argument("task_dir")
    s.add_argument("--config")
    s.add_argument("--ablate", choices=sorted(ABLATIONS))
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--output", default="run")

    s = sub.add_parser("evaluate", help="score a predictions CSV against a task split")
    s.add_argument("predictions")
    s.add_argument("task_dir")
    s.add_argument("--split", choices=["train", "val", "test"])

    s = sub.add_parser("synth", help="generate a synthetic database with a planted signal")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)

    s = sub.add_parser("report", help="aggregate metrics.jsonl files under a run directory")
    s.add_argument("run_dir")
    s.add_argument("-o", "--output")
    return p


COMMANDS = {
    "validate": cmd_validate, "build-graph": cmd_build_graph, "make-task": cmd_make_task,
    "baseline": cmd_baseline, "train": cmd_train, "evaluate": cmd_evaluate, "synth": cmd_synth,
    "report": cmd_report,
}


def _limit_threads():
    n = os.environ.get("RELGRAPH_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(int(n), 1))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(argv)
        if a.command is None:
            raise UsageError("relgraph: a command is required")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    rm = RunManifest(a.command, argv)
    limits = _limit_threads()
    try:
        out = COMMANDS[a.command](a, rm)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (Failure, SchemaError, DataError, TaskError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        if limits is not None:
            limits.unregister()
    rm.finish(out if isinstance(out, Path) and out.is_dir() else None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
