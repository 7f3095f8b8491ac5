"""Evaluation metrics: AUROC, MAE and MAP@K."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks, so tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: labels contain a single class")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae of empty input")
    return float(np.mean(np.abs(p - t)))


def average_precision_at_k(pred: Sequence, truth: set, k: int) -> float:
    hits = 0
    total = 0.0
    for r, item in enumerate(list(pred)[:k], start=1):
        if item in truth:
            hits += 1
            total += hits / r
    return total / min(len(truth), k)


def map_at_k(pred_lists: Sequence[Sequence], truth_sets: Sequence, k: int) -> float:
    """Mean AP@k over rows with non-empty truth."""
    if len(pred_lists) != len(truth_sets):
        raise ValueError("row count mismatch")
    aps = []
    for pred, truth in zip(pred_lists, truth_sets):
        truth = set(int(x) for x in truth)
        if not truth:
            continue
        pred = [int(x) for x in pred]
        if len(pred) > k:
            raise ValueError(f"prediction list longer than K={k}")
        if len(set(pred)) != len(pred):
            raise ValueError("prediction list has duplicates")
        aps.append(average_precision_at_k(pred, truth, k))
    if not aps:
        raise ValueError("MAP@K undefined: every truth set is empty")
    return float(np.mean(aps))


@dataclass
class EvalReport:
    task: str
    split: str
    metric: str
    value: float
    n: int
    K: int | None = None
    extra: dict | None = None

    def __post_init__(self):
        if self.metric in ("auroc", "map_at_k") and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} out of range: {self.value}")
        if self.metric == "mae" and self.value < 0:
            raise ValueError("negative MAE")

    def to_dict(self) -> dict:
        d = {"task": self.task, "split": self.split, "metric": self.metric,
             "value": self.value, "n": self.n}
        if self.K is not None:
            d["K"] = self.K
        if self.extra:
            d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


METRIC_FOR_TASK = {
    "entity_classification": "auroc",
    "entity_regression": "mae",
    "recommendation": "map_at_k",
}


def higher_is_better(metric: str) -> bool:
    return metric != "mae"


def evaluate(table, predictions) -> EvalReport:
    """Score predictions aligned with the rows of a training table."""
    if len(predictions) != len(table):
        raise ValueError(f"row count mismatch: {len(predictions)} predictions for {len(table)} rows")
    metric = METRIC_FOR_TASK[table.task_type]
    if metric == "auroc":
        value = auroc(predictions, table.target)
    elif metric == "mae":
        value = mae(predictions, table.target)
    else:
        value = map_at_k(predictions, table.target, table.K)
    return EvalReport(table.task_name, table.split, metric, value, len(table),
                      table.K if metric == "map_at_k" else None)
