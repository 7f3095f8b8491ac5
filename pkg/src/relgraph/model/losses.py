"""Losses with their gradients with respect to the predictions."""

from __future__ import annotations

import numpy as np


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite loss input")


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits, labels) -> tuple[float, np.ndarray]:
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    _check_finite(z, y)
    n = max(len(z), 1)
    loss = float(np.sum(_softplus(z) - z * y) / n)
    return loss, (_sigmoid(z) - y) / n


def l1(preds, targets) -> tuple[float, np.ndarray]:
    p = np.asarray(preds)
    t = np.asarray(targets, dtype=p.dtype)
    _check_finite(p, t)
    n = max(len(p), 1)
    return float(np.sum(np.abs(p - t)) / n), np.sign(p - t) / n


def bpr(pos, neg) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of -ln sigmoid(pos - neg); returns gradients for both score arrays."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    _check_finite(pos, neg)
    n = max(len(pos), 1)
    diff = pos - neg
    g = -_sigmoid(-diff) / n
    return float(np.sum(_softplus(-diff)) / n), g, -g


def loss_entity(pred, target, task_type: str) -> float:
    if task_type == "entity_classification":
        return bce_with_logits(pred, target)[0]
    if task_type == "entity_regression":
        return l1(pred, target)[0]
    raise ValueError(f"no entity loss for {task_type!r}")


def loss_bpr(pos_score, neg_score) -> float:
    return bpr(pos_score, neg_score)[0]
