"""Non-learned baselines plus a raw-feature linear model.

Regression/classification: entity mean/median, global mean/median/zero and
``tabular_linear`` (ridge or L2-logistic on the entity row's own columns).
Recommendation: global popularity, past visit and ``tabular_linear`` scoring
(source, candidate) pairs among the 100 most popular destinations.
Ranking ties always break toward the smaller destination index.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .features import TableFeaturizer
from .graph import build_graph_features
from .relational import Database
from .tasks import TrainingTable

ENTITY_KINDS = ("entity_mean", "entity_median", "global_mean", "global_median", "global_zero", "tabular_linear")
REC_KINDS = ("global_popularity", "past_visit", "tabular_linear")
KINDS = tuple(dict.fromkeys(ENTITY_KINDS + REC_KINDS))
N_CANDIDATES = 100


@dataclass
class BaselinePredictor:
    kind: str
    task_type: str
    state: dict = field(default_factory=dict)


def _rank_by_count(counts: Counter) -> list[int]:
    return [d for d, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def popularity_ranking(train: TrainingTable) -> list[int]:
    counts = Counter()
    for dsts in train.target:
        counts.update(int(d) for d in dsts)
    return _rank_by_count(counts)


def pad_ranking(head: list[int], fill: list[int], k: int) -> list[int]:
    out = list(head[:k])
    seen = set(out)
    for d in fill:
        if len(out) >= k:
            break
        if d not in seen:
            out.append(d)
            seen.add(d)
    return out


class _EntityFeatures:
    """Design matrix for entity rows: standardized dense block, one-hot categoricals, bias."""

    def __init__(self, db: Database, table: str, fit_rows: np.ndarray):
        self.columns = build_graph_features(db)[table]
        self.featurizer = TableFeaturizer(self.columns, fit_rows=np.unique(fit_rows))

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        dense, codes = self.featurizer.transform(self.columns, rows)
        blocks = [dense]
        for j, size in enumerate(self.featurizer.vocab_sizes):
            blocks.append(np.eye(size)[codes[:, j]])
        blocks.append(np.ones((len(rows), 1)))
        return np.concatenate(blocks, axis=1)


def _fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1.0, iters: int = 50) -> np.ndarray:
    """Newton-Raphson for L2-regularized logistic regression; last column is an unpenalized bias."""
    w = np.zeros(X.shape[1])
    reg = np.full(X.shape[1], l2)
    reg[-1] = 0.0
    for _ in range(iters):
        z = X @ w
        p = 1.0 / (1.0 + np.exp(-z))
        grad = X.T @ (p - y) + reg * w
        hess = (X * (p * (1 - p))[:, None]).T @ X + np.diag(reg + 1e-9)
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-8:
            break
    return w


def _fit_ridge(X: np.ndarray, y: np.ndarray, l2: float = 1.0) -> np.ndarray:
    reg = np.full(X.shape[1], l2)
    reg[-1] = 0.0
    return np.linalg.solve(X.T @ X + np.diag(reg + 1e-9), X.T @ y)


def _history(train: TrainingTable):
    """Per-entity destination counts over the whole training table."""
    hist: dict[int, Counter] = defaultdict(Counter)
    for e, dsts in zip(train.entity, train.target):
        hist[int(e)].update(int(d) for d in dsts)
    return hist


def _pair_features(src_x, dst_x, pop_rank, visit_counts):
    pop = -np.log1p(pop_rank)[:, None]
    visits = np.log1p(visit_counts)[:, None]
    return np.concatenate([src_x[:, :-1], dst_x[:, :-1], pop, visits, (visit_counts > 0)[:, None],
                           np.ones((len(pop), 1))], axis=1)


def fit(kind: str, train: TrainingTable, db: Database | None = None) -> BaselinePredictor:
    if len(train) == 0:
        raise ValueError("cannot fit a baseline on an empty training table")
    rec = train.is_recommendation
    if kind not in (REC_KINDS if rec else ENTITY_KINDS):
        raise ValueError(f"baseline {kind!r} does not apply to {train.task_type} tasks")
    p = BaselinePredictor(kind, train.task_type)
    if not rec:
        y = np.asarray(train.target, dtype=np.float64)
        p.state["global_mean"] = float(y.mean())
        p.state["global_median"] = float(np.median(y))
        if kind in ("entity_mean", "entity_median"):
            agg = np.mean if kind == "entity_mean" else np.median
            per = defaultdict(list)
            for e, v in zip(train.entity, y):
                per[int(e)].append(v)
            p.state["per_entity"] = {e: float(agg(v)) for e, v in per.items()}
        elif kind == "tabular_linear":
            if db is None:
                raise ValueError("tabular_linear needs the database for raw features")
            feats = _EntityFeatures(db, train.entity_type, train.entity)
            X = feats(train.entity)
            if train.task_type == "entity_classification":
                p.state["w"] = _fit_logistic(X, y)
            else:
                p.state["w"] = _fit_ridge(X, y)
            p.state["features"] = feats
        return p

    p.state["popularity"] = popularity_ranking(train)
    p.state["K"] = train.K
    if kind == "past_visit":
        p.state["history"] = _history(train)
    elif kind == "tabular_linear":
        if db is None:
            raise ValueError("tabular_linear needs the database for raw features")
        cands = np.array(p.state["popularity"][:N_CANDIDATES], dtype=np.int64)
        pop_rank = np.arange(len(cands), dtype=np.float64)
        src_f = _EntityFeatures(db, train.entity_type, train.entity)
        dst_f = _EntityFeatures(db, train.dst_type, cands)
        dst_x = dst_f(cands)
        rng = np.random.default_rng(0)
        rows = np.arange(len(train))
        if len(rows) > 2000:
            rows = np.sort(rng.choice(rows, 2000, replace=False))
        # visit counts use only rows with an earlier seed time, so training features are leak-free
        order = np.argsort(train.seed_time, kind="stable")
        running: dict[int, Counter] = defaultdict(Counter)
        feats_at: dict[int, Counter] = {}
        chosen = set(rows.tolist())
        i = 0
        while i < len(order):
            j = i
            t = train.seed_time[order[i]]
            while j < len(order) and train.seed_time[order[j]] == t:
                j += 1
            for r in order[i:j]:
                if int(r) in chosen:
                    feats_at[int(r)] = Counter(running[int(train.entity[r])])
            for r in order[i:j]:
                running[int(train.entity[r])].update(int(d) for d in train.target[r])
            i = j
        Xs, ys = [], []
        for r in rows:
            e = int(train.entity[r])
            src_x = np.repeat(src_f(np.array([e])), len(cands), axis=0)
            visits = np.array([feats_at[int(r)].get(int(c), 0) for c in cands], dtype=np.float64)
            Xs.append(_pair_features(src_x, dst_x, pop_rank, visits))
            truth = set(int(d) for d in train.target[r])
            ys.append(np.array([int(c) in truth for c in cands], dtype=np.float64))
        p.state.update(w=_fit_logistic(np.concatenate(Xs), np.concatenate(ys)), candidates=cands,
                       src_features=src_f, dst_x=dst_x, history=_history(train))
    return p


def predict(p: BaselinePredictor, rows: TrainingTable, db: Database | None = None):
    """Scores (entity tasks) or top-K destination lists (recommendation), aligned with ``rows``."""
    n = len(rows)
    if p.task_type != "recommendation":
        if p.kind == "global_zero":
            return np.zeros(n)
        if p.kind in ("global_mean", "global_median"):
            return np.full(n, p.state[p.kind])
        if p.kind in ("entity_mean", "entity_median"):
            fallback = p.state["global_mean" if p.kind == "entity_mean" else "global_median"]
            per = p.state["per_entity"]
            return np.array([per.get(int(e), fallback) for e in rows.entity])
        X = p.state["features"](rows.entity)
        z = X @ p.state["w"]
        if p.task_type == "entity_classification":
            return 1.0 / (1.0 + np.exp(-z))
        return z

    k = p.state["K"]
    pop = p.state["popularity"]
    if p.kind == "global_popularity":
        top = pop[:k]
        return [list(top) for _ in range(n)]
    hist = p.state["history"]
    if p.kind == "past_visit":
        out = []
        for e in rows.entity:
            ranked = _rank_by_count(hist.get(int(e), Counter()))
            out.append(pad_ranking(ranked, pop, k))
        return out
    cands = p.state["candidates"]
    pop_rank = np.arange(len(cands), dtype=np.float64)
    out = []
    for e in rows.entity:
        src_x = np.repeat(p.state["src_features"](np.array([int(e)])), len(cands), axis=0)
        h = hist.get(int(e), Counter())
        visits = np.array([h.get(int(c), 0) for c in cands], dtype=np.float64)
        scores = _pair_features(src_x, p.state["dst_x"], pop_rank, visits) @ p.state["w"]
        order = np.lexsort((cands, -scores))
        out.append(pad_ranking([int(c) for c in cands[order]], pop, k))
    return out
