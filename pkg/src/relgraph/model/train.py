"""Minibatch training, per-epoch validation and prediction for all three heads.

Random streams are derived from ``TrainConfig.rng_seed`` through
``SeedSequence([seed, stream, ...])``:

    0            parameter initialization
    1, epoch     row shuffling
    2, epoch, b  neighbor sampling for training batch b
    3, epoch     BPR negatives
    4, split, b  neighbor sampling at evaluation (fixed across epochs)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..baselines import pad_ranking, popularity_ranking
from ..graph import NULL_TIME, HeteroTemporalGraph, NodeRef
from ..metrics import EvalReport, evaluate, higher_is_better
from ..sampler import SamplerConfig, sample
from ..tasks import TrainingTable
from . import losses
from .config import ModelConfig
from .network import (
    Batch, build_node_features, encode, encode_backward, gnn_backward, gnn_forward, init_params, make_batch,
    mlp_backward, mlp_forward, tower_backward, tower_forward,
)
from .optim import Adam

SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


class TrainingDiverged(RuntimeError):
    pass


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def sampler_config(cfg: ModelConfig) -> SamplerConfig:
    return SamplerConfig(num_layers=max(cfg.gnn.num_layers, 1), fanout=cfg.train.num_neighbors,
                         strategy=cfg.train.sampling, batch_size=cfg.train.batch_size, rng_seed=cfg.train.rng_seed)


# -- per-head losses on one batch ------------------------------------------------

def _backbone(params, batch: Batch, cfg: ModelConfig, identity=False):
    h0, ce = encode(params, batch, cfg.encoder, identity=identity)
    h, cg = gnn_forward(params, batch, h0, cfg.gnn)
    return h, (ce, cg)


def _backbone_backward(dh, cache, params, batch, grads):
    ce, cg = cache
    dh0 = gnn_backward(dh, cg, params, batch, grads)
    encode_backward(dh0, ce, params, batch, grads)


def _zeros_like(h):
    return {t: np.zeros_like(v) for t, v in h.items()}


def entity_loss(params, batch: Batch, cfg: ModelConfig, y: np.ndarray, task_type: str):
    """Loss and gradients of the MLP entity head over the batch roots, in root order."""
    h, cache = _backbone(params, batch, cfg)
    t = batch.sg.seed_refs[0].node_type
    loc = batch.sg.seed_local
    out, ch = mlp_forward(params, h[t][loc])
    if task_type == "entity_classification":
        loss, dout = losses.bce_with_logits(out, y)
    else:
        loss, dout = losses.l1(out, y)
    grads: dict = {}
    dx = mlp_backward(dout.astype(out.dtype), ch, params, grads)
    dh = _zeros_like(h)
    np.add.at(dh[t], loc, dx)
    _backbone_backward(dh, cache, params, batch, grads)
    return loss, grads


def pair_loss(params, batch: Batch, cfg: ModelConfig, n_src: int):
    """BPR over roots laid out as [sources | positives | negatives], ``n_src`` each."""
    h, cache = _backbone(params, batch, cfg)
    refs, loc = batch.sg.seed_refs, batch.sg.seed_local
    s_t, d_t = refs[0].node_type, refs[n_src].node_type
    i_s, i_p, i_n = loc[:n_src], loc[n_src:2 * n_src], loc[2 * n_src:]
    q, xs = tower_forward(params, "src", h[s_t][i_s])
    kp, xp = tower_forward(params, "dst", h[d_t][i_p])
    kn, xn = tower_forward(params, "dst", h[d_t][i_n])
    pos, neg = np.sum(q * kp, axis=1), np.sum(q * kn, axis=1)
    loss, gp, gn = losses.bpr(pos, neg)
    gp, gn = gp.astype(q.dtype)[:, None], gn.astype(q.dtype)[:, None]
    grads: dict = {}
    dh = _zeros_like(h)
    np.add.at(dh[s_t], i_s, tower_backward(gp * kp + gn * kn, xs, "src", params, grads))
    np.add.at(dh[d_t], i_p, tower_backward(gp * q, xp, "dst", params, grads))
    np.add.at(dh[d_t], i_n, tower_backward(gn * q, xn, "dst", params, grads))
    _backbone_backward(dh, cache, params, batch, grads)
    return loss, grads


def idgnn_candidates(batch: Batch, dst_type: str) -> np.ndarray:
    """Local dst-type nodes scored by the ID-GNN head: everything but the roots themselves."""
    sg = batch.sg
    if sg.num_nodes(dst_type) == 0:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(sg.node_hop[dst_type] > 0)


def idgnn_labels(batch: Batch, dst_type: str, truth: list) -> tuple[np.ndarray, np.ndarray, dict]:
    sg = batch.sg
    cand = idgnn_candidates(batch, dst_type)
    if len(cand) == 0:
        return cand, np.empty(0), {"skipped_rows": sg.num_roots, "unreachable_positive": 0}
    roots = sg.node_root[dst_type][cand]
    glob = sg.node_index[dst_type][cand]
    keys = {(int(r), int(d)) for r, dsts in enumerate(truth) for d in dsts}
    y = np.array([(int(r), int(d)) in keys for r, d in zip(roots, glob)], dtype=np.float64)
    has_cand = np.zeros(sg.num_roots, dtype=bool)
    has_cand[roots] = True
    has_pos = np.zeros(sg.num_roots, dtype=bool)
    has_pos[roots[y > 0]] = True
    info = {"skipped_rows": int((~has_cand).sum()), "unreachable_positive": int((has_cand & ~has_pos).sum())}
    return cand, y, info


def idgnn_loss(params, batch: Batch, cfg: ModelConfig, dst_type: str, truth: list):
    cand, y, info = idgnn_labels(batch, dst_type, truth)
    h, cache = _backbone(params, batch, cfg, identity=True)
    if len(cand) == 0:
        return 0.0, {}, info
    out, ch = mlp_forward(params, h[dst_type][cand])
    loss, dout = losses.bce_with_logits(out, y)
    grads: dict = {}
    dx = mlp_backward(dout.astype(out.dtype), ch, params, grads)
    dh = _zeros_like(h)
    np.add.at(dh[dst_type], cand, dx)
    _backbone_backward(dh, cache, params, batch, grads)
    return loss, grads, info


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    config: ModelConfig
    history: list[EvalReport]
    best_epoch: int
    featurizer_states: dict
    popularity: list[int] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def best(self) -> EvalReport:
        return self.history[self.best_epoch]


def dst_first_active(g: HeteroTemporalGraph, dst_type: str) -> np.ndarray:
    """Earliest timestamp among each destination's neighbors (int64 max if none)."""
    big = np.iinfo(np.int64).max
    first = np.full(g.node_counts[dst_type], big, dtype=np.int64)
    for et in g.edge_types_from(dst_type):
        csr = g.adjacency[et]
        if csr.num_edges == 0:
            continue
        src = np.repeat(np.arange(g.node_counts[dst_type]), csr.degrees())
        t = g.node_times[et.dst_type][csr.targets]
        ok = t != NULL_TIME
        np.minimum.at(first, src[ok], t[ok])
    return first


def _pairs(table: TrainingTable) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(len(table)), [len(t) for t in table.target])
    dsts = np.concatenate([np.asarray(t, dtype=np.int64) for t in table.target]) if len(rows) else rows
    return rows, dsts


def _negatives(rng, seed_times: np.ndarray, first_active: np.ndarray) -> np.ndarray:
    order = np.argsort(first_active, kind="stable")
    sorted_first = first_active[order]
    n_ok = np.searchsorted(sorted_first, seed_times, side="right")
    if np.any(n_ok == 0):
        n_ok = np.maximum(n_ok, 1)
    return order[(rng.random(len(seed_times)) * n_ok).astype(np.int64)]


class Trainer:
    def __init__(self, g: HeteroTemporalGraph, tables: dict[str, TrainingTable], cfg: ModelConfig,
                 feats=None, fit_until: int | None = None, dtype=np.float32):
        train = tables["train"]
        self.g, self.tables, self.cfg, self.dtype = g, tables, cfg, dtype
        self.task_type = train.task_type
        self.head = cfg.head.head_type
        if (self.task_type == "recommendation") != (self.head != "mlp_entity"):
            raise ValueError(f"head {self.head!r} does not fit task type {self.task_type!r}")
        if cfg.encoder.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        self.feats = feats if feats is not None else build_node_features(g, fit_until=fit_until)
        self.scfg = sampler_config(cfg)
        self.popularity = popularity_ranking(train) if train.is_recommendation else []
        self.flags = {"skipped_rows": 0, "unreachable_positive": 0}
        if self.head == "two_tower":
            self.first_active = dst_first_active(g, train.dst_type)

    def batch(self, seeds, rng) -> Batch:
        sg = sample(self.g, seeds, self.scfg, rng)
        return make_batch(sg, self.g, self.feats, self.cfg.encoder, self.cfg.gnn, self.dtype)

    # one epoch of updates; returns mean batch loss
    def epoch(self, params, opt: Adam, epoch: int) -> float:
        seed, bs = self.cfg.train.rng_seed, self.cfg.train.batch_size
        t = self.tables["train"]
        if self.head == "two_tower":
            rows, dsts = _pairs(t)
            negs = _negatives(_rng(seed, 3, epoch), t.seed_time[rows], self.first_active)
            units = len(rows)
        else:
            units = len(t)
        self.flags = {"skipped_rows": 0, "unreachable_positive": 0}
        order = _rng(seed, 1, epoch).permutation(units)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, units, bs)):
            idx = np.sort(order[start:start + bs])
            rng = _rng(seed, 2, epoch, b)
            if self.head == "mlp_entity":
                sub = t.subset(idx)
                loss, grads = entity_loss(params, self.batch(sub.seeds(), rng), self.cfg, sub.target, self.task_type)
            elif self.head == "two_tower":
                r = rows[idx]
                times = t.seed_time[r]
                seeds = [(NodeRef(t.entity_type, int(e)), int(s)) for e, s in zip(t.entity[r], times)]
                seeds += [(NodeRef(t.dst_type, int(d)), int(s)) for d, s in zip(dsts[idx], times)]
                seeds += [(NodeRef(t.dst_type, int(d)), int(s)) for d, s in zip(negs[idx], times)]
                loss, grads = pair_loss(params, self.batch(seeds, rng), self.cfg, len(idx))
            else:
                sub = t.subset(idx)
                loss, grads, info = idgnn_loss(params, self.batch(sub.seeds(), rng), self.cfg, t.dst_type, sub.target)
                for k, v in info.items():
                    self.flags[k] += v
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}")
            if grads:
                opt.step(params, grads)
            total += loss
            count += 1
        return total / max(count, 1)

    # -- inference --

    def embed_roots(self, params, seeds, split: str, stream: int = 0) -> np.ndarray:
        """Final embeddings of the given (node, time) roots, computed in batches."""
        out = []
        seed, bs = self.cfg.train.rng_seed, self.cfg.train.batch_size
        for b, start in enumerate(range(0, len(seeds), bs)):
            chunk = seeds[start:start + bs]
            batch = self.batch(chunk, _rng(seed, 4, SPLIT_CODE[split], stream, b))
            h, _ = _backbone(params, batch, self.cfg)
            t = chunk[0][0].node_type
            out.append(h[t][batch.sg.seed_local])
        return np.concatenate(out) if out else np.zeros((0, self.cfg.encoder.hidden_dim))

    def predict(self, params, table: TrainingTable):
        if self.head == "mlp_entity":
            return self._predict_entity(params, table)
        if self.head == "two_tower":
            return self._predict_two_tower(params, table)
        return self._predict_idgnn(params, table)

    def _predict_entity(self, params, table):
        seed, bs = self.cfg.train.rng_seed, self.cfg.train.batch_size
        preds = []
        seeds = table.seeds()
        for b, start in enumerate(range(0, len(seeds), bs)):
            batch = self.batch(seeds[start:start + bs], _rng(seed, 4, SPLIT_CODE[table.split], 0, b))
            h, _ = _backbone(params, batch, self.cfg)
            t = seeds[0][0].node_type
            out, _ = mlp_forward(params, h[t][batch.sg.seed_local])
            preds.append(out.astype(np.float64))
        out = np.concatenate(preds) if preds else np.zeros(0)
        if self.task_type == "entity_classification":
            out = losses._sigmoid(out)
        return out

    def _predict_two_tower(self, params, table):
        k = table.K
        preds: list = [None] * len(table)
        dst_times = self.g.node_times[table.dst_type]
        for j, st in enumerate(np.unique(table.seed_time)):
            rows = np.flatnonzero(table.seed_time == st)
            src = [(NodeRef(table.entity_type, int(table.entity[r])), int(st)) for r in rows]
            cand = np.flatnonzero((dst_times == NULL_TIME) | (dst_times <= st))
            dst = [(NodeRef(table.dst_type, int(d)), int(st)) for d in cand]
            q = tower_forward(params, "src", self.embed_roots(params, src, table.split, 2 * j))[0]
            kd = tower_forward(params, "dst", self.embed_roots(params, dst, table.split, 2 * j + 1))[0]
            scores = (q @ kd.T).astype(np.float64)
            for i, r in enumerate(rows):
                order = np.lexsort((cand, -scores[i]))
                preds[r] = pad_ranking([int(c) for c in cand[order[:k]]], self.popularity, k)
        return preds

    def _predict_idgnn(self, params, table):
        seed, bs = self.cfg.train.rng_seed, self.cfg.train.batch_size
        k, dst_type = table.K, table.dst_type
        preds = []
        seeds = table.seeds()
        for b, start in enumerate(range(0, len(seeds), bs)):
            batch = self.batch(seeds[start:start + bs], _rng(seed, 4, SPLIT_CODE[table.split], 0, b))
            ranked = score_batch_idgnn(params, batch, self.cfg, dst_type)
            preds.extend(pad_ranking(r, self.popularity, k) for r in ranked)
        return preds

    def evaluate(self, params, table: TrainingTable) -> EvalReport:
        return evaluate(table, self.predict(params, table))


def score_batch_idgnn(params, batch: Batch, cfg: ModelConfig, dst_type: str) -> list[list[int]]:
    """Per root, in-subgraph destinations ordered by descending logit (ties: smaller index)."""
    sg = batch.sg
    h, _ = _backbone(params, batch, cfg, identity=True)
    out: list[list[int]] = [[] for _ in range(sg.num_roots)]
    cand = idgnn_candidates(batch, dst_type)
    if len(cand) == 0:
        return out
    logits = mlp_forward(params, h[dst_type][cand])[0].astype(np.float64)
    roots = sg.node_root[dst_type][cand]
    glob = sg.node_index[dst_type][cand]
    order = np.lexsort((glob, -logits, roots))
    for i in order:
        out[int(roots[i])].append(int(glob[i]))
    return out


def train(g: HeteroTemporalGraph, tables: dict[str, TrainingTable], cfg: ModelConfig, feats=None,
          fit_until: int | None = None, log=None) -> TrainResult:
    """Train with per-epoch validation; returns the parameters of the best validation epoch."""
    trainer = Trainer(g, tables, cfg, feats=feats, fit_until=fit_until)
    params = init_params(g, trainer.feats, cfg, _rng(cfg.train.rng_seed, 0))
    tc = cfg.train
    opt = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    history: list[EvalReport] = []
    best_params, best_epoch, best_value = copy.deepcopy(params), 0, None
    val = tables.get("val")
    for epoch in range(tc.max_epochs):
        train_loss = trainer.epoch(params, opt, epoch)
        if val is not None and len(val):
            rep = trainer.evaluate(params, val)
        else:
            rep = EvalReport(tables["train"].task_name, "val", "loss", train_loss, 0)
        rep.extra = {"epoch": epoch, "train_loss": train_loss}
        history.append(rep)
        if log is not None:
            log(rep)
        better = best_value is None or (rep.value > best_value if higher_is_better(rep.metric) and rep.metric != "loss"
                                        else rep.value < best_value)
        if better:
            best_value, best_epoch, best_params = rep.value, epoch, copy.deepcopy(params)
    states = {t: f.featurizer.state() for t, f in trainer.feats.items()}
    return TrainResult(best_params, cfg, history, best_epoch, states, trainer.popularity, dict(trainer.flags))
