"""Tabular encoder, heterogeneous message passing and prediction heads in numpy.

Every forward function returns its output plus a cache; the matching backward
consumes the cache and accumulates parameter gradients into a dict.

Encoder for a node of type T (one set of weights per type)::

    z = x W_in + b_in + sum_c E_c[code_c] + onehot(bucket(dt)) W_time
    h = z + relu(z W_1 + b_1) W_2 + b_2

Message passing layer, for each node type T::

    h'_T = act(h_T W_self + b_self + sum_{et -> T} agg_et(h_src) W_et)

where ``agg_et`` sums (or averages) over the sampled in-neighbors along edge
type ``et``. Forward and reverse edge types carry separate weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..features import TIME_BUCKETS, TableFeaturizer, time_one_hot
from ..graph import NULL_TIME, EdgeType, HeteroTemporalGraph
from ..sampler import SampledSubgraph
from .config import EncoderConfig, GnnConfig, ModelConfig


# -- node features ---------------------------------------------------------------

@dataclass
class NodeFeatures:
    featurizer: TableFeaturizer
    dense: np.ndarray
    codes: np.ndarray

    @property
    def categorical_names(self) -> list[str]:
        return [name for name, _ in self.featurizer.categorical]


def build_node_features(g: HeteroTemporalGraph, fit_until: int | None = None,
                        states: dict | None = None) -> dict[str, NodeFeatures]:
    """Featurize every row of every node type once.

    Normalization statistics and vocabularies are fit on rows timestamped at or
    before ``fit_until`` (plus untimed rows), or restored from ``states``.
    """
    out = {}
    for t in g.node_types:
        cols = g.feature_store.get(t, [])
        if states is not None:
            fz = TableFeaturizer.from_state(states[t])
        else:
            rows = None
            if fit_until is not None:
                times = g.node_times[t]
                rows = np.flatnonzero((times == NULL_TIME) | (times <= fit_until))
            fz = TableFeaturizer(cols, fit_rows=rows)
        if cols:
            dense, codes = fz.transform(cols)
        else:
            dense = np.zeros((g.node_counts[t], 0))
            codes = np.zeros((g.node_counts[t], 0), dtype=np.int64)
        out[t] = NodeFeatures(fz, dense, codes)
    return out


# -- parameters ------------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(g: HeteroTemporalGraph, feats: dict[str, NodeFeatures], cfg: ModelConfig,
                rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, embedding rows uniform in +-1/sqrt(d)."""
    d = cfg.encoder.hidden_dim
    p: dict[str, np.ndarray] = {}
    zeros = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
    for t in g.node_types:
        f = feats[t]
        pre = f"enc.{t}."
        p[pre + "w_in"] = _uniform(rng, (f.dense.shape[1], d), f.dense.shape[1], dtype)
        p[pre + "b_in"] = zeros(d)
        for name, size in zip(f.categorical_names, f.featurizer.vocab_sizes):
            p[pre + f"emb.{name}"] = _uniform(rng, (size, d), d, dtype)
        if cfg.encoder.time_embedding:
            p[pre + "w_time"] = _uniform(rng, (TIME_BUCKETS, d), TIME_BUCKETS, dtype)
        p[pre + "w1"] = _uniform(rng, (d, d), d, dtype)
        p[pre + "b1"] = zeros(d)
        p[pre + "w2"] = _uniform(rng, (d, d), d, dtype)
        p[pre + "b2"] = zeros(d)
    for layer in range(cfg.gnn.num_layers):
        for t in g.node_types:
            p[f"gnn.{layer}.self.{t}.w"] = _uniform(rng, (d, d), d, dtype)
            p[f"gnn.{layer}.self.{t}.b"] = zeros(d)
        for et in g.edge_types:
            p[f"gnn.{layer}.rel.{et.name}.w"] = _uniform(rng, (d, d), d, dtype)
    head = cfg.head.head_type
    if head in ("mlp_entity", "idgnn"):
        p["head.w1"] = _uniform(rng, (d, d), d, dtype)
        p["head.b1"] = zeros(d)
        p["head.w2"] = _uniform(rng, (d, 1), d, dtype)
        p["head.b2"] = zeros(1)
        if head == "idgnn":
            p["head.id_emb"] = _uniform(rng, (d,), d, dtype)
    else:
        for side in ("src", "dst"):
            p[f"head.{side}.w"] = _uniform(rng, (d, d), d, dtype)
            p[f"head.{side}.b"] = zeros(d)
    return dict(sorted(p.items()))


def _acc(grads: dict, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- batch assembly --------------------------------------------------------------

@dataclass
class Batch:
    """Parameter-independent inputs derived from one sampled subgraph."""

    sg: SampledSubgraph
    n: dict[str, int]
    dense: dict[str, np.ndarray]
    codes: dict[str, np.ndarray]
    time_oh: dict[str, np.ndarray]
    adj: dict[EdgeType, sp.csr_matrix] = field(default_factory=dict)
    seed_mask: dict[str, np.ndarray] = field(default_factory=dict)
    cat_names: dict[str, list[str]] = field(default_factory=dict)

    @property
    def types(self) -> list[str]:
        return sorted(t for t, k in self.n.items() if k > 0)


def build_adjacency(sg: SampledSubgraph, n: dict[str, int], aggregation: str, dtype=np.float32) -> dict:
    """Sparse (receiver x sender) matrix per edge type; messages flow src -> dst of each local edge."""
    adj = {}
    for et, (src, dst) in sg.edges.items():
        vals = np.ones(len(src), dtype=dtype)
        a = sp.csr_matrix((vals, (dst, src)), shape=(n[et.dst_type], n[et.src_type]))
        if aggregation == "mean":
            deg = np.asarray(a.sum(axis=1)).ravel()
            a = (sp.diags((1.0 / np.maximum(deg, 1.0)).astype(dtype)) @ a).tocsr()
        adj[et] = a
    return adj


def make_batch(sg: SampledSubgraph, g: HeteroTemporalGraph, feats: dict[str, NodeFeatures],
               enc: EncoderConfig, gnn: GnnConfig, dtype=np.float32) -> Batch:
    n = {t: len(idx) for t, idx in sg.node_index.items()}
    dense, codes, time_oh, seed_mask = {}, {}, {}, {}
    for t, idx in sg.node_index.items():
        dense[t] = feats[t].dense[idx].astype(dtype)
        codes[t] = feats[t].codes[idx]
        if enc.time_embedding:
            nt = g.node_times[t][idx]
            valid = nt != NULL_TIME
            dt = np.where(valid, sg.seed_times[sg.node_root[t]] - np.where(valid, nt, 0), 0)
            time_oh[t] = time_one_hot(dt, valid).astype(dtype)
        seed_mask[t] = sg.seed_mask(t)
    adj = build_adjacency(sg, n, gnn.aggregation, dtype)
    cat_names = {t: feats[t].categorical_names for t in sg.node_index}
    return Batch(sg, n, dense, codes, time_oh, adj, seed_mask, cat_names)


# -- encoder ---------------------------------------------------------------------

def encode(params: dict, batch: Batch, enc: EncoderConfig, identity: bool = False):
    h, cache = {}, {}
    for t in batch.types:
        pre = f"enc.{t}."
        z = np.zeros((batch.n[t], enc.hidden_dim), dtype=params[pre + "b_in"].dtype) + params[pre + "b_in"]
        if not enc.feature_mask:
            z += batch.dense[t] @ params[pre + "w_in"]
            for j, col in enumerate(batch.cat_names[t]):
                z += params[f"{pre}emb.{col}"][batch.codes[t][:, j]]
        if enc.time_embedding:
            z += batch.time_oh[t] @ params[pre + "w_time"]
        if identity:
            z[batch.seed_mask[t]] += params["head.id_emb"]
        a = z @ params[pre + "w1"] + params[pre + "b1"]
        r = np.maximum(a, 0)
        h[t] = z + r @ params[pre + "w2"] + params[pre + "b2"]
        cache[t] = (z, a, r)
    return h, (cache, enc, identity)


def encode_backward(dh: dict, cache, params: dict, batch: Batch, grads: dict):
    cache, enc, identity = cache
    for t, (z, a, r) in cache.items():
        pre = f"enc.{t}."
        g_out = dh[t]
        _acc(grads, pre + "w2", r.T @ g_out)
        _acc(grads, pre + "b2", g_out.sum(axis=0))
        da = (g_out @ params[pre + "w2"].T) * (a > 0)
        _acc(grads, pre + "w1", z.T @ da)
        _acc(grads, pre + "b1", da.sum(axis=0))
        dz = g_out + da @ params[pre + "w1"].T
        _acc(grads, pre + "b_in", dz.sum(axis=0))
        if not enc.feature_mask:
            _acc(grads, pre + "w_in", batch.dense[t].T @ dz)
            for j, col in enumerate(batch.cat_names[t]):
                name = f"{pre}emb.{col}"
                ge = np.zeros_like(params[name])
                np.add.at(ge, batch.codes[t][:, j], dz)
                _acc(grads, name, ge)
        if enc.time_embedding:
            _acc(grads, pre + "w_time", batch.time_oh[t].T @ dz)
        if identity:
            _acc(grads, "head.id_emb", dz[batch.seed_mask[t]].sum(axis=0))


# -- message passing -------------------------------------------------------------

def _act(x, kind):
    return np.maximum(x, 0) if kind == "relu" else x


def gnn_forward(params: dict, batch: Batch, h0: dict, gnn: GnnConfig):
    h = h0
    layers = []
    for layer in range(gnn.num_layers):
        pre, msgs = {}, {}
        for t in batch.types:
            pre[t] = h[t] @ params[f"gnn.{layer}.self.{t}.w"] + params[f"gnn.{layer}.self.{t}.b"]
        for et in sorted(batch.adj):
            a = batch.adj[et]
            if a.nnz == 0:
                continue
            m = np.asarray(a @ h[et.src_type])
            msgs[et] = m
            pre[et.dst_type] += m @ params[f"gnn.{layer}.rel.{et.name}.w"]
        layers.append((h, msgs, pre))
        h = {t: _act(v, gnn.activation) for t, v in pre.items()}
    return h, (layers, gnn)


def gnn_backward(dh: dict, cache, params: dict, batch: Batch, grads: dict) -> dict:
    layers, gnn = cache
    for layer in reversed(range(len(layers))):
        h_in, msgs, pre = layers[layer]
        dpre = {t: dh[t] * (pre[t] > 0) if gnn.activation == "relu" else dh[t] for t in pre}
        dh_in = {}
        for t, g_pre in dpre.items():
            _acc(grads, f"gnn.{layer}.self.{t}.w", h_in[t].T @ g_pre)
            _acc(grads, f"gnn.{layer}.self.{t}.b", g_pre.sum(axis=0))
            dh_in[t] = g_pre @ params[f"gnn.{layer}.self.{t}.w"].T
        for et, m in msgs.items():
            w = params[f"gnn.{layer}.rel.{et.name}.w"]
            g_pre = dpre[et.dst_type]
            _acc(grads, f"gnn.{layer}.rel.{et.name}.w", m.T @ g_pre)
            dh_in[et.src_type] += np.asarray(batch.adj[et].T @ (g_pre @ w.T))
        dh = dh_in
    return dh


# -- heads -----------------------------------------------------------------------

def mlp_forward(params: dict, x: np.ndarray):
    u = x @ params["head.w1"] + params["head.b1"]
    r = np.maximum(u, 0)
    out = (r @ params["head.w2"] + params["head.b2"])[:, 0]
    return out, (x, u, r)


def mlp_backward(dout: np.ndarray, cache, params: dict, grads: dict) -> np.ndarray:
    x, u, r = cache
    d2 = dout[:, None]
    _acc(grads, "head.w2", r.T @ d2)
    _acc(grads, "head.b2", d2.sum(axis=0))
    du = (d2 @ params["head.w2"].T) * (u > 0)
    _acc(grads, "head.w1", x.T @ du)
    _acc(grads, "head.b1", du.sum(axis=0))
    return du @ params["head.w1"].T


def tower_forward(params: dict, side: str, x: np.ndarray):
    return x @ params[f"head.{side}.w"] + params[f"head.{side}.b"], x


def tower_backward(dout: np.ndarray, x: np.ndarray, side: str, params: dict, grads: dict) -> np.ndarray:
    _acc(grads, f"head.{side}.w", x.T @ dout)
    _acc(grads, f"head.{side}.b", dout.sum(axis=0))
    return dout @ params[f"head.{side}.w"].T
