"""Leakage-free temporal neighbor sampling.

Each seed (node, seed time) roots its own neighborhood. Expansion is
breadth-first over every edge type leaving a frontier node; candidates whose
timestamp is later than the root's seed time are dropped (null timestamps
always pass) and the rest are subsampled uniformly without replacement down
to ``fanout`` per node and edge type. A global node reached twice from the
same root is kept once; reached from two roots it appears once per root.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graph import CSR, NULL_TIME, EdgeType, HeteroTemporalGraph, NodeRef, csr_from_edges


@dataclass(frozen=True)
class SamplerConfig:
    num_layers: int = 2
    fanout: int = 128
    strategy: str = "uniform"
    batch_size: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.fanout < 1 or self.batch_size < 1:
            raise ValueError("num_layers, fanout and batch_size must be positive")
        if self.strategy != "uniform":
            raise ValueError(f"unsupported sampling strategy {self.strategy!r}")


@dataclass
class SampledSubgraph:
    seed_refs: list[NodeRef]
    seed_times: np.ndarray
    node_index: dict[str, np.ndarray]  # global index of each local node
    node_root: dict[str, np.ndarray]  # which seed the local node belongs to
    node_hop: dict[str, np.ndarray]
    edges: dict[EdgeType, tuple[np.ndarray, np.ndarray]]  # local (src, dst), dst in N_et(src)
    seed_local: np.ndarray  # local index of each seed within its node type

    @property
    def num_roots(self) -> int:
        return len(self.seed_refs)

    def num_nodes(self, node_type: str) -> int:
        return len(self.node_index.get(node_type, ()))

    @property
    def local_nodes(self) -> dict[str, list[NodeRef]]:
        return {t: [NodeRef(t, int(i)) for i in idx] for t, idx in self.node_index.items()}

    def seed_mask(self, node_type: str) -> np.ndarray:
        mask = np.zeros(self.num_nodes(node_type), dtype=bool)
        for ref, loc in zip(self.seed_refs, self.seed_local):
            if ref.node_type == node_type:
                mask[loc] = True
        return mask


def eligible_neighbors(g: HeteroTemporalGraph, node: NodeRef, et: EdgeType, seed_time: int) -> np.ndarray:
    """Neighbors of ``node`` under ``et`` visible at ``seed_time``, in adjacency order."""
    cand = g.adjacency[et].row(node.local_index)
    t = g.node_times[et.dst_type][cand]
    return cand[(t == NULL_TIME) | (t <= seed_time)]


def _fisher_yates(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # partial shuffle: swap position i with a uniform draw from [i, n)
    perm = list(range(n))
    for i, j in enumerate(rng.integers(np.arange(k), n).tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(np.array(perm[:k], dtype=np.int64))


def _expand(csr: CSR, gl: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened adjacency of nodes ``gl``: (owner position, target)."""
    start = csr.offsets[gl]
    deg = csr.offsets[gl + 1] - start
    total = int(deg.sum())
    owner = np.repeat(np.arange(len(gl)), deg)
    if total == 0:
        return owner, np.empty(0, dtype=np.int64)
    shift = np.repeat(start - (np.cumsum(deg) - deg), deg)
    return owner, csr.targets[np.arange(total) + shift]


class _TypeStore:
    def __init__(self, n_global: int):
        self.n_global = n_global
        self.index: list[np.ndarray] = []
        self.root: list[np.ndarray] = []
        self.hop: list[np.ndarray] = []
        self.size = 0
        self.keys = np.empty(0, dtype=np.int64)
        self.key_local = np.empty(0, dtype=np.int64)
        self._flat_index = np.empty(0, dtype=np.int64)
        self._flat_root = np.empty(0, dtype=np.int64)

    def add(self, glob: np.ndarray, root: np.ndarray, hop: int) -> np.ndarray:
        local = np.arange(self.size, self.size + len(glob), dtype=np.int64)
        self.index.append(glob)
        self.root.append(root)
        self.hop.append(np.full(len(glob), hop, dtype=np.int64))
        self.size += len(glob)
        keys = root * self.n_global + glob
        allk = np.concatenate([self.keys, keys])
        alll = np.concatenate([self.key_local, local])
        order = np.argsort(allk, kind="stable")
        self.keys, self.key_local = allk[order], alll[order]
        self._flat_index = np.concatenate(self.index)
        self._flat_root = np.concatenate(self.root)
        return local

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Local index per key, -1 where absent."""
        if len(self.keys) == 0:
            return np.full(len(keys), -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos] == keys
        return np.where(hit, self.key_local[pos], -1)

    def flat(self):
        return self._flat_index, self._flat_root


def sample(
    g: HeteroTemporalGraph,
    seeds: Sequence[tuple[NodeRef, int]] | Iterable[tuple[NodeRef, int]],
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> SampledSubgraph:
    seeds = list(seeds)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    seed_refs = [NodeRef(ref.node_type, int(ref.local_index)) for ref, _ in seeds]
    seed_times = np.array([int(t) for _, t in seeds], dtype=np.int64)
    stores = {t: _TypeStore(g.node_counts[t]) for t in g.node_types}
    seed_local = np.zeros(len(seeds), dtype=np.int64)
    frontier: dict[str, np.ndarray] = {}

    by_type: dict[str, list[int]] = {}
    for r, ref in enumerate(seed_refs):
        if ref.node_type not in stores:
            raise KeyError(f"unknown seed node type {ref.node_type!r}")
        if not 0 <= ref.local_index < g.node_counts[ref.node_type]:
            raise IndexError(f"seed {ref} out of range")
        nt = g.node_times[ref.node_type][ref.local_index]
        if nt != NULL_TIME and nt > seed_times[r]:
            raise ValueError(f"seed {ref} has timestamp {nt} after its seed time {seed_times[r]}")
        by_type.setdefault(ref.node_type, []).append(r)
    for t in sorted(by_type):
        roots = np.array(by_type[t], dtype=np.int64)
        glob = np.array([seed_refs[r].local_index for r in roots], dtype=np.int64)
        local = stores[t].add(glob, roots, 0)
        seed_local[roots] = local
        frontier[t] = local

    edge_parts: dict[EdgeType, list[tuple[np.ndarray, np.ndarray]]] = {}
    for hop in range(1, cfg.num_layers + 1):
        pending: dict[str, list[tuple[EdgeType, np.ndarray, np.ndarray, np.ndarray]]] = {}
        for t in sorted(frontier):
            owners = frontier[t]
            if len(owners) == 0:
                continue
            flat_index, flat_root = stores[t].flat()
            gl = flat_index[owners]
            roots = flat_root[owners]
            for et in g.edge_types_from(t):
                pos, cand = _expand(g.adjacency[et], gl)
                if len(cand) == 0:
                    continue
                croot = roots[pos]
                ct = g.node_times[et.dst_type][cand]
                ok = (ct == NULL_TIME) | (ct <= seed_times[croot])
                pos, cand, croot = pos[ok], cand[ok], croot[ok]
                if len(cand) == 0:
                    continue
                grp, starts, counts = np.unique(pos, return_index=True, return_counts=True)
                if np.any(counts > cfg.fanout):
                    keep = np.ones(len(cand), dtype=bool)
                    for s, c in zip(starts[counts > cfg.fanout], counts[counts > cfg.fanout]):
                        keep[s:s + c] = False
                        keep[s + _fisher_yates(rng, int(c), cfg.fanout)] = True
                    pos, cand, croot = pos[keep], cand[keep], croot[keep]
                pending.setdefault(et.dst_type, []).append((et, owners[pos], cand, croot))
        frontier = {}
        for dst in sorted(pending):
            store = stores[dst]
            parts = pending[dst]
            cand = np.concatenate([p[2] for p in parts])
            croot = np.concatenate([p[3] for p in parts])
            keys = croot * store.n_global + cand
            local = store.lookup(keys)
            missing = local < 0
            if missing.any():
                uk, first, inv = np.unique(keys[missing], return_index=True, return_inverse=True)
                order = np.argsort(first, kind="stable")
                rank = np.empty(len(uk), dtype=np.int64)
                rank[order] = np.arange(len(uk))
                pick = np.flatnonzero(missing)[first[order]]
                new_local = store.add(cand[pick], croot[pick], hop)
                local[missing] = new_local[rank[inv]]
                frontier[dst] = new_local
            off = 0
            for et, owner_local, c, _ in parts:
                nbr_local = local[off:off + len(c)]
                off += len(c)
                edge_parts.setdefault(et, []).append((owner_local, nbr_local))
                edge_parts.setdefault(et.reverse(), []).append((nbr_local, owner_local))

    node_index, node_root, node_hop = {}, {}, {}
    for t, store in stores.items():
        if store.size == 0:
            continue
        node_index[t] = np.concatenate(store.index)
        node_root[t] = np.concatenate(store.root)
        node_hop[t] = np.concatenate(store.hop)
    edges = {}
    for et in sorted(edge_parts):
        src = np.concatenate([p[0] for p in edge_parts[et]])
        dst = np.concatenate([p[1] for p in edge_parts[et]])
        n_dst = max(len(node_index.get(et.dst_type, ())), 1)
        key = np.unique(src * n_dst + dst)
        edges[et] = (key // n_dst, key % n_dst)
    return SampledSubgraph(seed_refs, seed_times, node_index, node_root, node_hop, edges, seed_local)


def iter_batches(seeds: Sequence[tuple[NodeRef, int]], cfg: SamplerConfig):
    for start in range(0, len(seeds), cfg.batch_size):
        yield seeds[start:start + cfg.batch_size]


def leakage_audit(sg: SampledSubgraph, g: HeteroTemporalGraph) -> bool:
    """True iff no timestamped local node is later than its root's seed time."""
    for t, idx in sg.node_index.items():
        times = g.node_times[t][idx]
        mask = times != NULL_TIME
        if np.any(times[mask] > sg.seed_times[sg.node_root[t][mask]]):
            return False
    return True


def subgraph_as_graph(sg: SampledSubgraph, g: HeteroTemporalGraph) -> HeteroTemporalGraph:
    """View a sampled subgraph as a standalone graph over its local nodes (for RGH1 dumps)."""
    counts = {t: len(idx) for t, idx in sg.node_index.items()}
    times = {t: g.node_times[t][idx] for t, idx in sg.node_index.items()}
    adjacency = {}
    for et, (src, dst) in sg.edges.items():
        adjacency[et] = csr_from_edges(src, dst, counts[et.src_type])
    return HeteroTemporalGraph(counts, times, adjacency)
