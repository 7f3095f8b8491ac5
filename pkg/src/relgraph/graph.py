"""Heterogeneous temporal graph built from a relational database.

One node type per table, one node per row, and for every foreign-key column a
forward edge type (fkey row -> referenced row) plus its reverse. Adjacency is
stored per edge type in CSR form.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .relational import Database

NULL_TIME = np.iinfo(np.int64).min
FILE_NULL_TIME = -1
RGH_MAGIC = b"RGH1"
RGH_VERSION = 1


class NodeRef(NamedTuple):
    node_type: str
    local_index: int


class EdgeType(NamedTuple):
    src_type: str
    fkey_column: str
    dst_type: str
    direction: str = "forward"

    def reverse(self) -> "EdgeType":
        flipped = "reverse" if self.direction == "forward" else "forward"
        return EdgeType(self.dst_type, self.fkey_column, self.src_type, flipped)

    @property
    def name(self) -> str:
        tag = "fwd" if self.direction == "forward" else "rev"
        return f"{self.src_type}__{self.fkey_column}__{self.dst_type}__{tag}"


class CSR(NamedTuple):
    offsets: np.ndarray  # int64, len n_src + 1
    targets: np.ndarray  # int64, len n_edges

    def row(self, i: int) -> np.ndarray:
        return self.targets[self.offsets[i]:self.offsets[i + 1]]

    @property
    def num_edges(self) -> int:
        return len(self.targets)

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass
class FeatureColumn:
    name: str
    semantic_type: str
    values: list


@dataclass
class HeteroTemporalGraph:
    node_counts: dict[str, int]
    node_times: dict[str, np.ndarray]
    adjacency: dict[EdgeType, CSR]
    feature_store: dict[str, list[FeatureColumn]] = field(default_factory=dict)

    @property
    def node_types(self) -> list[str]:
        return sorted(self.node_counts)

    @property
    def edge_types(self) -> list[EdgeType]:
        return sorted(self.adjacency)

    def edge_types_from(self, node_type: str) -> list[EdgeType]:
        return [et for et in self.edge_types if et.src_type == node_type]

    def num_edges(self, et: EdgeType) -> int:
        return self.adjacency[et].num_edges

    def edge_list(self, et: EdgeType) -> tuple[np.ndarray, np.ndarray]:
        csr = self.adjacency[et]
        src = np.repeat(np.arange(len(csr.offsets) - 1, dtype=np.int64), csr.degrees())
        return src, csr.targets.copy()


def csr_from_edges(src: np.ndarray, dst: np.ndarray, n_src: int) -> CSR:
    """Counting sort by source; stable, so ties keep their input order."""
    counts = np.bincount(src, minlength=n_src)
    offsets = np.zeros(n_src + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    order = np.argsort(src, kind="stable")
    return CSR(offsets, dst[order].astype(np.int64))


def transpose(csr: CSR, n_dst: int) -> CSR:
    src = np.repeat(np.arange(len(csr.offsets) - 1, dtype=np.int64), csr.degrees())
    return csr_from_edges(csr.targets, src, n_dst)


def _edge_rng(seed: int, et: EdgeType) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(et.name.encode())]))


def build_graph(db: Database, edge_policy: str = "normal", seed: int | None = None) -> HeteroTemporalGraph:
    """Materialize the graph; ``edge_policy="permuted"`` shuffles destinations per edge type."""
    if edge_policy not in ("normal", "permuted"):
        raise ValueError(f"unknown edge policy {edge_policy!r}")
    if edge_policy == "permuted" and seed is None:
        raise ValueError("permuted edge policy needs a seed")
    counts = {name: len(t) for name, t in db.tables.items()}
    times = {}
    for name, t in db.tables.items():
        if t.time_column is None:
            times[name] = np.full(counts[name], NULL_TIME, dtype=np.int64)
        else:
            times[name] = t.times()
    adjacency = {}
    for name, t in db.tables.items():
        for col in t.spec.foreign_keys:
            resolved = db.resolve_fkey(name, col.name)
            src = np.flatnonzero(resolved >= 0).astype(np.int64)
            dst = resolved[src]
            et = EdgeType(name, col.name, col.target, "forward")
            if edge_policy == "permuted":
                dst = dst[_edge_rng(seed, et).permutation(len(dst))]
            fwd = csr_from_edges(src, dst, counts[name])
            adjacency[et] = fwd
            adjacency[et.reverse()] = transpose(fwd, counts[col.target])
    return HeteroTemporalGraph(counts, times, adjacency, build_graph_features(db))


def neighbors(g: HeteroTemporalGraph, n: NodeRef, et: EdgeType) -> list[NodeRef]:
    if et.src_type != n.node_type:
        raise TypeError(f"edge type {et.name} starts at {et.src_type!r}, node is {n.node_type!r}")
    if not 0 <= n.local_index < g.node_counts[n.node_type]:
        raise IndexError(f"{n} out of range")
    return [NodeRef(et.dst_type, int(j)) for j in g.adjacency[et].row(n.local_index)]


def _pairwise_join(fk_vals: list, pk_vals: list, chunk: int = 1024) -> set[tuple[int, int]]:
    """All (i, j) with fk_vals[i] == pk_vals[j], by exhaustive comparison."""
    fk = np.array(["" if v is None else str(v) for v in fk_vals], dtype=str)
    present = np.array([v is not None for v in fk_vals])
    pk = np.array([str(v) for v in pk_vals], dtype=str)
    edges = set()
    if len(fk) == 0 or len(pk) == 0:
        return edges
    for start in range(0, len(fk), chunk):
        block = fk[start:start + chunk]
        eq = block[:, None] == pk[None, :]
        eq &= present[start:start + chunk, None]
        ii, jj = np.nonzero(eq)
        edges.update(zip((ii + start).tolist(), jj.tolist()))
    return edges


def graph_oracle_check(db: Database, g: HeteroTemporalGraph) -> bool:
    """True iff ``g``'s edges equal a brute-force pkey/fkey join of ``db``."""
    expected_types = set()
    for name, t in db.tables.items():
        for col in t.spec.foreign_keys:
            et = EdgeType(name, col.name, col.target, "forward")
            expected_types |= {et, et.reverse()}
            target = db.tables[col.target]
            want = _pairwise_join(t.columns[col.name], target.columns[target.spec.primary_key])
            if et not in g.adjacency or et.reverse() not in g.adjacency:
                return False
            s, d = g.edge_list(et)
            got = set(zip(s.tolist(), d.tolist()))
            if len(s) != len(got) or got != want:
                return False
            rs, rd = g.edge_list(et.reverse())
            rgot = set(zip(rd.tolist(), rs.tolist()))
            if len(rs) != len(rgot) or rgot != want:
                return False
    return set(g.adjacency) == expected_types


# -- RGH1 snapshot ------------------------------------------------------------
#
# Little-endian layout, version 1:
#   magic "RGH1" | u32 version | u32 n_types
#   n_types x { u16 len | utf-8 type name | u64 node count }
#   n_types x { i64[count] node times, -1 = null }        (same order as above)
#   u32 n_edge_types
#   n_edge_types x { str src | str fkey | str dst | u8 direction (0 fwd, 1 rev)
#                    | u64 n_src | u64 n_edges | u64[n_src+1] offsets | u64[n_edges] targets }
# Strings are u16 length + utf-8 bytes. Types and edge types are written sorted.

def _wstr(buf: io.BytesIO, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _rstr(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _array_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _read_array(buf: io.BytesIO, n: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    return np.frombuffer(buf.read(n * dt.itemsize), dtype=dt).astype(dtype)


def graph_to_bytes(g: HeteroTemporalGraph) -> bytes:
    buf = io.BytesIO()
    buf.write(RGH_MAGIC)
    types = g.node_types
    buf.write(struct.pack("<II", RGH_VERSION, len(types)))
    for t in types:
        _wstr(buf, t)
        buf.write(struct.pack("<Q", g.node_counts[t]))
    for t in types:
        times = g.node_times[t]
        if np.any(times == FILE_NULL_TIME):
            raise ValueError(f"node type {t!r} has a timestamp equal to the null sentinel -1")
        buf.write(_array_bytes(np.where(times == NULL_TIME, FILE_NULL_TIME, times), "i8"))
    ets = g.edge_types
    buf.write(struct.pack("<I", len(ets)))
    for et in ets:
        csr = g.adjacency[et]
        _wstr(buf, et.src_type)
        _wstr(buf, et.fkey_column)
        _wstr(buf, et.dst_type)
        buf.write(struct.pack("<BQQ", 0 if et.direction == "forward" else 1,
                              len(csr.offsets) - 1, csr.num_edges))
        buf.write(_array_bytes(csr.offsets, "u8"))
        buf.write(_array_bytes(csr.targets, "u8"))
    return buf.getvalue()


def graph_from_bytes(data: bytes) -> HeteroTemporalGraph:
    buf = io.BytesIO(data)
    if buf.read(4) != RGH_MAGIC:
        raise ValueError("not an RGH1 graph snapshot")
    version, n_types = struct.unpack("<II", buf.read(8))
    if version != RGH_VERSION:
        raise ValueError(f"unsupported RGH1 version {version}")
    counts = {}
    order = []
    for _ in range(n_types):
        name = _rstr(buf)
        (counts[name],) = struct.unpack("<Q", buf.read(8))
        order.append(name)
    times = {}
    for name in order:
        t = _read_array(buf, counts[name], "i8")
        times[name] = np.where(t == FILE_NULL_TIME, NULL_TIME, t)
    (n_et,) = struct.unpack("<I", buf.read(4))
    adjacency = {}
    for _ in range(n_et):
        src, fkey, dst = _rstr(buf), _rstr(buf), _rstr(buf)
        direction, n_src, n_edges = struct.unpack("<BQQ", buf.read(17))
        offsets = _read_array(buf, n_src + 1, "u8").astype(np.int64)
        targets = _read_array(buf, n_edges, "u8").astype(np.int64)
        et = EdgeType(src, fkey, dst, "forward" if direction == 0 else "reverse")
        adjacency[et] = CSR(offsets, targets)
    return HeteroTemporalGraph(counts, times, adjacency)


def save_graph(g: HeteroTemporalGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(g))


def load_graph(path) -> HeteroTemporalGraph:
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())


def attach_features(g: HeteroTemporalGraph, db: Database) -> HeteroTemporalGraph:
    """Fill the feature store of a graph loaded from a snapshot (snapshots carry structure only)."""
    for name, n in g.node_counts.items():
        if name not in db.tables or len(db.tables[name]) != n:
            raise ValueError(f"database does not match graph node type {name!r}")
    g.feature_store = build_graph_features(db)
    return g


def build_graph_features(db: Database) -> dict[str, list[FeatureColumn]]:
    out = {}
    for name, t in db.tables.items():
        out[name] = [
            FeatureColumn(c.name, c.semantic_type, t.columns[c.name])
            for c in t.spec.columns
            if c.semantic_type not in ("primary_key", "foreign_key") and c.name != t.time_column
        ]
    return out
