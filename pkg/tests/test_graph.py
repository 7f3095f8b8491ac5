import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_database, users_reviews
from relgraph.graph import (
    CSR, NULL_TIME, EdgeType, NodeRef, build_graph, graph_from_bytes, graph_oracle_check, graph_to_bytes,
    load_graph, neighbors, save_graph, transpose,
)
from relgraph.relational import load_database, load_manifest

FWD = EdgeType("reviews", "user_id", "users", "forward")
REV = FWD.reverse()


@pytest.fixture
def db(tmp_path):
    return load_database(load_manifest(users_reviews(tmp_path)))


def test_counts_and_edges(db):
    g = build_graph(db)
    assert g.node_counts == {"users": 3, "reviews": 5}
    assert g.num_edges(FWD) == 5
    assert g.num_edges(REV) == 5
    assert set(g.edge_types) == {FWD, REV}


def test_one_dangling_key_drops_one_edge(tmp_path):
    db = load_database(load_manifest(users_reviews(tmp_path, review_users=("u0", "nobody", "u1", "u2", "u2"))))
    g = build_graph(db)
    assert g.num_edges(FWD) == 4
    assert graph_oracle_check(db, g)


def test_node_times(db):
    g = build_graph(db)
    assert g.node_times["reviews"].tolist() == [10, 20, 30, 40, 50]
    assert np.all(g.node_times["users"] == NULL_TIME)


def test_neighbors(db):
    g = build_graph(db)
    assert neighbors(g, NodeRef("reviews", 0), FWD) == [NodeRef("users", 0)]
    assert neighbors(g, NodeRef("users", 2), REV) == [NodeRef("reviews", 3), NodeRef("reviews", 4)]
    assert len(neighbors(g, NodeRef("users", 1), REV)) == 2


def test_neighbors_empty_and_type_mismatch(tmp_path):
    db = load_database(load_manifest(users_reviews(tmp_path, review_users=("u1", "u1", "u1", "u2", "u2"))))
    g = build_graph(db)
    assert neighbors(g, NodeRef("users", 0), REV) == []
    with pytest.raises(TypeError):
        neighbors(g, NodeRef("users", 0), FWD)


def test_feature_store_excludes_keys_and_time(db):
    g = build_graph(db)
    assert [c.name for c in g.feature_store["reviews"]] == ["rating", "body"]
    assert [c.name for c in g.feature_store["users"]] == ["age", "city"]


def test_oracle_detects_deleted_edge(db):
    g = build_graph(db)
    src, dst = g.edge_list(FWD)
    from relgraph.graph import csr_from_edges
    g.adjacency[FWD] = csr_from_edges(src[1:], dst[1:], 5)
    assert not graph_oracle_check(db, g)


def test_permuted_is_seeded_and_preserves_multiset(db):
    a = build_graph(db, "permuted", seed=7)
    b = build_graph(db, "permuted", seed=7)
    n = build_graph(db)
    assert graph_to_bytes(a) == graph_to_bytes(b)
    for et in n.edge_types:
        assert a.num_edges(et) == n.num_edges(et)
    assert sorted(a.edge_list(FWD)[1]) == sorted(n.edge_list(FWD)[1])
    assert sorted(a.adjacency[REV].degrees().tolist()) == sorted(n.adjacency[REV].degrees().tolist())
    # sources untouched: every review keeps exactly one outgoing edge
    assert a.adjacency[FWD].degrees().tolist() == [1] * 5


def test_permuted_fails_oracle_unless_identity(tmp_path):
    users = tuple(f"u{i % 3}" for i in range(30))
    db = load_database(load_manifest(users_reviews(tmp_path, review_users=users, review_times=range(30))))
    n = build_graph(db)
    for seed in range(5):
        p = build_graph(db, "permuted", seed=seed)
        same = np.array_equal(p.edge_list(FWD)[1], n.edge_list(FWD)[1])
        assert graph_oracle_check(db, p) == same


def test_permuted_needs_seed(db):
    with pytest.raises(ValueError):
        build_graph(db, "permuted")


def test_transpose_twice_is_identity():
    csr = CSR(np.array([0, 2, 2, 5]), np.array([1, 0, 3, 1, 1]))
    back = transpose(transpose(csr, 4), 3)
    assert back.offsets.tolist() == csr.offsets.tolist()
    assert sorted(zip(*[np.repeat(np.arange(3), back.degrees()), back.targets])) == \
        sorted(zip(*[np.repeat(np.arange(3), csr.degrees()), csr.targets]))


def test_rgh1_round_trip(db, tmp_path):
    g = build_graph(db)
    path = tmp_path / "g.rgh"
    save_graph(g, path)
    data = path.read_bytes()
    assert data[:4] == b"RGH1"
    h = load_graph(path)
    assert h.node_counts == g.node_counts
    for t in g.node_types:
        assert h.node_times[t].tolist() == g.node_times[t].tolist()
    for et in g.edge_types:
        assert h.adjacency[et].offsets.tolist() == g.adjacency[et].offsets.tolist()
        assert h.adjacency[et].targets.tolist() == g.adjacency[et].targets.tolist()
    assert graph_to_bytes(h) == data


def test_rgh1_rejects_bad_magic_and_sentinel_collision(db):
    with pytest.raises(ValueError, match="RGH1"):
        graph_from_bytes(b"XXXX" + b"\0" * 20)
    g = build_graph(db)
    g.node_times["reviews"][0] = -1
    with pytest.raises(ValueError, match="sentinel"):
        graph_to_bytes(g)


def _check_invariants(db, g):
    assert graph_oracle_check(db, g)
    for et in g.edge_types:
        if et.direction != "forward":
            continue
        fwd, rev = g.adjacency[et], g.adjacency[et.reverse()]
        t = transpose(rev, g.node_counts[et.src_type])
        assert t.offsets.tolist() == fwd.offsets.tolist()
        assert sorted(zip(np.repeat(np.arange(len(fwd.offsets) - 1), fwd.degrees()).tolist(), t.targets.tolist())) \
            == sorted(zip(*[x.tolist() for x in g.edge_list(et)]))
        resolving = int((db.resolve_fkey(et.src_type, et.fkey_column) >= 0).sum())
        assert fwd.num_edges == resolving == rev.num_edges


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_graphs_match_join_oracle(seed):
    db = random_database(np.random.default_rng(seed))
    g = build_graph(db)
    _check_invariants(db, g)
    p = build_graph(db, "permuted", seed=seed)
    for et in g.edge_types:
        assert p.num_edges(et) == g.num_edges(et)
        if et.direction == "reverse":
            assert sorted(p.adjacency[et].degrees().tolist()) == sorted(g.adjacency[et].degrees().tolist())
    assert graph_to_bytes(graph_from_bytes(graph_to_bytes(g))) == graph_to_bytes(g)
