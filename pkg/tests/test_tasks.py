import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgraph.relational import ColumnSpec, Database, SchemaManifest, Table, TableSpec
from relgraph.tasks import (
    LabelRule, SplitConfig, TaskError, TaskSpec, TrainingTable, leakage_guard, load_task_dir,
    make_training_table, save_task_dir, table_stats,
)

W = 10


def shop(purchases, n_users=3, n_items=3) -> Database:
    """users/items without time, purchases of (user, item, time, price)."""
    users = TableSpec("users", "users.csv", (ColumnSpec("id", "primary_key"),))
    items = TableSpec("items", "items.csv", (ColumnSpec("id", "primary_key"),))
    buys = TableSpec("buys", "buys.csv", (
        ColumnSpec("id", "primary_key"),
        ColumnSpec("user", "foreign_key", "users"),
        ColumnSpec("item", "foreign_key", "items"),
        ColumnSpec("time", "timestamp"),
        ColumnSpec("price", "numeric", nullable=True)), "time")
    data = {
        "users": {"id": [f"u{i}" for i in range(n_users)]},
        "items": {"id": [f"i{i}" for i in range(n_items)]},
        "buys": {"id": [f"b{k}" for k in range(len(purchases))],
                 "user": [f"u{p[0]}" for p in purchases],
                 "item": [f"i{p[1]}" for p in purchases],
                 "time": [p[2] for p in purchases],
                 "price": [p[3] for p in purchases]},
    }
    specs = (users, items, buys)
    return Database(SchemaManifest(specs), {s.name: Table(s, data[s.name]) for s in specs})


def spec(task_type="entity_classification", rule=LabelRule("exists"), **kw):
    base = dict(name="t", task_type=task_type, entity_table="users", event_table="buys",
                event_fkey_to_entity="user", window=W, label_rule=rule)
    if task_type == "recommendation":
        base.update(dst_table="items", event_fkey_to_dst="item", K=2, label_rule=LabelRule("exists"))
    base.update(kw)
    return TaskSpec(**base)


SPLIT = SplitConfig(val_timestamp=30, test_timestamp=50)


def _row(table, entity, seed_time):
    hit = np.flatnonzero((table.entity == entity) & (table.seed_time == seed_time))
    assert len(hit) == 1
    return int(hit[0])


def test_churn_silent_user_is_positive():
    db = shop([(0, 0, 1, 1.0), (1, 0, 2, 1.0), (1, 0, 15, 1.0)])
    t = make_training_table(db, spec(negate=True), SPLIT)["train"]
    assert t.target[_row(t, 0, 10)] == 1.0
    assert t.target[_row(t, 1, 10)] == 0.0


def test_sum_rule_adds_event_values():
    db = shop([(0, 0, 1, 9.0), (0, 0, 12, 2.0), (0, 1, 18, 3.5), (0, 1, 25, 100.0)])
    t = make_training_table(db, spec("entity_regression", LabelRule("sum", "price")), SPLIT)["train"]
    assert t.target[_row(t, 0, 10)] == 5.5


def test_recommendation_targets_are_distinct():
    db = shop([(0, 2, 1, None), (0, 0, 12, None), (0, 0, 14, None), (0, 1, 15, None)])
    t = make_training_table(db, spec("recommendation"), SPLIT)["train"]
    assert t.target[_row(t, 0, 10)].tolist() == [0, 1]


def test_cold_start_entities_excluded():
    db = shop([(0, 0, 1, 1.0), (1, 0, 12, 1.0)])
    t = make_training_table(db, spec(), SPLIT)["train"]
    assert 1 not in t.entity[t.seed_time == 10].tolist()
    assert 2 not in t.entity.tolist()


def test_rows_sorted_by_entity_then_seed_time():
    db = shop([(u, 0, 1 + u, 1.0) for u in range(3)] + [(0, 1, 60, 1.0)])
    for t in make_training_table(db, spec(), SPLIT).values():
        key = list(zip(t.entity.tolist(), t.seed_time.tolist()))
        assert key == sorted(key)


def test_missing_column_is_task_error():
    db = shop([(0, 0, 1, 1.0)])
    with pytest.raises(TaskError):
        make_training_table(db, spec(event_fkey_to_entity="nope"), SPLIT)
    with pytest.raises(TaskError):
        make_training_table(db, spec("entity_regression", LabelRule("sum", "ghost")), SPLIT)


def test_window_crossing_boundary_is_dropped_and_counted():
    db = shop([(0, 0, 1, 1.0), (0, 0, 60, 1.0)])
    tabs = make_training_table(db, spec(seed_stride=7), SPLIT)
    assert tabs["train"].dropped > 0
    assert leakage_guard(tabs["train"], SPLIT)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(window=0)
    with pytest.raises(ValueError):
        spec("recommendation", K=0)
    with pytest.raises(ValueError):
        spec("entity_classification", LabelRule("count"))
    with pytest.raises(ValueError):
        SplitConfig(5, 5)


def _table(split, seed_times, window=W):
    n = len(seed_times)
    return TrainingTable("t", "entity_classification", split, "users", window,
                         np.zeros(n, np.int64), np.array(seed_times, np.int64), np.zeros(n))


@pytest.mark.parametrize("split,times,ok", [
    ("train", [0, 10, 20], True),
    ("train", [21], False),
    ("val", [30, 40], True),
    ("val", [29], False),
    ("val", [41], False),
    ("test", [50, 99], True),
    ("test", [49], False),
    ("test", [], True),
])
def test_leakage_guard_cases(split, times, ok):
    assert leakage_guard(_table(split, times), SPLIT) is ok


def test_stats_classification_and_regression():
    t = _table("train", [0, 0, 0])
    t.target = np.array([1.0, 1.0, 0.0])
    assert table_stats(t) == {"split": "train", "rows": 3, "positives": 2, "negatives": 1}
    t.task_type = "entity_regression"
    t.target = np.array([0.0, 2.0, 4.0])
    s = table_stats(t)
    assert (s["min"], s["median"], s["mean"], s["max"]) == (0.0, 2.0, 2.0, 4.0)


def test_stats_recommendation_links_and_repeats():
    rec = TrainingTable("t", "recommendation", "val", "users", W, np.array([0, 1, 2]), np.array([30, 30, 30]),
                        [np.array([0, 1]), np.array([2]), np.array([0, 1, 2])], "items", 2)
    s = table_stats(rec)
    assert s["links"] == 6 and s["avg_links_per_row"] == 2.0 and s["pct_repeated"] == 0.0
    old = TrainingTable("t", "recommendation", "train", "users", W, np.array([0]), np.array([10]),
                        [np.array([1])], "items", 2)
    s = table_stats(rec, [old])
    assert s["pct_repeated"] == pytest.approx(100 / 6)
    assert type(s["pct_repeated"]) is float


def test_task_dir_round_trip(tmp_path):
    db = shop([(0, 1, 1, 2.0), (1, 0, 3, 1.0), (0, 2, 33, 1.0), (1, 1, 52, 1.0), (0, 1, 70, 4.0)])
    for s in (spec(negate=True), spec("entity_regression", LabelRule("sum", "price")), spec("recommendation")):
        tabs = make_training_table(db, s, SPLIT)
        save_task_dir(tmp_path / s.task_type, s, SPLIT, tabs)
        back = load_task_dir(tmp_path / s.task_type)
        assert back.spec == s and back.split == SPLIT
        for name, t in tabs.items():
            b = back.tables[name]
            assert b.entity.tolist() == t.entity.tolist()
            assert b.seed_time.tolist() == t.seed_time.tolist()
            assert [np.asarray(x).tolist() for x in b.target] == [np.asarray(x).tolist() for x in t.target]
            assert b.dropped == t.dropped


# -- properties -----------------------------------------------------------------

events = st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3), st.integers(0, 119),
                            st.floats(-5, 5, allow_nan=False).map(lambda x: round(x, 3))),
                  min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(events, st.integers(1, 25), st.integers(1, 25),
       st.sampled_from(["exists", "count", "sum", "rec"]), st.booleans())
def test_generated_tables_pass_guard_and_are_deterministic(ev, w, stride, kind, negate):
    db = shop(ev, n_users=5, n_items=4)
    if kind == "rec":
        s = spec("recommendation", window=w, seed_stride=stride)
    elif kind == "exists":
        s = spec(window=w, seed_stride=stride, negate=negate)
    else:
        s = spec("entity_regression", LabelRule(kind, "price" if kind == "sum" else None), window=w, seed_stride=stride)
    sc = SplitConfig(40, 80)
    a = make_training_table(db, s, sc)
    b = make_training_table(db, s, sc)
    for name in a:
        assert leakage_guard(a[name], sc)
        assert a[name].entity.tolist() == b[name].entity.tolist()
        assert a[name].seed_time.tolist() == b[name].seed_time.tolist()
        assert [np.asarray(x).tolist() for x in a[name].target] == [np.asarray(x).tolist() for x in b[name].target]
        if kind == "rec":
            for x in a[name].target:
                assert len(set(x.tolist())) == len(x) > 0
        # direct recount oracle
        for e, t0, y in zip(a[name].entity, a[name].seed_time, a[name].target):
            assert any(u == e and tt < t0 for u, _, tt, _ in ev)
            inside = [p for p in ev if p[0] == e and t0 < p[2] <= t0 + w]
            if kind == "count":
                assert y == len(inside)
            elif kind == "sum":
                assert y == pytest.approx(sum(p[3] for p in inside))
            elif kind == "exists":
                assert y == float((len(inside) > 0) != negate)
            else:
                assert set(y.tolist()) == {p[1] for p in inside}


@settings(max_examples=80, deadline=None)
@given(events, st.integers(1, 20))
def test_count_window_additivity(ev, w):
    db = shop(ev, n_users=5, n_items=4)
    sc = SplitConfig(60, 119)
    # stride w, windows w and 2w: the 2w count at t equals w-count at t plus w-count at t+w
    one = make_training_table(db, spec("entity_regression", LabelRule("count"), window=w, seed_stride=w), sc)
    two = make_training_table(db, spec("entity_regression", LabelRule("count"), window=2 * w, seed_stride=w), sc)
    lookup = {}
    for t in one.values():
        for e, s, y in zip(t.entity, t.seed_time, t.target):
            lookup[(int(e), int(s))] = y
    for t in two.values():
        for e, s, y in zip(t.entity, t.seed_time, t.target):
            a, b = lookup.get((int(e), int(s))), lookup.get((int(e), int(s) + w))
            if a is not None and b is not None:
                assert y == a + b
            recount = sum(1 for u, _, tt, _ in ev if u == e and s < tt <= s + 2 * w)
            assert y == recount
