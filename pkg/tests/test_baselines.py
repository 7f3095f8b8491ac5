import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgraph.baselines import fit, predict
from relgraph.metrics import auroc, mae
from relgraph.relational import ColumnSpec, Database, SchemaManifest, Table, TableSpec
from relgraph.tasks import TrainingTable


def entity_table(entities, targets, task_type="entity_regression", split="train"):
    n = len(entities)
    return TrainingTable("t", task_type, split, "users", 10, np.array(entities, np.int64),
                         np.arange(n, dtype=np.int64) * 10, np.array(targets, np.float64))


def rec_table(entities, targets, k=2, split="train", seed_times=None):
    n = len(entities)
    st_ = np.zeros(n, np.int64) if seed_times is None else np.array(seed_times, np.int64)
    return TrainingTable("t", "recommendation", split, "users", 10, np.array(entities, np.int64), st_,
                         [np.array(x, np.int64) for x in targets], "items", k)


def users_db(x, city=None) -> Database:
    spec = TableSpec("users", "users.csv", (ColumnSpec("id", "primary_key"), ColumnSpec("x", "numeric"),
                                            ColumnSpec("city", "categorical", nullable=True)))
    items = TableSpec("items", "items.csv", (ColumnSpec("id", "primary_key"),))
    data = {"id": [f"u{i}" for i in range(len(x))], "x": list(map(float, x)),
            "city": city or [None] * len(x)}
    return Database(SchemaManifest((spec, items)),
                    {"users": Table(spec, data), "items": Table(items, {"id": [f"i{i}" for i in range(20)]})})


def test_entity_mean_and_fallback():
    train = entity_table([0, 0, 1], [2.0, 4.0, -1.5])
    p = fit("entity_mean", train)
    out = predict(p, entity_table([0, 7], [0, 0], split="val"))
    assert out[0] == 3.0
    assert out[1] == 1.5


def test_global_kinds():
    train = entity_table([0, 1, 2], [1.0, 2.0, 6.0])
    rows = entity_table([5, 6], [0, 0], split="test")
    assert predict(fit("global_zero", train), rows).tolist() == [0.0, 0.0]
    assert predict(fit("global_mean", train), rows).tolist() == [3.0, 3.0]
    assert predict(fit("global_median", train), rows).tolist() == [2.0, 2.0]
    assert predict(fit("entity_median", train), entity_table([2, 9], [0, 0])).tolist() == [6.0, 2.0]


def test_global_popularity_ranking():
    train = rec_table([1, 2], [[0, 1], [0]])
    p = fit("global_popularity", train)
    assert predict(p, rec_table([1, 2, 99], [[0]] * 3, split="val")) == [[0, 1]] * 3


def test_past_visit_counts_and_padding():
    train = rec_table([0, 0, 0, 1, 1], [[1, 2], [1], [1], [3, 4], [3, 5]], k=3, seed_times=[0, 10, 20, 0, 10])
    p = fit("past_visit", train)
    two = fit("past_visit", rec_table(train.entity.tolist(), [t.tolist() for t in train.target], k=2,
                                      seed_times=[0, 10, 20, 0, 10]))
    assert predict(two, rec_table([0], [[1]], k=2))[0] == [1, 2]
    solo = fit("past_visit", rec_table([0, 1, 1, 2, 2], [[7], [3], [3], [4], [4]], k=3))
    assert predict(solo, rec_table([0], [[7]], k=3))[0] == [7, 3, 4]
    assert predict(p, rec_table([9], [[1]], k=3))[0] == predict(fit("global_popularity", train),
                                                               rec_table([9], [[1]], k=3))[0]


def test_ties_break_by_index():
    p = fit("global_popularity", rec_table([0, 1], [[5, 2], [9]], k=3))
    assert predict(p, rec_table([0], [[2]], k=3))[0] == [2, 5, 9]


def test_wrong_kind_and_empty():
    with pytest.raises(ValueError):
        fit("past_visit", entity_table([0], [1.0]))
    with pytest.raises(ValueError):
        fit("entity_mean", entity_table([], []))


def test_constant_per_entity_target_gives_zero_mae():
    rng = np.random.default_rng(0)
    per = rng.integers(-40, 40, 20) / 8.0
    ents = rng.integers(0, 20, 200)
    ents[:20] = np.arange(20)
    train = entity_table(ents, per[ents])
    hold = entity_table(ents[::-1], per[ents[::-1]], split="val")
    assert mae(predict(fit("entity_mean", train), hold), hold.target) == 0.0


def test_tabular_linear_separable_auroc():
    rng = np.random.default_rng(1)
    x = rng.normal(size=400)
    x[np.abs(x) < 0.1] += 0.3
    y = (x > 0).astype(float)
    db = users_db(x, [f"c{i % 3}" for i in range(400)])
    ents = np.arange(400)
    train = entity_table(ents[:300], y[:300], "entity_classification")
    val = entity_table(ents[300:], y[300:], "entity_classification", split="val")
    p = fit("tabular_linear", train, db)
    s = predict(p, val, db)
    assert auroc(s, val.target) >= 0.99
    assert np.all((s > 0) & (s < 1))


def test_tabular_linear_regression_recovers_line():
    x = np.linspace(-2, 2, 100)
    db = users_db(x)
    train = entity_table(np.arange(100), 3 * x + 1)
    pred = predict(fit("tabular_linear", train, db), train, db)
    assert mae(pred, train.target) < 0.1


def test_tabular_linear_recommendation_prefers_history():
    db = users_db(np.zeros(4))
    train = rec_table([0, 0, 1, 1, 2, 3], [[4], [4], [5], [5], [6, 4], [6, 5]], k=2, seed_times=[0, 10, 0, 10, 0, 0])
    p = fit("tabular_linear", train, db)
    out = predict(p, rec_table([0, 1], [[4], [5]], k=2, split="val"), db)
    assert all(len(o) == 2 and len(set(o)) == 2 for o in out)
    assert out[0][0] == 4 and out[1][0] == 5


histories = st.lists(st.tuples(st.integers(0, 5), st.lists(st.integers(0, 9), min_size=1, max_size=4, unique=True)),
                     min_size=1, max_size=20)


@settings(max_examples=60, deadline=None)
@given(histories, st.integers(1, 6))
def test_popularity_is_source_invariant_and_past_visit_falls_back(hist, k):
    train = rec_table([h[0] for h in hist], [h[1] for h in hist], k=k)
    pop = predict(fit("global_popularity", train), rec_table(list(range(8)), [[0]] * 8, k=k))
    assert all(r == pop[0] for r in pop)
    pv = predict(fit("past_visit", train), rec_table([100, 101], [[0], [0]], k=k))
    assert pv == pop[:2]
    for r in predict(fit("past_visit", train), rec_table(list(range(6)), [[0]] * 6, k=k)):
        assert len(r) == len(set(r)) <= k
