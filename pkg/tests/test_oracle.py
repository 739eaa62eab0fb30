import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from joinbound.catalog import Database
from joinbound.exceptions import DataError, UsageError
from joinbound.oracle import (TEMPLATES, default_spec, error_metrics, evaluate_workload, exact_cardinality,
                              format_table, generate_db, generate_workload, nearest_rank,
                              nested_loop_cardinality, random_query, zipf_probabilities)
from joinbound.queryir import parse_sql

from conftest import FIG_QUERY, synth_db


def test_worked_join(toy_db):
    assert exact_cardinality(FIG_QUERY, toy_db) == 83
    assert nested_loop_cardinality(FIG_QUERY, toy_db) == 83


def test_empty_filter(toy_db):
    assert exact_cardinality(FIG_QUERY + " AND b.y > 50", toy_db) == 0


def test_pk_self_join_is_row_count(small_db):
    n = small_db.tables["A"].n_rows
    assert exact_cardinality("SELECT COUNT(*) FROM A x, A y WHERE x.id = y.id", small_db) == n


def test_disconnected_query_multiplies(toy_db):
    assert exact_cardinality("SELECT COUNT(*) FROM A a, B b", toy_db) == 16 * 24


def test_memory_cap(small_db):
    with pytest.raises(DataError, match="exceeds"):
        exact_cardinality("SELECT COUNT(*) FROM C x, C y, C z WHERE x.Aid = y.Aid AND y.Bid = z.Bid",
                          small_db, memory_cap=5)


def _tiny():
    spec = default_spec(seed=0, scale=0.02)
    return generate_db(spec)


TINY = _tiny()


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.sampled_from(TEMPLATES), st.integers(2, 4))
def test_hash_join_matches_nested_loop(seed, template, n):
    db = TINY
    q = random_query(db, n, template, np.random.default_rng(seed), 0.4)
    assume(q is not None)
    assert exact_cardinality(q, db) == nested_loop_cardinality(q, db)



def test_zipf_probabilities():
    h5 = sum(1 / r for r in range(1, 6))
    np.testing.assert_allclose(zipf_probabilities(5, 1.0), [1 / r / h5 for r in range(1, 6)])
    np.testing.assert_allclose(zipf_probabilities(4, 0.0), [0.25] * 4)


def test_uniform_fk_is_flat():
    spec = {"seed": 1, "tables": [{"name": "T", "rows": 20000, "columns": [
        {"name": "k", "kind": "integer-key", "gen": "fk", "domain": 10, "zipf": 0}]}]}
    db = generate_db(spec)
    counts = db.store("T", "k").counts
    assert counts.size == 10 and counts.min() > 1800 and counts.max() < 2200


def test_skewed_fk():
    db = synth_db(0, 1.0)
    counts = np.sort(db.store("C", "Aid").counts)
    assert counts[-1] > 10 * np.median(counts)


def test_generation_is_deterministic(tmp_path):
    a = generate_db(default_spec(seed=4, scale=0.1), tmp_path / "a")
    b = generate_db(default_spec(seed=4, scale=0.1), tmp_path / "b")
    for name in ("schema.json", "A.csv", "B.csv", "C.csv", "D.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = generate_db(default_spec(seed=5, scale=0.1))
    assert a.store("C", "Aid") != c.store("C", "Aid")


def test_written_files_reload(tmp_path):
    db = generate_db(default_spec(seed=2, scale=0.1), tmp_path)
    back = Database.from_directory(tmp_path / "schema.json", tmp_path)
    for key, s in db.stores.items():
        assert back.stores[key] == s
    q = "SELECT COUNT(*) FROM A a, B b, C c WHERE a.id = b.Aid AND b.id = c.Bid AND b.b2 LIKE '%Anna%'"
    assert exact_cardinality(q, back) == exact_cardinality(q, db)


def test_bad_generator():
    with pytest.raises(UsageError):
        generate_db({"tables": [{"name": "T", "rows": 3, "columns": [
            {"name": "x", "kind": "integer", "gen": "nope"}]}]})


def test_workload_covers_templates(small_db):
    w = generate_workload(small_db, 40, seed=1)
    sizes = [len(q.aliases) for q in w]
    assert min(sizes) >= 2 and max(sizes) <= 6
    assert generate_workload(small_db, 40, seed=1) == w
    with pytest.raises(UsageError):
        generate_workload(small_db, 3, templates=["bogus"])


def test_nearest_rank():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert nearest_rank(v, 50) == 2.0
    assert nearest_rank(v, 95) == 4.0
    assert nearest_rank(v, 1) == 1.0
    assert np.isnan(nearest_rank(np.array([]), 50))


def test_error_metrics():
    m = error_metrics([10, 5, 3, 0], [5, 5, 6, 0])
    assert m["ratios"] == [2.0, 1.0, 0.5, 1.0]
    assert m["n_zero_true"] == 1
    assert m["p50"] == 1.0 and m["p99"] == 2.0
    assert m["coverage"] == pytest.approx(2 / 3)
    assert m["under_fraction"] == pytest.approx(1 / 3)


def test_evaluate_workload_flags_zero_truth(toy_db):
    class Fixed:
        def estimate(self, q):
            class R:
                estimate = 7.0
            return R()
    out = evaluate_workload(Fixed(), [FIG_QUERY, FIG_QUERY + " AND b.y > 50"], toy_db)
    assert out["rows"][1]["zero_true"] and out["n_zero_true"] == 1
    assert out["ratios"] == [7 / 83, 8.0]


def test_format_table():
    text = format_table([{"a": 1, "b": 0.123456}], ["a", "b"])
    assert text.splitlines()[0].split() == ["a", "b"]
    assert "0.1235" in text
