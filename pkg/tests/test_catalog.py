import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from joinbound.catalog import (Database, KeyEncoder, ValueCountStore, ingest_table, load_schema,
                               selinger_join_size, write_csv)
from joinbound.exceptions import DataError, SchemaError


def _schema(joins):
    return {
        "tables": [
            {"name": "A", "columns": [{"name": "id", "kind": "integer-key"}, {"name": "v", "kind": "integer"}]},
            {"name": "B", "columns": [{"name": "id", "kind": "integer-key"}, {"name": "Aid", "kind": "integer-key"}]},
            {"name": "C", "columns": [{"name": "Aid", "kind": "integer-key"}, {"name": "Bid", "kind": "integer-key"}]},
        ],
        "joins": joins,
    }


def test_transitive_relations_form_one_group():
    cat = load_schema(_schema(["A.id=B.Aid", "B.Aid=C.Aid"]))
    groups = [set(g.members) for g in cat.groups]
    assert {("A", "id"), ("B", "Aid"), ("C", "Aid")} in groups


def test_chain_relations_form_two_groups():
    cat = load_schema(_schema(["A.id=B.Aid", "B.id=C.Bid"]))
    multi = [set(g.members) for g in cat.groups if len(g.members) > 1]
    assert multi == [{("A", "id"), ("B", "Aid")}, {("B", "id"), ("C", "Bid")}]


def test_no_relations_gives_singleton_groups():
    cat = load_schema(_schema([]))
    assert len(cat.groups) == 5
    assert all(len(g.members) == 1 for g in cat.groups)


def test_group_ids_follow_smallest_member():
    cat = load_schema(_schema(["B.id=C.Bid", "A.id=B.Aid", "B.Aid=C.Aid"]))
    assert cat.groups[0].members[0] == ("A", "id")
    assert cat.group_of("C", "Bid") == cat.group_of("B", "id")


@pytest.mark.parametrize("joins, msg", [
    (["A.id=B.nope"], "unknown column"),
    (["A.v=B.Aid"], "not an integer-key"),
    (["A.id"], "malformed"),
])
def test_bad_relations(joins, msg):
    with pytest.raises(SchemaError, match=msg):
        load_schema(_schema(joins))


def test_duplicate_table_and_column():
    with pytest.raises(SchemaError):
        load_schema({"tables": [{"name": "A", "columns": []}, {"name": "A", "columns": []}]})
    with pytest.raises(SchemaError, match="duplicate column"):
        load_schema({"tables": [{"name": "A", "columns": [{"name": "x", "kind": "integer"},
                                                          {"name": "x", "kind": "integer"}]}]})


def test_unknown_kind_and_future_version():
    with pytest.raises(SchemaError):
        load_schema({"tables": [{"name": "A", "columns": [{"name": "x", "kind": "blob"}]}]})
    with pytest.raises(SchemaError, match="newer"):
        load_schema({"version": 99, "tables": []})


def test_schema_round_trip(tmp_path):
    cat = load_schema(_schema(["A.id=B.Aid", "B.id=C.Bid"]))
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cat.to_dict()))
    again = load_schema(path)
    assert again.groups == cat.groups
    assert again.tables == cat.tables


def test_store_counts_and_ndv():
    s = ValueCountStore.from_array([1, 1, 2])
    assert s.as_dict() == {1: 2, 2: 1}
    assert s.ndv == 2 and s.total == 3
    assert s.count(1) == 2 and s.count(7) == 0


def test_string_keys_encode_in_first_seen_order():
    cat = load_schema({"tables": [{"name": "A", "columns": [{"name": "id", "kind": "integer-key"}]}]})
    table, stores = ingest_table("id\na\na\nb\n", cat.table("A"), cat, KeyEncoder())
    assert table.data["id"].tolist() == [0, 0, 1]
    assert stores["id"].as_dict() == {0: 2, 1: 1}


def test_worked_example_counts(toy_db):
    store = toy_db.store("A", "id")
    assert {v: store.count(v) for v in (1, 2, 3)} == {1: 8, 2: 4, 3: 3}


def test_header_only_file():
    cat = load_schema(_schema([]))
    table, stores = ingest_table("id,v\n", cat.table("A"), cat)
    assert table.n_rows == 0
    assert stores["id"].ndv == 0


@pytest.mark.parametrize("text, msg", [
    ("id,v,w\n1,2,3\n", "unknown column"),
    ("id\n1\n", "lacks column"),
    ("id,v\n1,2,3\n", "expected 2 fields"),
    ("id,v\n1,x\n", "type mismatch"),
    ('id,v\n1,"2\n', "malformed"),
])
def test_ingest_errors(text, msg):
    cat = load_schema(_schema([]))
    with pytest.raises(DataError, match=msg):
        ingest_table(text, cat.table("A"), cat)


def test_nulls_stay_out_of_stores():
    cat = load_schema(_schema([]))
    table, stores = ingest_table("id,v\n1,\n,3\n1,4\n", cat.table("A"), cat)
    assert stores["id"].as_dict() == {1: 2}
    assert table.valid["v"].tolist() == [False, True, True]


def test_store_update_below_zero():
    s = ValueCountStore.from_array([1, 2])
    with pytest.raises(DataError):
        s.updated(deleted=[3])
    assert s.updated(inserted=[2, 2], deleted=[1]).as_dict() == {2: 3}


@given(st.lists(st.integers(-5, 5), max_size=40), st.lists(st.integers(-5, 5), max_size=40))
def test_store_update_matches_recount(base, extra):
    s = ValueCountStore.from_array(base).updated(inserted=extra)
    assert s == ValueCountStore.from_array(base + extra)
    back = s.updated(deleted=extra)
    assert back == ValueCountStore.from_array(base)


def test_selinger_examples():
    # 16 * 20 / max(3, 5)
    assert selinger_join_size(16, 20, 3, 5) == 64
    assert selinger_join_size(16, 20, 3, 5, sel_a=0.0) == 0
    assert selinger_join_size(100, 100, 100, 100) == 100


def test_csv_round_trip(tmp_path, toy_db):
    for name, t in toy_db.tables.items():
        write_csv(t, tmp_path / f"{name}.csv")
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(toy_db.catalog.to_dict()))
    again = Database.from_directory(schema, tmp_path)
    for name, t in toy_db.tables.items():
        for c in t.definition.column_names:
            a, av = t.column(c)
            b, bv = again.tables[name].column(c)
            assert np.array_equal(av, bv)
            assert a[av].tolist() == b[bv].tolist()


def test_missing_data_file(tmp_path, toy_db):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(toy_db.catalog.to_dict()))
    with pytest.raises(DataError, match="missing data file"):
        Database.from_directory(schema, tmp_path)
