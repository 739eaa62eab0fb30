import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from joinbound.binning import BinMap, build_binmap, summarize_bins
from joinbound.catalog import Database, load_schema
from joinbound.estimators import ChowLiu, Sampling, TrueScan, make_estimator
from joinbound.estimators.chowliu import entropy, expand_terms, max_spanning_tree, mutual_information
from joinbound.estimators.sampling import sample_indices, sample_size
from joinbound.exceptions import UsageError
from joinbound.predicates import And, Atom, Not, Or

from _oracles import best_tree_weight, brute_tree_marginal, mi_nats


def _singletons(values):
    vals = np.unique(values)
    return BinMap(0, vals, np.arange(vals.size), vals.size, "gbsa")


def _summ(table, col, bm):
    from joinbound.catalog import ValueCountStore
    return {col: summarize_bins(ValueCountStore.from_array(table.key_values(col)), bm)}


# -- exact scan ------------------------------------------------------------------

def test_truescan_worked_masses(toy_db):
    a = toy_db.tables["A"]
    bm = _singletons([1, 2, 3, 5, 6, 7])
    d = TrueScan().fit(a, {"id": bm}).distribution(None, ("id",), _summ(a, "id", bm))
    assert d.mass.tolist() == [8, 4, 3, 1, 0, 0]
    assert d.filtered_total == 16


def test_truescan_false_predicate(toy_db):
    a = toy_db.tables["A"]
    bm = _singletons([1, 2, 3, 5])
    est = TrueScan().fit(a, {"id": bm})
    d = est.distribution(Atom("x", ">", 1000), ("id",), _summ(a, "id", bm))
    assert d.mass.sum() == 0 and d.filtered_total == 0


def test_truescan_unfiltered_equals_summary(small_db):
    t = small_db.tables["C"]
    bm = build_binmap("gbsa", {("C", "Aid"): small_db.store("C", "Aid")}, 16)
    s = _summ(t, "Aid", bm)
    d = TrueScan().fit(t, {"Aid": bm}).distribution(None, ("Aid",), s)
    assert np.array_equal(d.mass, s["Aid"].total)


def test_truescan_two_keys_matches_crosstab(small_db):
    t = small_db.tables["C"]
    bms = {c: build_binmap("gbsa", {("C", c): small_db.store("C", c)}, 8) for c in ("Aid", "Bid")}
    pred = Atom("c1", "<", 0.4)
    d = TrueScan().fit(t, bms).distribution(pred, ("Aid", "Bid"), {c: _summ(t, c, bms[c])[c] for c in bms})
    expect = np.zeros(d.mass.shape)
    for i in range(t.n_rows):
        r = t.row(i)
        if r["Aid"] is None or r["Bid"] is None or r["c1"] is None or not r["c1"] < 0.4:
            continue
        expect[bms["Aid"].lookup([r["Aid"]])[0], bms["Bid"].lookup([r["Bid"]])[0]] += 1
    assert np.array_equal(d.mass, expect)


# -- sampling --------------------------------------------------------------------

def test_sample_size_rounding():
    assert sample_size(10, 0.25) == 3
    assert sample_size(1000, 0.01) == 10
    assert sample_indices(100, 0.5, 3).size == 50


def test_sampling_rate_one_is_exact(small_db):
    t = small_db.tables["D"]
    bms = {c: build_binmap("gbsa", {("D", c): small_db.store("D", c)}, 12) for c in ("Aid", "Bid")}
    summ = {c: _summ(t, c, bms[c])[c] for c in bms}
    for pred in (None, Atom("d1", "<=", 4), Or((Atom("d1", "=", 1), Atom("d1", "=", 7)))):
        a = TrueScan().fit(t, bms).distribution(pred, ("Aid", "Bid"), summ)
        b = Sampling(1.0, seed=9).fit(t, bms).distribution(pred, ("Aid", "Bid"), summ)
        assert a.mass.dtype == b.mass.dtype and np.array_equal(a.mass, b.mass)
        assert a.filtered_total == b.filtered_total


def test_sampling_selective_predicate_gives_zero(small_db):
    t = small_db.tables["C"]
    bm = build_binmap("gbsa", {("C", "Aid"): small_db.store("C", "Aid")}, 8)
    est = Sampling(0.01, seed=0).fit(t, {"Aid": bm})
    d = est.distribution(Atom("c1", ">", 0.99999), ("Aid",), _summ(t, "Aid", bm))
    assert d.mass.sum() == 0


def test_sampling_rate_validation():
    with pytest.raises(UsageError):
        Sampling(0.0)
    with pytest.raises(UsageError):
        make_estimator("bogus")


def test_sampling_deterministic_per_seed(small_db):
    t = small_db.tables["B"]
    a = Sampling(0.1, seed=[1, 2]).fit(t, {})
    b = Sampling(0.1, seed=[1, 2]).fit(t, {})
    assert np.array_equal(a.indices, b.indices)


# -- mutual information ------------------------------------------------------------

def test_mi_zero_on_product_grid():
    xs, ys = zip(*itertools.product(range(4), range(5)))
    assert mutual_information(xs, ys) == pytest.approx(0.0, abs=1e-12)


def test_mi_of_copy_is_entropy():
    x = np.random.default_rng(1).integers(0, 6, 500)
    assert mutual_information(x, x) == pytest.approx(entropy(x), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_mi_matches_counter_reference(pairs):
    xs, ys = zip(*pairs)
    assert mutual_information(xs, ys) == pytest.approx(mi_nats(xs, ys), abs=1e-10)


@given(st.integers(2, 5), st.data())
def test_spanning_tree_is_maximal(n, data):
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            w[i, j] = w[j, i] = data.draw(st.floats(0, 10, allow_nan=False))
    edges = max_spanning_tree([f"n{i}" for i in range(n)], w)
    assert len(edges) == n - 1
    assert sum(w[i, j] for i, j in edges) == pytest.approx(best_tree_weight(w.tolist()), abs=1e-9)


# -- tree model --------------------------------------------------------------------

def _key_table(columns, seed=0):
    names = list(columns)
    schema = {"tables": [{"name": "T", "columns": [{"name": c, "kind": "integer-key"} for c in names]}],
              "joins": []}
    db = Database.from_columns(load_schema(schema), {"T": {c: list(map(int, v)) for c, v in columns.items()}})
    t = db.tables["T"]
    bms = {c: _singletons(t.key_values(c)) for c in names}
    return t, bms


def _chain_columns(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    id1 = rng.integers(0, 6, n)
    id2 = rng.integers(0, 6, n)
    id3 = (id1 + (rng.random(n) < 0.15) * rng.integers(1, 6, n)) % 6
    id4 = (id3 + (rng.random(n) < 0.15) * rng.integers(1, 6, n)) % 6
    return {"id1": id1, "id2": id2, "id3": id3, "id4": id4}


def test_chain_dependence_recovered():
    t, bms = _key_table(_chain_columns())
    est = ChowLiu(smoothing=1.0).fit(t, bms)
    names = est.node_names
    edges = {frozenset((names[p], names[c])) for p, c in est.edges}
    assert frozenset(("key:id1", "key:id3")) in edges
    assert frozenset(("key:id3", "key:id4")) in edges


def test_single_key_has_no_edges():
    t, bms = _key_table({"id": [1, 1, 2, 3, 3, 3]})
    est = ChowLiu(smoothing=0.0).fit(t, bms)
    assert est.edges == []
    assert np.allclose(est.joint([0])[:3] * 6, [2, 1, 3])


def test_perfectly_correlated_pair_joins_tree():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 5, 400)
    t, bms = _key_table({"a": a, "b": a.copy(), "c": rng.integers(0, 5, 400)})
    est = ChowLiu().fit(t, bms)
    names = est.node_names
    assert frozenset(("key:a", "key:b")) in {frozenset((names[p], names[c])) for p, c in est.edges}


def test_unfiltered_mass_sums_to_rows():
    t, bms = _key_table(_chain_columns(800, 2))
    est = ChowLiu(smoothing=1.0).fit(t, bms)
    mass, total = est._mass(None, ("id1", "id4"))
    # the null state carries only smoothing mass
    assert mass.sum() == pytest.approx(800, rel=0.02)


def test_tree_inference_matches_enumeration():
    t, bms = _key_table(_chain_columns(500, 5))
    est = ChowLiu(smoothing=0.5).fit(t, bms)
    root = est.root_marginal()
    cpts = [est.cpt(e) for e in range(len(est.edges))]
    rng = np.random.default_rng(0)
    for open_nodes in ([0], [1, 3], [3, 0], [0, 1, 2]):
        ev = {2: rng.random(est.n_states[2])} if 2 not in open_nodes else {}
        got = est.joint(open_nodes, ev)
        ref = brute_tree_marginal(root, cpts, est.edges, est.n_states, open_nodes, ev)
        for idx, p in ref.items():
            assert got[idx] == pytest.approx(p, rel=1e-9, abs=1e-15)


def test_filter_attribute_conditioning():
    rng = np.random.default_rng(8)
    n = 4000
    key = rng.integers(0, 4, n)
    attr = np.where(rng.random(n) < 0.8, key * 10, rng.integers(0, 40, n))
    schema = {"tables": [{"name": "T", "columns": [{"name": "k", "kind": "integer-key"},
                                                   {"name": "v", "kind": "integer"}]}], "joins": []}
    db = Database.from_columns(load_schema(schema), {"T": {"k": key.tolist(), "v": attr.tolist()}})
    t = db.tables["T"]
    bms = {"k": _singletons(key)}
    est = ChowLiu(smoothing=0.1, rate=1.0).fit(t, bms)
    truth = TrueScan().fit(t, bms)
    pred = Atom("v", "=", 20)
    got, _ = est._mass(pred, ("k",))
    want, _ = truth._mass(pred, ("k",))
    # exact-category discretisation keeps the conditioning sharp
    assert np.argmax(got) == np.argmax(want) == 2
    assert got.sum() == pytest.approx(want.sum(), rel=0.1)


def test_like_filters_fall_back_to_sample_scaling(small_db):
    t = small_db.tables["B"]
    bms = {c: build_binmap("gbsa", {("B", c): small_db.store("B", c)}, 8) for c in ("id", "Aid")}
    est = ChowLiu(rate=1.0).fit(t, bms)
    pred = Atom("b2", "LIKE", "%Anna%")
    mass, total = est._mass(pred, ("Aid",))
    true_mass, true_total = TrueScan().fit(t, bms)._mass(pred, ("Aid",))
    assert total == true_total
    assert mass.sum() <= total
    assert mass.sum() == pytest.approx(true_mass.sum(), rel=0.1)


def test_expand_terms_inclusion_exclusion():
    p = Or((Atom("x", "=", 1), Atom("y", "=", 2)))
    terms = expand_terms(p)
    assert sorted(s for s, _ in terms) == [-1, 1, 1]
    n = expand_terms(Not(And((Atom("x", "=", 1), Atom("y", "=", 2)))))
    assert sum(s for s, _ in n) == 0


def _random_table(seed):
    rng = np.random.default_rng(seed)
    n_cols = int(rng.integers(2, 6))
    n = int(rng.integers(30, 200))
    cols = {}
    base = rng.integers(0, 4, n)
    for j in range(n_cols):
        noise = rng.random(n) < rng.random()
        cols[f"c{j}"] = np.where(noise, rng.integers(0, int(rng.integers(2, 6)), n), base)
    return _key_table(cols)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_tree_is_best_spanning_tree(seed):
    t, bms = _random_table(seed)
    est = ChowLiu().fit(t, bms)
    codes = est._codes(t)
    n = len(codes)
    w = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            w[i][j] = w[j][i] = mi_nats(codes[i].tolist(), codes[j].tolist())
    assert abs(est.total_mi() - best_tree_weight(w)) <= 1e-9
    for e in range(len(est.edges)):
        assert np.allclose(est.cpt(e).sum(axis=1), 1.0, atol=1e-9)


def test_update_counts_equal_recount():
    cols = _chain_columns(600, 4)
    t, bms = _key_table(cols)
    half = t.take(np.arange(300))
    rest = t.take(np.arange(300, 600))
    est = ChowLiu().fit(half, bms)
    est.update(t, rest, half.take(np.arange(0)))
    codes = est._codes(t)
    for i, c in enumerate(codes):
        assert np.array_equal(est.node_counts[i], np.bincount(c, minlength=est.n_states[i]))
    for e, (p, c) in enumerate(est.edges):
        assert np.array_equal(est.edge_counts[e], est._pair_counts(codes, p, c))
