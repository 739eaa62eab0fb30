import numpy as np
import pytest
from hypothesis import given, strategies as st

from joinbound.binning import (BinMap, EqualDepthBinner, EqualWidthBinner, GBSABinner, SingleBinner,
                               allocate_bin_budget, apply_update, build_binmap, equal_depth_bins,
                               equal_width_bins, gbsa, min_variance_bins, min_variance_dichotomy,
                               summarize_bins)
from joinbound.catalog import ValueCountStore
from joinbound.exceptions import UsageError
from joinbound.model import JoinCardinalityEstimator

from conftest import A_IDS, B_IDS, FIG_QUERY, brute_bound, count_dict


def _groups(values, labels):
    out = {}
    for v, b in zip(values, labels):
        out.setdefault(int(b), set()).add(int(v))
    return sorted(out.values(), key=min)


# -- budget ------------------------------------------------------------------

def test_budget_proportional():
    assert allocate_bin_budget({0: 3, 1: 1}, 100) == {0: 75, 1: 25}


def test_budget_even_split_without_workload():
    assert allocate_bin_budget({0: 0, 1: 0}, 10) == {0: 5, 1: 5}


def test_budget_tie_residual_goes_to_lowest_group():
    assert allocate_bin_budget({0: 1, 1: 1, 2: 1}, 100) == {0: 34, 1: 33, 2: 33}


def test_budget_too_small():
    with pytest.raises(UsageError):
        allocate_bin_budget({0: 1, 1: 1}, 1)


@given(st.dictionaries(st.integers(0, 20), st.integers(0, 50), min_size=1, max_size=8), st.integers(8, 400))
def test_budget_sums_to_total(counts, K):
    out = allocate_bin_budget(counts, K)
    assert sum(out.values()) == K
    assert all(k >= 1 for k in out.values())


# -- minimum-variance bins ------------------------------------------------------

def test_singletons_when_budget_covers_values():
    labels = min_variance_bins([1, 2, 3], [8, 4, 3], 3)
    assert _groups([1, 2, 3], labels) == [{1}, {2}, {3}]


def test_two_bins_split_by_count():
    # a:5 b:5 c:1 d:1
    labels = min_variance_bins([1, 2, 3, 4], [5, 5, 1, 1], 2)
    assert _groups([1, 2, 3, 4], labels) == [{1, 2}, {3, 4}]


def test_one_bin():
    assert set(min_variance_bins([1, 2, 3], [5, 1, 9], 1).tolist()) == {0}


@given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(1, 12))
def test_bins_are_equal_size_runs_in_count_order(counts, k):
    values = np.arange(len(counts)) * 3
    labels = min_variance_bins(values, counts, k)
    sizes = np.bincount(labels)
    assert sizes.size == min(k, len(counts))
    assert sizes.max() - sizes.min() <= 1
    # every bin is a contiguous stretch of the (count, value) order
    order = sorted(range(len(counts)), key=lambda i: (counts[i], values[i]))
    seq = [int(labels[i]) for i in order]
    changes = sum(1 for x, y in zip(seq, seq[1:]) if x != y)
    assert changes == sizes.size - 1


def test_equal_counts_share_bins_before_mixed_ones():
    # runs of equal counts are never split when sizes allow it
    labels = min_variance_bins([1, 2, 3, 4, 5, 6], [7, 7, 7, 1, 1, 1], 2)
    assert _groups([1, 2, 3, 4, 5, 6], labels) == [{1, 2, 3}, {4, 5, 6}]


@given(st.lists(st.integers(1, 50), min_size=2, max_size=40))
def test_dichotomy_never_raises_variance(counts):
    values = np.arange(len(counts))
    left, right = min_variance_dichotomy(values, counts)
    assert left.size + right.size == len(counts) and right.size > 0
    c = np.asarray(counts, dtype=float)
    parent = c.var()
    for part in (left, right):
        assert c[part].var() <= parent + 1e-9


def test_labels_ascend_with_smallest_value():
    labels = min_variance_bins([10, 20, 30, 40], [1, 9, 1, 9], 2)
    assert labels[0] == 0


# -- gbsa ---------------------------------------------------------------------

def test_gbsa_single_key_is_min_variance_with_half_budget():
    rng = np.random.default_rng(4)
    vals = np.arange(50)
    counts = rng.integers(1, 40, size=50)
    store = ValueCountStore(vals, counts)
    got = gbsa({("T", "k"): store}, 10)
    expect = min_variance_bins(vals, counts, 5)
    assert np.array_equal(got.bins, expect)


def test_gbsa_refines_high_variance_bins_of_second_key():
    rng = np.random.default_rng(7)
    pk = ValueCountStore(np.arange(1, 201), np.ones(200, dtype=np.int64))
    fk_vals = rng.zipf(1.5, size=3000)
    fk_vals = fk_vals[fk_vals <= 200]
    fk = ValueCountStore.from_array(fk_vals)
    stores = {("A", "id"): pk, ("B", "Aid"): fk}
    bm = gbsa(stores, 16)
    before = min_variance_bins(pk.values, pk.counts, 8)
    domain = pk.values
    b_counts = np.zeros(domain.size)
    b_counts[np.searchsorted(domain, fk.values)] = fk.counts
    for b in range(8):
        members = before == b
        parent_var = b_counts[members].var()
        for child in set(bm.bins[members].tolist()):
            assert b_counts[bm.bins == child].var() <= parent_var + 1e-9
    assert bm.n_bins > 8


def test_gbsa_tighter_than_equal_width_on_worked_example():
    stores = {("A", "id"): ValueCountStore.from_array(A_IDS), ("B", "Aid"): ValueCountStore.from_array(B_IDS)}
    bounds = {}
    for strategy in ("gbsa", "equal_width"):
        bm = build_binmap(strategy, stores, 4, 0)
        labels = dict(zip(bm.values.tolist(), bm.bins.tolist()))
        bounds[strategy] = brute_bound([count_dict(A_IDS), count_dict(B_IDS)], labels)
    assert bounds["gbsa"] <= bounds["equal_width"]


def test_gbsa_needs_two_bins():
    with pytest.raises(UsageError):
        gbsa({("A", "id"): ValueCountStore.from_array([1, 2])}, 1)


# -- baselines ------------------------------------------------------------------

def test_equal_width_quarters():
    bm = equal_width_bins({("T", "k"): ValueCountStore(np.arange(1, 101), np.ones(100, dtype=np.int64))}, 4)
    assert [int(bm.members(b).max()) for b in range(4)] == [25, 50, 75, 100]


def test_equal_depth_isolates_heavy_value():
    bm = equal_depth_bins({("T", "k"): ValueCountStore([1, 2, 3, 4], [97, 1, 1, 1])}, 2)
    assert _groups(bm.values, bm.bins) == [{1}, {2, 3, 4}]


@pytest.mark.parametrize("strategy", ["gbsa", "equal_width", "equal_depth", "single"])
def test_one_bin_for_k1(strategy):
    bm = build_binmap(strategy, {("T", "k"): ValueCountStore([1, 5, 9], [3, 1, 2])}, 1)
    assert set(bm.bins.tolist()) == {0}


def test_degenerate_domain():
    for fn in (equal_width_bins, equal_depth_bins):
        bm = fn({("T", "k"): ValueCountStore([7], [4])}, 8)
        assert bm.n_bins == 1


def test_unknown_strategy():
    with pytest.raises(UsageError):
        build_binmap("magic", {}, 4)


def test_lookup_nearest_ties_left():
    bm = BinMap(0, np.array([10, 20]), np.array([0, 1]), 2, "gbsa")
    assert bm.lookup([10, 14, 15, 16, 99, -5]).tolist() == [0, 0, 0, 1, 1, 0]


# -- summaries -------------------------------------------------------------------

def _bin_one():
    return BinMap(0, np.array([1, 2, 3, 5, 6, 7]), np.zeros(6, dtype=np.int64), 1, "single")


def test_summary_of_worked_bin():
    s = summarize_bins(ValueCountStore.from_array(A_IDS), _bin_one())
    assert (int(s.total[0]), int(s.mfv[0])) == (16, 8)
    s = summarize_bins(ValueCountStore.from_array(B_IDS), _bin_one())
    assert (int(s.total[0]), int(s.mfv[0])) == (24, 6)


def test_empty_and_uniform_bins():
    bm = BinMap(0, np.array([1, 2, 3]), np.array([0, 0, 1]), 3, "equal_width")
    s = summarize_bins(ValueCountStore([1, 2], [2, 2]), bm)
    assert s.total.tolist() == [4, 0, 0]
    assert s.mfv.tolist() == [2, 0, 0]


def test_update_summary_inserts_into_mfv():
    key = ("A", "id")
    store = ValueCountStore.from_array(A_IDS)
    summ = {key: summarize_bins(store, _bin_one())}
    new_s, new_st = apply_update(summ, {key: store}, _bin_one(), inserted={key: [1, 1, 1]})
    assert (int(new_s[key].total[0]), int(new_s[key].mfv[0])) == (19, 11)
    new_s, _ = apply_update(summ, {key: store}, _bin_one(), deleted={key: [1] * 8})
    assert int(new_s[key].mfv[0]) == 4
    same_s, same_st = apply_update(summ, {key: store}, _bin_one())
    assert same_s[key] is summ[key] and same_st[key] is store


@given(st.lists(st.integers(0, 30), max_size=60), st.integers(1, 12))
def test_summary_totals_sum_to_rows(values, k):
    store = ValueCountStore.from_array(values)
    for strategy in ("gbsa", "equal_width", "equal_depth"):
        if strategy == "gbsa" and k < 2:
            continue
        bm = build_binmap(strategy, {("T", "k"): store}, k)
        s = summarize_bins(store, bm)
        assert int(s.total.sum()) == len(values)
        assert int(s.ndv.sum()) == store.ndv
        assert (s.mfv <= s.total).all()


@given(st.lists(st.integers(0, 30), min_size=1, max_size=60), st.lists(st.integers(0, 40), max_size=30))
def test_incremental_summary_equals_recount(base, extra):
    key = ("T", "k")
    store = ValueCountStore.from_array(base)
    bm = build_binmap("gbsa", {key: store}, 6)
    summ = {key: summarize_bins(store, bm)}
    new_s, _ = apply_update(summ, {key: store}, bm, inserted={key: extra})
    assert new_s[key] == summarize_bins(ValueCountStore.from_array(base + extra), bm)


# -- estimator-style wrappers -------------------------------------------------------

@pytest.mark.parametrize("cls", [GBSABinner, EqualWidthBinner, EqualDepthBinner, SingleBinner])
def test_binner_api(cls):
    b = cls(k=4).fit([1, 1, 2, 3, 3, 3, 9])
    out = b.transform([1, 9, 4])
    assert out.shape == (3,) and (out < max(b.n_bins_, 1)).all()
    assert cls(k=4).get_params() == {"k": 4, "group_id": 0}


def test_binner_not_fitted():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        GBSABinner().transform([1])


def test_worked_example_bound_equals_brute_force(toy_db):
    for k in (2, 3, 4, 6):
        m = JoinCardinalityEstimator(k=k, estimator="truescan").fit(toy_db)
        bm = m.binmaps_[0]
        labels = dict(zip(bm.values.tolist(), bm.bins.tolist()))
        expect = brute_bound([count_dict(A_IDS), count_dict(B_IDS)], labels)
        assert m.estimate(FIG_QUERY).estimate == pytest.approx(expect, rel=1e-12)
