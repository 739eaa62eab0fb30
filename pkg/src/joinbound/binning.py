"""Value-domain binning for join-key groups, per-bin summaries and budgets.

Every key of an equivalence group shares one :class:`BinMap`, so a value
lands in the same bin index whichever key it is seen through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator

from joinbound.catalog import ValueCountStore
from joinbound.exceptions import UsageError

STRATEGIES = ("gbsa", "equal_width", "equal_depth", "single")


@dataclass
class BinMap:
    """Explicit value -> bin assignment over a group's observed domain.

    Values outside ``values`` fall into the bin of the nearest known value,
    ties going to the smaller neighbour.
    """

    group_id: int
    values: np.ndarray
    bins: np.ndarray
    k: int
    strategy: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        self.bins = np.asarray(self.bins, dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return int(self.k)

    def lookup(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.int64)
        if self.values.size == 0:
            return np.zeros(v.shape, dtype=np.int64)
        pos = np.searchsorted(self.values, v)
        right = np.clip(pos, 0, self.values.size - 1)
        left = np.clip(pos - 1, 0, self.values.size - 1)
        exact = self.values[right] == v
        # nearest neighbour, ties to the left
        use_left = (pos >= self.values.size) | (
            (pos > 0) & (np.abs(v - self.values[left]) <= np.abs(self.values[right] - v)))
        idx = np.where(exact, right, np.where(use_left, left, right))
        return self.bins[idx]

    def members(self, b: int) -> np.ndarray:
        return self.values[self.bins == b]

    def __eq__(self, other):
        return (isinstance(other, BinMap) and self.group_id == other.group_id
                and self.k == other.k and self.strategy == other.strategy
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.bins, other.bins))


@dataclass
class BinSummary:
    """Per-bin total count, most-frequent-value count and distinct count for one key."""

    total: np.ndarray
    mfv: np.ndarray
    ndv: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, BinSummary) and np.array_equal(self.total, other.total)
                and np.array_equal(self.mfv, other.mfv) and np.array_equal(self.ndv, other.ndv))


def allocate_bin_budget(counts: Mapping[int, float], K: int) -> dict[int, int]:
    """Split ``K`` bins across groups in proportion to workload usage ``counts``."""
    gids = sorted(counts)
    if K < len(gids):
        raise UsageError(f"bin budget {K} is smaller than the number of groups {len(gids)}")
    if not gids:
        return {}
    n = np.array([float(counts[g]) for g in gids])
    if n.sum() <= 0:
        n = np.ones(len(gids))
    share = K * n / n.sum()
    k = np.maximum(1, np.floor(share + 0.5)).astype(np.int64)
    # largest usage first, ties by group id
    order = sorted(range(len(gids)), key=lambda i: (-n[i], gids[i]))
    residual = int(K - k.sum())
    while residual > 0:
        for i in order:
            if residual == 0:
                break
            k[i] += 1
            residual -= 1
    while residual < 0:
        progressed = False
        for i in order:
            if residual == 0:
                break
            if k[i] > 1:
                k[i] -= 1
                residual += 1
                progressed = True
        if not progressed:
            break
    return {g: int(k[i]) for i, g in enumerate(gids)}


def _sort_by_count(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return np.lexsort((values, counts))


def min_variance_bins(values, counts, k: int) -> np.ndarray:
    """Low-variance bins for one key: equal-size runs of the values ordered by count.

    Values sorted by ``(count, value)`` are cut into ``min(k, n)`` contiguous
    runs whose sizes differ by at most one, so each bin gathers values of
    similar frequency. Bin ids ascend with each bin's smallest value.
    """
    values = np.asarray(values, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if k < 1:
        raise UsageError("k must be at least 1")
    n = values.size
    labels = np.zeros(n, dtype=np.int64)
    if n == 0 or k == 1:
        return labels
    order = _sort_by_count(values, counts)
    labels[order] = np.arange(n) * min(k, n) // n
    return _canonical_labels(values, labels)


def _canonical_labels(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Relabel bins 0..m-1 in order of each bin's smallest value."""
    if labels.size == 0:
        return labels
    uniq = np.unique(labels)
    mins = np.array([values[labels == u].min() for u in uniq])
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(mins, kind="stable")] = np.arange(uniq.size)
    remap = dict(zip(uniq.tolist(), rank.tolist()))
    return np.array([remap[x] for x in labels.tolist()], dtype=np.int64)


def min_variance_dichotomy(values, counts) -> tuple[np.ndarray, np.ndarray]:
    """Best single cut of count-sorted values minimising the sum of the two population variances."""
    values = np.asarray(values, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.float64)
    order = _sort_by_count(values, counts)
    c = counts[order]
    n = c.size
    if n < 2:
        return values[order], values[order][:0]
    s1 = np.cumsum(c)
    s2 = np.cumsum(c * c)
    i = np.arange(1, n)
    left_n, right_n = i, n - i
    var_l = s2[i - 1] / left_n - (s1[i - 1] / left_n) ** 2
    var_r = (s2[-1] - s2[i - 1]) / right_n - ((s1[-1] - s1[i - 1]) / right_n) ** 2
    score = np.maximum(var_l, 0) + np.maximum(var_r, 0)
    cut = int(np.argmin(score)) + 1
    return values[order[:cut]], values[order[cut:]]


def _union_domain(stores: Mapping) -> np.ndarray:
    arrays = [s.values for s in stores.values()]
    if not arrays:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(arrays)).astype(np.int64)


def _counts_on(domain: np.ndarray, store: ValueCountStore) -> np.ndarray:
    out = np.zeros(domain.size, dtype=np.int64)
    if store.values.size:
        pos = np.searchsorted(domain, store.values)
        out[pos] = store.counts
    return out


def _nearest_fill(domain: np.ndarray, labels: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    """Give unassigned domain values the bin of the nearest assigned value (ties left)."""
    if assigned.all() or not assigned.any():
        return labels
    known = BinMap(0, domain[assigned], labels[assigned], 1, "single")
    out = labels.copy()
    out[~assigned] = known.lookup(domain[~assigned])
    return out


def _key_order(stores: Mapping) -> list:
    # larger domain first, ties by key name
    return sorted(stores, key=lambda key: (-stores[key].ndv, key))


def single_bin(stores: Mapping, group_id: int = 0) -> BinMap:
    domain = _union_domain(stores)
    return BinMap(group_id, domain, np.zeros(domain.size, dtype=np.int64), 1, "single")


def gbsa(stores: Mapping, k: int, group_id: int = 0) -> BinMap:
    """Greedy bin selection over all keys of a group.

    Half the budget goes to least-variance bins on the key with the largest
    domain. Each further key, in decreasing domain size, halves the bins
    where its own counts vary most, spending half of what the previous
    round had.
    """
    if k < 2:
        raise UsageError("gbsa needs k >= 2; use the single strategy")
    domain = _union_domain(stores)
    if domain.size == 0:
        return BinMap(group_id, domain, np.zeros(0, dtype=np.int64), 1, "gbsa")
    if k >= domain.size:
        # budget covers the domain: singleton bins have zero variance everywhere
        return BinMap(group_id, domain, np.arange(domain.size, dtype=np.int64), int(domain.size), "gbsa")
    keys = _key_order(stores)
    first = stores[keys[0]]
    remain = k // 2
    labels = np.zeros(domain.size, dtype=np.int64)
    assigned = np.zeros(domain.size, dtype=bool)
    pos = np.searchsorted(domain, first.values)
    labels[pos] = min_variance_bins(first.values, first.counts, remain)
    assigned[pos] = True
    labels = _nearest_fill(domain, labels, assigned)
    n_bins = int(labels.max()) + 1

    for key in keys[1:]:
        take = remain // 2
        if take < 1:
            break
        counts = _counts_on(domain, stores[key]).astype(np.float64)
        size = np.bincount(labels, minlength=n_bins).astype(np.float64)
        s1 = np.bincount(labels, weights=counts, minlength=n_bins)
        s2 = np.bincount(labels, weights=counts * counts, minlength=n_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(size > 0, s2 / np.maximum(size, 1) - (s1 / np.maximum(size, 1)) ** 2, 0.0)
        var = np.where(var > 1e-12 * np.maximum(1.0, s2 / np.maximum(size, 1)), var, 0.0)
        candidates = [b for b in sorted(range(n_bins), key=lambda b: (-var[b], b))
                      if var[b] > 0 and size[b] >= 2][:take]
        for b in candidates:
            members = np.flatnonzero(labels == b)
            _, right = min_variance_dichotomy(domain[members], counts[members])
            if right.size == 0:
                continue
            labels[np.searchsorted(domain, right)] = n_bins
            n_bins += 1
        remain = take
    labels = _canonical_labels(domain, labels)
    return BinMap(group_id, domain, labels, int(labels.max()) + 1, "gbsa")


def _compact(domain, raw, group_id, strategy) -> BinMap:
    uniq, labels = np.unique(raw, return_inverse=True)
    return BinMap(group_id, domain, labels.astype(np.int64), int(uniq.size), strategy)


def equal_width_bins(stores: Mapping, k: int, group_id: int = 0) -> BinMap:
    """Uniform slices of the union value range; empty slices are dropped."""
    domain = _union_domain(stores)
    if k < 1:
        raise UsageError("k must be at least 1")
    if domain.size == 0:
        return BinMap(group_id, domain, np.zeros(0, dtype=np.int64), 1, "equal_width")
    lo, hi = int(domain[0]), int(domain[-1])
    span = hi - lo + 1
    raw = ((domain - lo).astype(object) * k // span) if span > 2**40 else (domain - lo) * k // span
    return _compact(domain, np.asarray(raw, dtype=np.int64), group_id, "equal_width")


def equal_depth_bins(stores: Mapping, k: int, group_id: int = 0) -> BinMap:
    """Equal-count quantiles of the largest-domain key, taken in value order."""
    domain = _union_domain(stores)
    if k < 1:
        raise UsageError("k must be at least 1")
    if domain.size == 0:
        return BinMap(group_id, domain, np.zeros(0, dtype=np.int64), 1, "equal_depth")
    base = stores[_key_order(stores)[0]]
    before = np.concatenate([[0], np.cumsum(base.counts)[:-1]])
    raw = before * k // max(base.total, 1)
    labels = np.zeros(domain.size, dtype=np.int64)
    assigned = np.zeros(domain.size, dtype=bool)
    pos = np.searchsorted(domain, base.values)
    labels[pos] = raw
    assigned[pos] = True
    labels = _nearest_fill(domain, labels, assigned)
    return _compact(domain, labels, group_id, "equal_depth")


def build_binmap(strategy: str, stores: Mapping, k: int, group_id: int = 0) -> BinMap:
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown binning strategy {strategy!r}")
    if strategy == "single" or k < 2:
        return single_bin(stores, group_id)
    if strategy == "gbsa":
        return gbsa(stores, k, group_id)
    if strategy == "equal_width":
        return equal_width_bins(stores, k, group_id)
    return equal_depth_bins(stores, k, group_id)


def summarize_bins(store: ValueCountStore, binmap: BinMap) -> BinSummary:
    k = binmap.n_bins
    b = binmap.lookup(store.values)
    total = np.bincount(b, weights=store.counts, minlength=k).astype(np.int64)
    mfv = np.zeros(k, dtype=np.int64)
    np.maximum.at(mfv, b, store.counts)
    ndv = np.bincount(b, minlength=k).astype(np.int64)
    return BinSummary(total, mfv, ndv)


def apply_update(summaries: Mapping, stores: Mapping, binmap: BinMap,
                 inserted: Mapping | None = None, deleted: Mapping | None = None):
    """Fold inserted/deleted key values into the stores under a frozen bin map.

    ``inserted``/``deleted`` map a key to an array of raw values. Returns
    ``(new_summaries, new_stores)``; keys without changes keep their
    objects unchanged.
    """
    inserted = inserted or {}
    deleted = deleted or {}
    new_stores = dict(stores)
    new_summaries = dict(summaries)
    for key in stores:
        ins = np.asarray(inserted.get(key, []), dtype=np.int64)
        dele = np.asarray(deleted.get(key, []), dtype=np.int64)
        if ins.size == 0 and dele.size == 0:
            continue
        new_stores[key] = stores[key].updated(ins, dele)
        new_summaries[key] = summarize_bins(new_stores[key], binmap)
    return new_summaries, new_stores


class _Binner(BaseEstimator):
    strategy = "single"

    def __init__(self, k: int = 100, group_id: int = 0):
        self.k = k
        self.group_id = group_id

    def _build(self, stores):
        raise NotImplementedError

    def fit(self, stores, y=None):
        if not isinstance(stores, Mapping):
            stores = {"key": stores if isinstance(stores, ValueCountStore) else ValueCountStore.from_array(stores)}
        self.binmap_ = self._build(stores)
        self.n_bins_ = self.binmap_.n_bins
        return self

    def transform(self, values):
        if not hasattr(self, "binmap_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError(f"{type(self).__name__} is not fitted")
        return self.binmap_.lookup(values)

    def fit_transform(self, stores, y=None):
        self.fit(stores)
        if isinstance(stores, Mapping):
            return {key: self.transform(s.values) for key, s in stores.items()}
        return self.transform(stores.values if isinstance(stores, ValueCountStore) else stores)


class GBSABinner(_Binner):
    """Greedy variance-driven binning over all keys of one group."""

    def _build(self, stores):
        return build_binmap("gbsa", stores, self.k, self.group_id)


class EqualWidthBinner(_Binner):
    def _build(self, stores):
        return equal_width_bins(stores, self.k, self.group_id)


class EqualDepthBinner(_Binner):
    def _build(self, stores):
        return equal_depth_bins(stores, self.k, self.group_id)


class SingleBinner(_Binner):
    def _build(self, stores):
        return single_bin(stores, self.group_id)
