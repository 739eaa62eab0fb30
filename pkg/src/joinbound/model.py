"""The trainable join-size estimator: offline statistics plus online bound inference."""

from __future__ import annotations

import csv
import hashlib
import io
import time
import warnings
from typing import Iterable, Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from joinbound._validation import check_choice, check_positive_int, check_rate
from joinbound.binning import (BinMap, allocate_bin_budget, build_binmap, summarize_bins)
from joinbound.catalog import Database, Table, ingest_table
from joinbound.estimators import make_estimator
from joinbound.estimators.base import ConditionalBinDistribution
from joinbound.exceptions import DataError, QueryError
from joinbound.factorgraph import BOUND, UNIFORM, EstimateReport, Inference
from joinbound.queryir import JoinGraph, Query, build_join_graph, enumerate_subplans, parse_query

STRATEGY_ALIASES = {"gbsa": "gbsa", "width": "equal_width", "equal_width": "equal_width",
                    "depth": "equal_depth", "equal_depth": "equal_depth", "single": "single"}
ESTIMATOR_NAMES = ("truescan", "sample", "chowliu")
JOINHIST_MODES = ("classic", "with_bound", "with_conditional", "both")
MAX_FACTOR_CELLS = 1 << 22


def table_digest(table: Table) -> str:
    h = hashlib.sha256()
    h.update(table.name.encode())
    for name in table.definition.column_names:
        values, valid = table.column(name)
        h.update(name.encode())
        h.update(np.ascontiguousarray(valid).tobytes())
        if values.dtype == object:
            h.update("\x00".join(str(v) if ok else "" for v, ok in zip(values.tolist(), valid.tolist())).encode())
        else:
            h.update(np.ascontiguousarray(np.where(valid, values, 0)).tobytes())
    return h.hexdigest()


def workload_group_counts(queries: Iterable, catalog) -> dict[int, int]:
    """How many workload queries join on each key group."""
    counts = {g.id: 0 for g in catalog.groups}
    for q in queries:
        q = parse_query(q, catalog)
        touched = {catalog.group_of(q.aliases[a], c) for cond in q.joins for a, c in cond}
        for g in touched:
            counts[g] += 1
    return counts


class JoinCardinalityEstimator(BaseEstimator):
    """Upper-bound join cardinality estimator over binned single-table statistics.

    Parameters
    ----------
    k : int
        Bins per key group when ``total_bins`` is not given.
    total_bins : int or None
        Global bin budget shared across groups in proportion to workload use.
    strategy : {"gbsa", "equal_width", "equal_depth", "single"}
    estimator : {"truescan", "sample", "chowliu"}
    rate : float
        Sampling rate for the sample estimator and the tree model's fallback sample.
    seed : int
    subplan_cap : int
        Most sub-plans reported by :meth:`estimate_subplans`.
    smoothing : float
        Additive smoothing of the tree model's conditional tables.
    """

    def __init__(self, k: int = 100, total_bins: int | None = None, strategy: str = "gbsa",
                 estimator: str = "chowliu", rate: float = 0.01, seed: int = 0,
                 subplan_cap: int = 16384, smoothing: float = 1.0):
        self.k = k
        self.total_bins = total_bins
        self.strategy = strategy
        self.estimator = estimator
        self.rate = rate
        self.seed = seed
        self.subplan_cap = subplan_cap
        self.smoothing = smoothing

    # -- training ----------------------------------------------------------
    def _check_params(self):
        check_positive_int(self.k, "k")
        if self.total_bins is not None:
            check_positive_int(self.total_bins, "total_bins")
        check_choice(self.strategy, STRATEGY_ALIASES, "strategy")
        check_choice(self.estimator, ESTIMATOR_NAMES, "estimator")
        check_rate(self.rate)
        check_positive_int(self.subplan_cap, "subplan_cap")
        if not self.smoothing >= 0:
            raise ValueError(f"smoothing must be non-negative, got {self.smoothing}")

    def fit(self, db: Database, workload=None, binmaps: Mapping[int, BinMap] | None = None):
        """Build bins, per-bin summaries and per-table estimators from ``db``.

        ``binmaps`` freezes the bins (as after an earlier fit) in place of
        building new ones.
        """
        self._check_params()
        if not isinstance(db, Database):
            raise TypeError(f"fit expects a Database, got {type(db).__name__}")
        t0 = time.perf_counter()
        catalog = db.catalog
        self.catalog_ = catalog
        self.encoder_ = db.encoder
        self.tables_ = dict(db.tables)
        self.stores_ = dict(db.stores)
        n_groups = len(catalog.groups)
        if binmaps is not None:
            self.binmaps_ = {int(g): binmaps[g] for g in sorted(binmaps)}
            self.budget_ = {g: int(b.k) for g, b in self.binmaps_.items()}
        else:
            if workload is not None:
                counts = workload_group_counts(workload, catalog)
            else:
                counts = {g.id: 0 for g in catalog.groups}
            K = self.total_bins if self.total_bins is not None else self.k * max(n_groups, 1)
            self.budget_ = allocate_bin_budget(counts, K) if n_groups else {}
            strategy = STRATEGY_ALIASES[self.strategy]
            self.binmaps_ = {g.id: build_binmap(strategy, db.group_stores(g.id), self.budget_[g.id], g.id)
                             for g in catalog.groups}
        self.summaries_ = {}
        for g in catalog.groups:
            for m in g.members:
                self.summaries_[m] = summarize_bins(self.stores_[m], self.binmaps_[g.id])
        self.estimators_ = {}
        for i, tdef in enumerate(catalog.tables):
            est = make_estimator(self.estimator, rate=self.rate, seed=[int(self.seed), i],
                                 smoothing=self.smoothing)
            est.fit(self.tables_[tdef.name], self._table_binmaps(tdef.name))
            self.estimators_[tdef.name] = est
        self.provenance_ = {
            "seed": int(self.seed),
            "data_digests": {t: table_digest(tab) for t, tab in sorted(self.tables_.items())},
            "deltas": [],
        }
        self.fit_time_ = time.perf_counter() - t0
        return self

    def _table_binmaps(self, table: str) -> dict[str, BinMap]:
        tdef = self.catalog_.table(table)
        return {c: self.binmaps_[self.catalog_.group_of(table, c)] for c in tdef.key_columns}

    # -- incremental update ------------------------------------------------
    def partial_fit(self, inserted: Mapping[str, Table] | None = None,
                    deleted: Mapping[str, Table] | None = None, digest: str | None = None):
        """Fold inserted/deleted rows into the model with the bins held fixed."""
        check_is_fitted(self, "binmaps_")
        inserted = dict(inserted or {})
        deleted = dict(deleted or {})
        if digest is None:
            digest = delta_digest(inserted, deleted)
        if digest in self.provenance_["deltas"]:
            warnings.warn(f"delta {digest[:12]} was already applied to this model", stacklevel=2)
        for name in sorted(set(inserted) | set(deleted)):
            tdef = self.catalog_.table(name)
            ins = inserted.get(name)
            dele = deleted.get(name)
            current = self.tables_[name]
            if dele is not None and dele.n_rows:
                current = remove_rows(current, dele)
            if ins is not None and ins.n_rows:
                current = current.concat(ins)
            self.tables_[name] = current
            self.catalog_ = self.catalog_.with_row_count(name, current.n_rows)
            for c in tdef.key_columns:
                key = (name, c)
                add = ins.key_values(c) if ins is not None else ()
                rem = dele.key_values(c) if dele is not None else ()
                if len(add) == 0 and len(rem) == 0:
                    continue
                self.stores_[key] = self.stores_[key].updated(add, rem)
                gid = self.catalog_.group_of(name, c)
                self.summaries_[key] = summarize_bins(self.stores_[key], self.binmaps_[gid])
            empty = _empty_like(current)
            self.estimators_[name].update(current, ins if ins is not None else empty,
                                          dele if dele is not None else empty)
        self.provenance_["deltas"].append(digest)
        return self

    # -- inference -----------------------------------------------------------
    def _query(self, query) -> tuple[Query, JoinGraph]:
        check_is_fitted(self, "binmaps_")
        q = parse_query(query, self.catalog_)
        return q, build_join_graph(q, self.catalog_)

    def distribution(self, q: Query, alias: str, keys: tuple[str, ...],
                     independent: bool = False) -> ConditionalBinDistribution:
        table = q.aliases[alias]
        est = self.estimators_[table]
        cells = 1
        for c in keys:
            cells *= self.binmaps_[self.catalog_.group_of(table, c)].n_bins
        if cells > MAX_FACTOR_CELLS:
            raise QueryError(f"alias {alias} joins on {len(keys)} keys; its {cells}-cell bin grid "
                             f"exceeds the limit of {MAX_FACTOR_CELLS}")
        summaries = {c: self.summaries_[(table, c)] for c in keys}
        pred = q.filters.get(alias)
        if not independent:
            return est.distribution(pred, keys, summaries)
        total = est.filtered_total(pred)
        n = float(self.catalog_.table(table).row_count)
        mass = np.asarray(total, dtype=np.float64)
        for c in keys:
            mass = np.multiply.outer(mass, summaries[c].total.astype(np.float64) / max(n, 1.0))
        return ConditionalBinDistribution(
            keys, mass, tuple(summaries[c].mfv.astype(np.float64) for c in keys),
            tuple(summaries[c].ndv.astype(np.float64) for c in keys), total, est.tag + "+independent")

    def _inference(self, q, graph, rule=BOUND, independent=False) -> Inference:
        return Inference(graph, lambda alias, keys: self.distribution(q, alias, keys, independent), rule)

    def _bins_used(self, graph: JoinGraph) -> dict:
        return {v.catalog_group: self.binmaps_[v.catalog_group].n_bins for v in graph.variables}

    def estimate(self, query, order=None, explain: bool = False) -> EstimateReport:
        """Upper-bound estimate for one query.

        ``order`` is ``None`` for the min-degree elimination order, a list of
        variable ids, or ``"induced"`` to evaluate the left-deep plan used by
        :meth:`estimate_subplans`.
        """
        t0 = time.perf_counter()
        q, graph = self._query(query)
        inf = self._inference(q, graph)
        trace = [] if explain else None
        if order == "induced":
            value = 1.0
            for comp in graph.components():
                value *= inf.plan_estimate(comp)
        else:
            value = inf.eliminate(q.aliases, order=order, trace=trace)
        extra = {}
        if explain:
            extra["explain"] = explain_graph(graph, trace)
        return EstimateReport(",".join(q.aliases), float(value), time.perf_counter() - t0,
                              self.estimator, self._bins_used(graph), tuple(q.aliases), extra)

    def predict(self, queries) -> np.ndarray:
        if isinstance(queries, (str, Query, Mapping)):
            queries = [queries]
        return np.array([self.estimate(q).estimate for q in queries], dtype=np.float64)

    def estimate_subplans(self, query, cap: int | None = None) -> tuple[list[EstimateReport], bool]:
        """Estimates for every connected alias subset, computed bottom-up with shared partial results."""
        q, graph = self._query(query)
        cap = self.subplan_cap if cap is None else cap
        plans, truncated = enumerate_subplans(graph, cap)
        inf = self._inference(q, graph)
        bins = self._bins_used(graph)
        reports = []
        for p in plans:
            t0 = time.perf_counter()
            value = inf.plan_estimate(p.aliases)
            reports.append(EstimateReport(p.id, value, time.perf_counter() - t0, self.estimator,
                                          bins, p.aliases))
        return reports, truncated

    def joinhist_estimate(self, query, mode: str = "classic") -> EstimateReport:
        """Histogram-join baselines.

        ``classic`` assumes uniform values inside a bin and filter/key
        independence; ``with_bound`` keeps independence but uses the bound
        rule; ``with_conditional`` uses the estimator's conditional masses
        with the uniformity rule; ``both`` is :meth:`estimate`.
        """
        check_choice(mode, JOINHIST_MODES, "mode")
        t0 = time.perf_counter()
        q, graph = self._query(query)
        if graph.is_cyclic:
            raise QueryError("histogram join baselines do not support cyclic queries")
        rule = UNIFORM if mode in ("classic", "with_conditional") else BOUND
        independent = mode in ("classic", "with_bound")
        value = self._inference(q, graph, rule, independent).eliminate(q.aliases)
        return EstimateReport(",".join(q.aliases), float(value), time.perf_counter() - t0,
                              f"joinhist-{mode}", self._bins_used(graph), tuple(q.aliases))

    # -- persistence -------------------------------------------------------
    def save(self, path):
        from joinbound.persistence import save_model
        save_model(self, path)

    @classmethod
    def load(cls, path) -> "JoinCardinalityEstimator":
        from joinbound.persistence import load_model
        return load_model(path)


def explain_graph(graph: JoinGraph, trace) -> dict:
    return {
        "variables": [{"id": v.id, "group": v.catalog_group, "members": [f"{a}.{c}" for a, c in v.members]}
                      for v in graph.variables],
        "factors": trace or [],
        "edges": sorted([a, v] for (a, _), v in graph.var_of.items()),
        "cyclic": graph.is_cyclic,
        "self_join": graph.has_self_join,
    }


def _empty_like(table: Table) -> Table:
    return table.take(np.zeros(0, dtype=np.int64))


def remove_rows(table: Table, deleted: Table) -> Table:
    """Drop one occurrence of every row of ``deleted`` from ``table``."""
    want: dict = {}
    for r in deleted.row_keys():
        want[r] = want.get(r, 0) + 1
    keep = np.ones(table.n_rows, dtype=bool)
    for i, r in enumerate(table.row_keys()):
        n = want.get(r)
        if n:
            keep[i] = False
            if n == 1:
                del want[r]
            else:
                want[r] = n - 1
    if want:
        sample = next(iter(want))
        raise DataError(f"{table.name}: cannot delete {sum(want.values())} row(s) not present, e.g. {sample}")
    return table.take(np.flatnonzero(keep))


def delta_digest(inserted: Mapping[str, Table], deleted: Mapping[str, Table]) -> str:
    h = hashlib.sha256()
    for tag, part in (("+", inserted), ("-", deleted)):
        for name in sorted(part):
            h.update(f"{tag}{name}:{table_digest(part[name])}".encode())
    return h.hexdigest()


def read_delta(source, table_def, catalog, encoder) -> tuple[Table, Table]:
    """Split a delta CSV into inserted and deleted rows by its optional ``_op`` column."""
    from joinbound.catalog import _read_source
    text = _read_source(source)
    rows = list(csv.reader(io.StringIO(text), strict=True))
    if not rows:
        raise DataError(f"{table_def.name}: empty delta file")
    header = rows[0]
    op_idx = header.index("_op") if "_op" in header else None
    cols = [h for i, h in enumerate(header) if i != op_idx]
    parts = {"insert": [], "delete": []}
    for n, r in enumerate(rows[1:], start=1):
        op = "insert"
        if op_idx is not None:
            if op_idx >= len(r):
                raise DataError(f"{table_def.name}, delta row {n}: missing _op field")
            op = r[op_idx].strip().lower() or "insert"
            if op not in parts:
                raise DataError(f"{table_def.name}, delta row {n}: unknown _op {r[op_idx]!r}")
        parts[op].append([x for i, x in enumerate(r) if i != op_idx])
    out = []
    for op in ("insert", "delete"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerows(parts[op])
        table, _ = ingest_table(buf.getvalue(), table_def, catalog, encoder)
        out.append(table)
    return out[0], out[1]
