"""Tree-structured (Chow-Liu) model over binned join keys and discretised filter columns.

The model keeps integer counts for every node and every tree edge, so
inserts and deletes only touch the delta rows. Conditional tables are
derived from those counts on demand with additive smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from joinbound.catalog import Table
from joinbound.estimators.base import TableEstimator
from joinbound.estimators.sampling import Sampling
from joinbound.predicates import And, Atom, Not, Or, Predicate, atoms, eval_predicate, predicate_mask

MAX_CATEGORIES = 64
QUANTILE_REPS = 16
OTHER_REPS = 256
MAX_TERMS = 256


def entropy(x) -> float:
    _, counts = np.unique(np.asarray(x), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(x, y) -> float:
    """Empirical mutual information in nats between two discrete columns."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.size == 0:
        return 0.0
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    return _mi_codes(xi.ravel(), yi.ravel(), int(xi.max()) + 1, int(yi.max()) + 1)


def _mi_codes(a: np.ndarray, b: np.ndarray, sa: int, sb: int) -> float:
    n = a.size
    if n == 0:
        return 0.0
    joint = np.bincount(a * sb + b, minlength=sa * sb).reshape(sa, sb).astype(np.float64)
    return _mi_joint(joint)


def _mi_joint(joint: np.ndarray) -> float:
    n = joint.sum()
    if n <= 0:
        return 0.0
    pa = joint.sum(axis=1) / n
    pb = joint.sum(axis=0) / n
    nz = joint > 0
    p = joint[nz] / n
    denom = np.outer(pa, pb)[nz]
    return float(max(0.0, (p * np.log(p / denom)).sum()))


def max_spanning_tree(names: list[str], weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal on a complete graph; heavier edges first, ties by edge name."""
    n = len(names)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            a, b = sorted((names[i], names[j]))
            edges.append((-round(float(weights[i, j]), 12), a, b, i, j))
    edges.sort()
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = []
    for _, _, _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            chosen.append((i, j))
    return chosen


@dataclass
class Discretizer:
    """Maps one column's cells to at most 64 categories plus a trailing null state.

    Each category carries weighted representative values used to judge how
    much of it a predicate keeps.
    """

    column: str
    mode: str                 # "exact", "quantile" or "topk"
    numeric: bool
    categories: list          # exact/topk: category values; quantile: unused
    edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rep_values: list = field(default_factory=list)
    rep_cats: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rep_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_categories(self) -> int:
        if self.mode == "quantile":
            return int(self.edges.size + 1)
        if self.mode == "topk":
            return len(self.categories) + 1
        return len(self.categories)

    @property
    def n_states(self) -> int:
        return self.n_categories + 1

    @classmethod
    def fit(cls, column: str, values: np.ndarray, valid: np.ndarray, numeric: bool) -> "Discretizer":
        vals = values[valid]
        if numeric:
            uniq, counts = np.unique(vals, return_counts=True)
            if uniq.size <= MAX_CATEGORIES:
                cats = uniq.tolist()
                return cls(column, "exact", True, cats, rep_values=list(cats),
                           rep_cats=np.arange(len(cats), dtype=np.int64),
                           rep_weights=np.ones(len(cats)))
            srt = np.sort(vals)
            qs = np.quantile(srt, np.arange(1, MAX_CATEGORIES) / MAX_CATEGORIES, method="lower")
            edges = np.unique(qs)
            d = cls(column, "quantile", True, [], edges=edges)
            codes = np.searchsorted(edges, srt, side="right")
            reps, rcats = [], []
            for c in range(d.n_categories):
                members = srt[codes == c]
                if members.size == 0:
                    continue
                pick = np.unique(np.linspace(0, members.size - 1, min(QUANTILE_REPS, members.size))
                                 .round().astype(np.int64))
                reps.extend(members[pick].tolist())
                rcats.extend([c] * pick.size)
            d.rep_values = reps
            d.rep_cats = np.asarray(rcats, dtype=np.int64)
            d.rep_weights = _equal_weights(d.rep_cats)
            return d
        counter: dict = {}
        for v in vals.tolist():
            counter[v] = counter.get(v, 0) + 1
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        top = [v for v, _ in ranked[:MAX_CATEGORIES - 1]]
        rest = ranked[MAX_CATEGORIES - 1:][:OTHER_REPS]
        reps = top + [v for v, _ in rest]
        rcats = list(range(len(top))) + [len(top)] * len(rest)
        weights = [1.0] * len(top) + [float(c) for _, c in rest]
        return cls(column, "topk", False, top, rep_values=reps,
                   rep_cats=np.asarray(rcats, dtype=np.int64), rep_weights=np.asarray(weights))

    def encode(self, values: np.ndarray, valid: np.ndarray) -> np.ndarray:
        null_state = self.n_categories
        out = np.full(values.shape[0], null_state, dtype=np.int64)
        if not valid.any():
            return out
        vals = values[valid]
        if self.mode == "quantile":
            out[valid] = np.searchsorted(self.edges, vals.astype(np.float64), side="right")
        elif self.mode == "exact":
            if not self.categories:
                return out
            cats = np.asarray(self.categories, dtype=np.float64)
            v = vals.astype(np.float64)
            pos = np.clip(np.searchsorted(cats, v), 0, cats.size - 1)
            left = np.clip(pos - 1, 0, cats.size - 1)
            use_left = np.abs(v - cats[left]) <= np.abs(cats[pos] - v)
            out[valid] = np.where(cats[pos] == v, pos, np.where(use_left, left, pos))
        else:
            lookup = {v: i for i, v in enumerate(self.categories)}
            other = len(self.categories)
            out[valid] = np.fromiter((lookup.get(v, other) for v in vals.tolist()),
                                     dtype=np.int64, count=vals.size)
        return out

    def evidence(self, pred: Predicate) -> np.ndarray:
        """Fraction of each state's representatives that satisfy a single-column predicate."""
        lam = np.zeros(self.n_states)
        n = len(self.rep_values)
        if n:
            arr = np.empty(n, dtype=np.float64 if self.numeric else object)
            arr[:] = self.rep_values
            hit = predicate_mask(pred, {self.column: (arr, np.ones(n, dtype=bool))}, n)
            k = self.n_categories
            num = np.bincount(self.rep_cats, weights=self.rep_weights * hit, minlength=k)
            den = np.bincount(self.rep_cats, weights=self.rep_weights, minlength=k)
            lam[:k] = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
        lam[-1] = 1.0 if eval_predicate({self.column: None}, pred) else 0.0
        return lam

    def to_meta(self) -> dict:
        return {"column": self.column, "mode": self.mode, "numeric": self.numeric,
                "categories": list(self.categories), "edges": [float(e) for e in self.edges],
                "rep_values": list(self.rep_values), "rep_cats": self.rep_cats.tolist(),
                "rep_weights": [float(w) for w in self.rep_weights]}

    @classmethod
    def from_meta(cls, m: dict) -> "Discretizer":
        return cls(m["column"], m["mode"], m["numeric"], list(m["categories"]),
                   np.asarray(m["edges"], dtype=np.float64), list(m["rep_values"]),
                   np.asarray(m["rep_cats"], dtype=np.int64), np.asarray(m["rep_weights"], dtype=np.float64))


def _equal_weights(cats: np.ndarray) -> np.ndarray:
    if cats.size == 0:
        return np.zeros(0)
    per = np.bincount(cats)
    return 1.0 / per[cats]


class _TooComplex(Exception):
    pass


def expand_terms(pred: Predicate, limit: int = MAX_TERMS) -> list[tuple[int, dict]]:
    """Rewrite ``pred`` as a signed sum of conjunctions of single-column predicates.

    The indicator of ``pred`` equals ``sum(sign * prod(indicator(p) for p in term.values()))``.
    """
    cols = pred.columns()
    if len(cols) == 1:
        return [(1, {next(iter(cols)): pred})]
    if isinstance(pred, Not):
        return _check([(1, {})] + [(-s, t) for s, t in expand_terms(pred.child, limit)], limit)
    if isinstance(pred, And):
        acc = [(1, {})]
        for child in pred.children:
            acc = _check(_product(acc, expand_terms(child, limit)), limit)
        return acc
    if isinstance(pred, Or):
        acc = expand_terms(pred.children[0], limit)
        for child in pred.children[1:]:
            other = expand_terms(child, limit)
            both = _product(acc, other)
            acc = _check(acc + other + [(-s, t) for s, t in both], limit)
        return acc
    raise TypeError(f"not a predicate: {pred!r}")


def _product(xs, ys):
    out = []
    for sx, tx in xs:
        for sy, ty in ys:
            t = dict(tx)
            for c, p in ty.items():
                t[c] = And((t[c], p)) if c in t else p
            out.append((sx * sy, t))
    return out


def _check(terms, limit):
    if len(terms) > limit:
        raise _TooComplex
    return terms


def _outer_on_first(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two arrays sharing axis 0, outer product over the remaining axes."""
    ra, rb = a.ndim - 1, b.ndim - 1
    return a.reshape(a.shape + (1,) * rb) * b.reshape(b.shape[:1] + (1,) * ra + b.shape[1:])


class ChowLiu(TableEstimator):
    """Tree-factorised joint over key bins and filter-column categories."""

    tag = "chowliu"

    def __init__(self, smoothing: float = 1.0, rate: float = 0.01, seed=0, filter_columns=None):
        super().__init__()
        self.smoothing = float(smoothing)
        self.rate = rate
        self.seed = seed
        self.filter_columns = filter_columns
        self.node_names: list[str] = []
        self.node_columns: list[str] = []
        self.node_is_key: list[bool] = []
        self.n_states: list[int] = []
        self.discretizers: dict[str, Discretizer] = {}
        self.edges: list[tuple[int, int]] = []       # (parent, child), breadth-first from root 0
        self.mi: dict[tuple[int, int], float] = {}
        self.node_counts: list[np.ndarray] = []
        self.edge_counts: list[np.ndarray] = []
        self.fallback: Sampling | None = None

    # -- structure ---------------------------------------------------------
    def _codes(self, table: Table) -> list[np.ndarray]:
        out = []
        for col, is_key in zip(self.node_columns, self.node_is_key):
            values, valid = table.column(col)
            if is_key:
                bm = self.binmaps[col]
                c = np.where(valid, bm.lookup(values), bm.n_bins).astype(np.int64)
            else:
                c = self.discretizers[col].encode(values, valid)
            out.append(c)
        return out

    def fit(self, table: Table, binmaps):
        self.table = table
        self.binmaps = dict(binmaps)
        tdef = table.definition
        keys = [c for c in tdef.key_columns if c in self.binmaps]
        if self.filter_columns is None:
            attrs = [c.name for c in tdef.columns if not c.is_key]
        else:
            attrs = [c for c in self.filter_columns if c in tdef.column_names and c not in keys]
        self.discretizers = {}
        for c in attrs:
            values, valid = table.column(c)
            numeric = tdef.column(c).kind in ("integer", "float")
            self.discretizers[c] = Discretizer.fit(c, values, valid, numeric)
        nodes = sorted([(f"key:{c}", c, True) for c in keys] + [(f"attr:{c}", c, False) for c in attrs])
        self.node_names = [n for n, _, _ in nodes]
        self.node_columns = [c for _, c, _ in nodes]
        self.node_is_key = [k for _, _, k in nodes]
        self.n_states = [self.binmaps[c].n_bins + 1 if k else self.discretizers[c].n_states
                         for _, c, k in nodes]
        codes = self._codes(table)
        n = len(nodes)
        weights = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                weights[i, j] = weights[j, i] = _mi_codes(codes[i], codes[j], self.n_states[i], self.n_states[j])
        undirected = max_spanning_tree(self.node_names, weights)
        self.mi = {(i, j): float(weights[i, j]) for i, j in undirected}
        self.edges = _orient(n, undirected)
        self.node_counts = [np.bincount(c, minlength=s).astype(np.int64) for c, s in zip(codes, self.n_states)]
        self.edge_counts = [self._pair_counts(codes, p, c) for p, c in self.edges]
        self.fallback = Sampling(self.rate, self.seed).fit(table, binmaps)
        return self

    def _pair_counts(self, codes, p, c) -> np.ndarray:
        sp, sc = self.n_states[p], self.n_states[c]
        return np.bincount(codes[p] * sc + codes[c], minlength=sp * sc).reshape(sp, sc).astype(np.int64)

    @property
    def n_rows(self) -> int:
        return int(self.node_counts[0].sum()) if self.node_counts else (self.table.n_rows if self.table else 0)

    def total_mi(self) -> float:
        return float(sum(self.mi.values()))

    def root_marginal(self) -> np.ndarray:
        a = self.smoothing
        counts = self.node_counts[0].astype(np.float64)
        return (counts + a) / (counts.sum() + a * counts.size)

    def cpt(self, e: int) -> np.ndarray:
        """``P(child state | parent state)``, rows indexed by parent state."""
        a = self.smoothing
        counts = self.edge_counts[e].astype(np.float64)
        return (counts + a) / (counts.sum(axis=1, keepdims=True) + a * counts.shape[1])

    # -- inference ---------------------------------------------------------
    def joint(self, open_nodes, evidence: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """``P(open nodes, evidence)`` by summing out every other node along the tree."""
        evidence = evidence or {}
        n = len(self.node_names)
        open_nodes = list(open_nodes)
        children: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
        for e, (p, c) in enumerate(self.edges):
            children[p].append((e, c))
        order = [0]
        for v in order:
            order.extend(c for _, c in children[v])
        beta: dict[int, tuple[np.ndarray, list[int]]] = {}
        for v in reversed(order):
            arr = evidence[v].astype(np.float64) if v in evidence else np.ones(self.n_states[v])
            labels: list[int] = []
            for e, c in children[v]:
                b, bl = beta.pop(c)
                T = self.cpt(e)
                if c in open_nodes:
                    msg = T.reshape(T.shape + (1,) * (b.ndim - 1)) * b[None]
                    ml = [c] + bl
                else:
                    msg = np.tensordot(T, b, axes=1)
                    ml = bl
                arr = _outer_on_first(arr, msg)
                labels = labels + ml
            beta[v] = (arr, labels)
        arr, labels = beta[0]
        root = self.root_marginal()
        arr = root.reshape(root.shape + (1,) * (arr.ndim - 1)) * arr
        if 0 in open_nodes:
            labels = [0] + labels
        else:
            arr = arr.sum(axis=0)
        if not open_nodes:
            return np.asarray(arr.sum() if arr.ndim else arr)
        return np.transpose(arr, [labels.index(v) for v in open_nodes])

    def _supported(self, a: Atom) -> bool:
        return a.column in self.discretizers and a.op not in ("LIKE", "NOT LIKE")

    def _relax(self, pred):
        """Drop conjuncts the model cannot encode. Returns (relaxed, exact)."""
        if pred is None:
            return None, True
        if all(self._supported(a) for a in atoms(pred)):
            return pred, True
        if isinstance(pred, And):
            keep = [c for c in pred.children if all(self._supported(a) for a in atoms(c))]
            if not keep:
                return None, False
            return (keep[0] if len(keep) == 1 else And(tuple(keep))), False
        return None, False

    def _model_mass(self, pred, keys):
        key_nodes = [self.node_names.index(f"key:{k}") for k in keys]
        N = float(self.n_rows)
        if pred is None:
            terms = [(1, {})]
        else:
            terms = expand_terms(pred)
        shape = tuple(self.n_states[i] for i in key_nodes)
        acc = np.zeros(shape)
        for sign, term in terms:
            ev = {}
            for col, p in term.items():
                node = self.node_names.index(f"attr:{col}")
                ev[node] = self.discretizers[col].evidence(p)
            acc = acc + sign * self.joint(key_nodes, ev)
        acc = np.maximum(acc, 0.0) * N
        total = float(acc.sum())
        sl = tuple(slice(0, s - 1) for s in shape)
        return acc[sl], total

    def _mass(self, pred, keys):
        for k in keys:
            if f"key:{k}" not in self.node_names:
                raise KeyError(f"key {k!r} is not modelled")
        relaxed, exact = self._relax(pred)
        try:
            mass, total = self._model_mass(relaxed, keys)
        except _TooComplex:
            return self.fallback._mass(pred, keys)
        if exact:
            return mass, total
        true_total = self.fallback._mass(pred, ())[1]
        if total <= 0:
            return np.zeros_like(mass), true_total
        return mass * (true_total / total), true_total

    def update(self, table, inserted, deleted):
        for sign, delta in ((1, inserted), (-1, deleted)):
            if delta is None or delta.n_rows == 0:
                continue
            codes = self._codes(delta)
            for i, c in enumerate(codes):
                self.node_counts[i] = self.node_counts[i] + sign * np.bincount(c, minlength=self.n_states[i])
            for e, (p, c) in enumerate(self.edges):
                self.edge_counts[e] = self.edge_counts[e] + sign * self._pair_counts(codes, p, c)
        self.table = table
        self.fallback.update(table, inserted, deleted)

    # -- persistence -------------------------------------------------------
    def get_state(self):
        fb_meta, fb_arrays = self.fallback.get_state()
        meta = {
            "smoothing": self.smoothing, "rate": self.rate, "seed": self.seed,
            "filter_columns": self.filter_columns,
            "node_names": self.node_names, "node_columns": self.node_columns,
            "node_is_key": self.node_is_key, "n_states": self.n_states,
            "edges": [list(e) for e in self.edges],
            "mi": [[i, j, w] for (i, j), w in sorted(self.mi.items())],
            "discretizers": {c: d.to_meta() for c, d in sorted(self.discretizers.items())},
            "fallback": fb_meta,
        }
        arrays = {f"node{i}": c for i, c in enumerate(self.node_counts)}
        arrays.update({f"edge{e}": c for e, c in enumerate(self.edge_counts)})
        arrays.update({f"fallback_{k}": v for k, v in fb_arrays.items()})
        return meta, arrays

    def set_state(self, meta, arrays, table, binmaps):
        super().set_state(meta, arrays, table, binmaps)
        self.smoothing = float(meta["smoothing"])
        self.rate, self.seed = meta["rate"], meta["seed"]
        self.filter_columns = meta["filter_columns"]
        self.node_names = list(meta["node_names"])
        self.node_columns = list(meta["node_columns"])
        self.node_is_key = list(meta["node_is_key"])
        self.n_states = [int(s) for s in meta["n_states"]]
        self.edges = [tuple(e) for e in meta["edges"]]
        self.mi = {(int(i), int(j)): float(w) for i, j, w in meta["mi"]}
        self.discretizers = {c: Discretizer.from_meta(m) for c, m in meta["discretizers"].items()}
        self.node_counts = [np.asarray(arrays[f"node{i}"], dtype=np.int64) for i in range(len(self.node_names))]
        self.edge_counts = [np.asarray(arrays[f"edge{e}"], dtype=np.int64) for e in range(len(self.edges))]
        fb = {k[len("fallback_"):]: v for k, v in arrays.items() if k.startswith("fallback_")}
        self.fallback = Sampling(self.rate, self.seed).set_state(meta["fallback"], fb, table, binmaps)
        return self


def _orient(n: int, undirected) -> list[tuple[int, int]]:
    """Direct tree edges away from node 0, breadth first, neighbours in index order."""
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j in undirected:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    queue = [0]
    out = []
    for v in queue:
        for w in sorted(adj[v]):
            if w not in seen:
                seen.add(w)
                queue.append(w)
                out.append((v, w))
    return out

