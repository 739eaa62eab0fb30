"""Factor-graph inference producing per-bin join-size upper bounds.

Each alias contributes a factor over the query variables its join keys
belong to. A factor holds expected filtered row counts per bin cell plus,
for every dimension, a per-bin cap on how many of its rows can share one
key value. Joining two factors on their shared variables takes, per cell,
``min(mass_f * cap_g, mass_g * cap_f)``; eliminating a variable sums its
axis away.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from joinbound.exceptions import QueryError
from joinbound.queryir import JoinGraph

BOUND = "bound"
UNIFORM = "uniform"


@dataclass
class Factor:
    vars: tuple[int, ...]
    mass: np.ndarray
    mfv: dict[int, np.ndarray]
    ndv: dict[int, np.ndarray]
    aliases: frozenset = field(default_factory=frozenset)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def describe(self) -> dict:
        return {"aliases": sorted(self.aliases), "vars": list(self.vars),
                "mass": self.mass.tolist(),
                "mfv": {str(v): self.mfv[v].tolist() for v in self.vars}}


def _expand(f: Factor, union: tuple[int, ...]) -> np.ndarray:
    shape = [f.mass.shape[f.vars.index(v)] if v in f.vars else 1 for v in union]
    return f.mass.reshape(shape)


def _along(vec: np.ndarray, v: int, union: tuple[int, ...]) -> np.ndarray:
    shape = [1] * len(union)
    shape[union.index(v)] = vec.size
    return vec.reshape(shape)


def _marginal(f: Factor, keep) -> np.ndarray:
    """Sum ``f.mass`` over every axis not in ``keep``; result axes follow ``f.vars`` order."""
    axes = tuple(i for i, v in enumerate(f.vars) if v not in keep)
    return f.mass.sum(axis=axes) if axes else f.mass


def _value_cap(f: Factor, on: list[int]) -> np.ndarray:
    """Upper bound on rows of ``f`` sharing one value combination of the variables ``on``.

    Returned over the grid of ``on`` (in ``f.vars`` order); zero where ``f`` has no mass.
    """
    marg = _marginal(f, set(on))
    sub = tuple(v for v in f.vars if v in on)
    cap = np.full(marg.shape, np.inf)
    for v in sub:
        cap = np.minimum(cap, _along(f.mfv[v], v, sub))
    cap = np.minimum(cap, np.maximum(marg, 1.0))
    return np.where(marg > 0, cap, 0.0)


def combine(f: Factor, g: Factor, rule: str = BOUND) -> Factor:
    """Join two factors on their shared variables, keeping every variable open."""
    union = tuple(sorted(set(f.vars) | set(g.vars)))
    shared = [v for v in union if v in f.vars and v in g.vars]
    Af, Ag = _expand(f, union), _expand(g, union)
    mfv: dict[int, np.ndarray] = {}
    ndv: dict[int, np.ndarray] = {}
    aliases = f.aliases | g.aliases

    if not shared:
        out = Af * Ag
        tf, tg = f.total, g.total
        for v in f.vars:
            mfv[v], ndv[v] = f.mfv[v] * tg, f.ndv[v]
        for v in g.vars:
            mfv[v], ndv[v] = g.mfv[v] * tf, g.ndv[v]
        return Factor(union, out, mfv, ndv, aliases)

    if rule == UNIFORM:
        denom = np.ones([1] * len(union))
        for v in shared:
            denom = denom * _along(np.maximum(f.ndv[v], g.ndv[v]), v, union)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(denom > 0, Af * Ag / np.where(denom > 0, denom, 1.0), 0.0)
    else:
        # per-cell caps on rows sharing one value of the shared variables
        mf = np.full([1] * len(union), np.inf)
        mg = np.full([1] * len(union), np.inf)
        for v in shared:
            mf = np.minimum(mf, _along(f.mfv[v], v, union))
            mg = np.minimum(mg, _along(g.mfv[v], v, union))
        mf = np.minimum(mf, np.maximum(Af, 1.0))
        mg = np.minimum(mg, np.maximum(Ag, 1.0))
        out = np.minimum(Af * mg, Ag * mf)

    for v in shared:
        cf = _value_cap(f, [v])
        cg = _value_cap(g, [v])
        mfv[v] = cf * cg
        ndv[v] = np.minimum(f.ndv[v], g.ndv[v])
    for own, other in ((f, g), (g, f)):
        if len(own.vars) == len(shared):
            continue
        other_cap = _value_cap(other, shared)          # over the shared grid
        sub_other = tuple(v for v in other.vars if v in shared)
        for w in own.vars:
            if w in shared:
                continue
            keep = set(shared) | {w}
            marg = _marginal(own, keep)
            sub = tuple(v for v in own.vars if v in keep)
            cap_b = other_cap.reshape([other_cap.shape[sub_other.index(v)] if v in shared else 1
                                       for v in sub])
            reach = np.where(marg > 0, cap_b, 0.0)
            axes = tuple(i for i, v in enumerate(sub) if v != w)
            best = reach.max(axis=axes) if axes else reach
            mfv[w] = own.mfv[w] * best
            ndv[w] = own.ndv[w]
    return Factor(union, out, mfv, ndv, aliases)


def sum_out(f: Factor, v: int) -> Factor:
    i = f.vars.index(v)
    vars_ = f.vars[:i] + f.vars[i + 1:]
    return Factor(vars_, f.mass.sum(axis=i),
                  {w: m for w, m in f.mfv.items() if w != v},
                  {w: m for w, m in f.ndv.items() if w != v}, f.aliases)


def sum_out_all(f: Factor, vars_) -> Factor:
    for v in sorted(vars_):
        if v in f.vars:
            f = sum_out(f, v)
    return f


def make_factor(alias: str, key_vars: list[tuple[str, int]], dist) -> Factor:
    """Turn a per-key distribution into a factor over variables.

    Two keys of one alias in the same variable must carry equal values, so
    the factor keeps only the diagonal of that pair of axes.
    """
    mass = np.asarray(dist.mass, dtype=np.float64)
    dims = [v for _, v in key_vars]
    mfvs = [np.asarray(m, dtype=np.float64) for m in dist.mfv]
    ndvs = [np.asarray(m, dtype=np.float64) for m in dist.ndv]
    while len(set(dims)) < len(dims):
        seen = {}
        for i, v in enumerate(dims):
            if v in seen:
                j = seen[v]
                break
            seen[v] = i
        mass = np.diagonal(mass, axis1=j, axis2=i).copy()
        m = np.minimum(mfvs[j], mfvs[i])
        n = np.minimum(ndvs[j], ndvs[i])
        for idx in sorted((i, j), reverse=True):
            del dims[idx], mfvs[idx], ndvs[idx]
        dims.append(v)
        mfvs.append(m)
        ndvs.append(n)
    order = sorted(range(len(dims)), key=lambda i: dims[i])
    mass = np.transpose(mass, order) if order else mass
    return Factor(tuple(dims[i] for i in order), np.ascontiguousarray(mass),
                  {dims[i]: mfvs[i] for i in order}, {dims[i]: ndvs[i] for i in order},
                  frozenset((alias,)))


Provider = Callable[[str, tuple], object]


class Inference:
    """Builds factors for alias subsets of one query and runs elimination on them.

    ``provider(alias, keys)`` returns a conditional bin distribution for
    the join-key columns ``keys`` of ``alias``. Base factors are cached for
    the lifetime of the object.
    """

    def __init__(self, graph: JoinGraph, provider: Provider, rule: str = BOUND):
        self.graph = graph
        self.provider = provider
        self.rule = rule
        self._base: dict = {}
        self._joined: dict = {}
        self.stats = {"combines": 0, "cache_hits": 0}

    # -- structure helpers ---------------------------------------------------
    def active_vars(self, subset) -> set[int]:
        """Variables with at least two member keys inside ``subset``."""
        out = set()
        for v in self.graph.variables:
            if sum(1 for a, _ in v.members if a in subset) >= 2:
                out.add(v.id)
        return out

    def _var_aliases(self, v: int, subset) -> set[str]:
        return {a for a, _ in self.graph.variables[v].members if a in subset}

    def boundary(self, part, target) -> frozenset:
        part = set(part)
        active = self.active_vars(target)
        out = set()
        for v in active:
            inside = self._var_aliases(v, target)
            if inside & part and inside - part:
                out.add(v)
        return frozenset(out)

    def base_factor(self, alias: str, active: set[int]) -> Factor:
        key_vars = [(c, v) for c, v in self.graph.alias_keys(alias) if v in active]
        ck = (alias, tuple(key_vars))
        f = self._base.get(ck)
        if f is None:
            dist = self.provider(alias, tuple(c for c, _ in key_vars))
            f = make_factor(alias, key_vars, dist)
            self._base[ck] = f
        return f

    # -- variable elimination -------------------------------------------------
    def eliminate(self, subset, order=None, trace: list | None = None) -> float:
        """Estimate the sub-query over ``subset`` by variable elimination.

        ``order`` fixes the variable order; by default the variable touching
        the fewest current factors goes next, ties by variable id.
        """
        subset = sorted(subset)
        active = self.active_vars(subset)
        factors = [self.base_factor(a, active) for a in subset]
        if trace is not None:
            trace.extend({"alias": a, **f.describe()} for a, f in zip(subset, factors))
        remaining = set(active)
        fixed = list(order) if order is not None else None
        while remaining:
            if fixed is not None:
                v = fixed.pop(0)
                if v not in remaining:
                    continue
            else:
                v = min(remaining, key=lambda x: (sum(1 for f in factors if x in f.vars), x))
            remaining.discard(v)
            touching = sorted((f for f in factors if v in f.vars), key=lambda f: min(f.aliases))
            rest = [f for f in factors if v not in f.vars]
            acc = touching[0]
            for f in touching[1:]:
                acc = combine(acc, f, self.rule)
                self.stats["combines"] += 1
            factors = rest + [sum_out(acc, v)]
        result = 1.0
        for f in sorted(factors, key=lambda f: min(f.aliases)):
            result *= float(f.mass.sum()) if f.mass.ndim else float(f.mass)
        return result

    # -- plan-shaped evaluation ----------------------------------------------
    def decompose(self, subset: frozenset) -> tuple[frozenset, str]:
        """Split ``subset`` into a connected part plus one alias; smallest part tuple wins."""
        best = None
        for r in sorted(subset):
            rest = subset - {r}
            if rest and self.graph.is_connected(rest):
                key = tuple(sorted(rest))
                if best is None or key < best[0]:
                    best = (key, r)
        if best is None:
            raise QueryError(f"alias set {sorted(subset)} is not connected")
        return frozenset(best[0]), best[1]

    def joined(self, part: frozenset, target: frozenset) -> Factor:
        """Factor for ``part`` with every variable closed except those shared with the rest of ``target``."""
        open_vars = self.boundary(part, target)
        ck = (part, open_vars)
        hit = self._joined.get(ck)
        if hit is not None:
            self.stats["cache_hits"] += 1
            return hit
        active = set(self.active_vars(part)) | set(open_vars)
        if len(part) == 1:
            (alias,) = tuple(part)
            f = self.base_factor(alias, active)
        else:
            left, r = self.decompose(part)
            fl = self.joined(left, target)
            fr = self.joined(frozenset((r,)), target)
            f = combine(fl, fr, self.rule)
            self.stats["combines"] += 1
        f = sum_out_all(f, [v for v in f.vars if v not in open_vars])
        self._joined[ck] = f
        return f

    def plan_estimate(self, subset) -> float:
        target = frozenset(subset)
        if not self.graph.is_connected(target):
            raise QueryError(f"alias set {sorted(target)} is not connected")
        f = self.joined(target, target)
        return float(f.mass.sum()) if f.mass.ndim else float(f.mass)


@dataclass
class EstimateReport:
    subplan: str
    estimate: float
    wall_time: float
    estimator: str
    bins: dict = field(default_factory=dict)
    aliases: tuple = ()
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"subplan": self.subplan, "aliases": list(self.aliases), "estimate": float(self.estimate),
             "wall_time": float(self.wall_time), "estimator": self.estimator,
             "bins": {str(k): int(v) for k, v in sorted(self.bins.items())}}
        d.update(self.extra)
        return d


def elimination_order(graph: JoinGraph, subset=None) -> list[int]:
    """Static min-degree order over alias incidences, ties by variable id."""
    subset = set(graph.query.aliases if subset is None else subset)
    incid = {v.id: {a for a, _ in v.members if a in subset} for v in graph.variables}
    live = {v for v, al in incid.items() if sum(1 for a, _ in graph.variables[v].members if a in subset) >= 2}
    factors = [{v for v in live if a in incid[v]} for a in sorted(subset)]
    order = []
    while live:
        v = min(live, key=lambda x: (sum(1 for f in factors if x in f), x))
        live.discard(v)
        merged = set().union(*(f for f in factors if v in f)) - {v}
        factors = [f for f in factors if v not in f] + [merged]
        order.append(v)
    return order


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
