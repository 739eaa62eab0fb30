"""Ground truth and test data: exact join counts, synthetic databases, workloads, error metrics."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from joinbound.catalog import Database, load_schema, write_csv
from joinbound.exceptions import DataError, UsageError
from joinbound.predicates import And, Atom, Or, eval_predicate, table_mask
from joinbound.queryir import Query, build_join_graph, parse_query

DEFAULT_MEMORY_CAP = 5_000_000   # distinct intermediate groups


# -- exact cardinality ------------------------------------------------------

def _alias_groups(q: Query, graph, db: Database, alias: str, varset: list[int]):
    """Filtered rows of ``alias`` grouped by their values on ``varset``: {tuple: count}."""
    table = db.tables[q.aliases[alias]]
    rows = table_mask(table, q.filters.get(alias))
    per_var: dict[int, list[np.ndarray]] = defaultdict(list)
    for col, v in graph.alias_keys(alias):
        values, valid = table.column(col)
        rows &= valid
        per_var[v].append(values)
    cols = []
    for v in varset:
        first, *others = per_var[v]
        for o in others:
            rows &= first == o
        cols.append(first)
    # rows still need equal values across keys of variables not in varset
    for v, arrs in per_var.items():
        if v not in varset:
            for o in arrs[1:]:
                rows &= arrs[0] == o
    if not varset:
        return {(): int(rows.sum())}
    stacked = np.stack([c[rows] for c in cols], axis=1)
    if stacked.shape[0] == 0:
        return {}
    uniq, counts = np.unique(stacked, axis=0, return_counts=True)
    return {tuple(int(x) for x in u): int(c) for u, c in zip(uniq, counts)}


def exact_cardinality(query, db: Database, memory_cap: int = DEFAULT_MEMORY_CAP) -> int:
    """COUNT(*) of the filtered inner equi-join.

    Aliases are joined one at a time in connected order. The running result
    is kept as counts per value combination of the variables still needed by
    later aliases, so only those columns are ever materialised.
    """
    q = parse_query(query, db.catalog)
    graph = build_join_graph(q, db.catalog)
    total = 1
    for comp in graph.components():
        total *= _component_count(q, graph, db, comp, memory_cap)
        if total == 0:
            return 0
    return int(total)


def _component_count(q, graph, db, comp, memory_cap) -> int:
    order = [comp[0]]
    remaining = set(comp[1:])
    while remaining:
        nxt = min(a for a in remaining if graph.neighbours(a) & set(order))
        order.append(nxt)
        remaining.discard(nxt)
    var_aliases = {v.id: {a for a, _ in v.members} for v in graph.variables}
    state: dict[tuple, int] = {(): 1}
    state_vars: list[int] = []
    done: set[str] = set()
    for alias in order:
        mine = sorted(graph.alias_vars(alias))
        done.add(alias)
        rest = set(comp) - done
        out_vars = sorted(v for v in set(state_vars) | set(mine) if var_aliases[v] & rest)
        shared = [v for v in mine if v in state_vars]
        groups = _alias_groups(q, graph, db, alias, mine)
        # hash the smaller side on the shared variables
        idx_state = [state_vars.index(v) for v in shared]
        idx_mine = [mine.index(v) for v in shared]
        table: dict[tuple, list] = defaultdict(list)
        for key, c in groups.items():
            table[tuple(key[i] for i in idx_mine)].append((key, c))
        new: dict[tuple, int] = defaultdict(int)
        for skey, sc in state.items():
            probe = tuple(skey[i] for i in idx_state)
            for mkey, mc in table.get(probe, ()):
                vals = dict(zip(state_vars, skey))
                vals.update(zip(mine, mkey))
                new[tuple(vals[v] for v in out_vars)] += sc * mc
        if len(new) > memory_cap:
            raise DataError(f"exact join state exceeds {memory_cap} groups")
        state, state_vars = dict(new), out_vars
        if not state:
            return 0
    return int(sum(state.values()))


def nested_loop_cardinality(query, db: Database) -> int:
    """Reference count by backtracking over rows; for small instances only."""
    q = parse_query(query, db.catalog)
    aliases = list(q.aliases)
    rows = {}
    for a in aliases:
        t = db.tables[q.aliases[a]]
        pred = q.filters.get(a)
        rows[a] = [r for r in (t.row(i) for i in range(t.n_rows)) if eval_predicate(r, pred)]
    conds = list(q.joins)

    def ok(assign):
        for (la, lc), (ra, rc) in conds:
            if la in assign and ra in assign:
                lv, rv = assign[la][lc], assign[ra][rc]
                if lv is None or rv is None or lv != rv:
                    return False
        return True

    def rec(i, assign):
        if i == len(aliases):
            return 1
        a = aliases[i]
        n = 0
        for r in rows[a]:
            assign[a] = r
            if ok(assign):
                n += rec(i + 1, assign)
            del assign[a]
        return n

    return rec(0, {})


# -- synthetic data -----------------------------------------------------------

WORDS = ["An", "Anna", "Bo", "Cy", "Dan", "Eve", "Fay", "Gus", "Hal", "Ivy", "Jo", "Kim"]


def zipf_probabilities(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-float(s))
    return w / w.sum()


def _gen_column(col: dict, n: int, rng: np.random.Generator, ctx: dict) -> list:
    gen = col.get("gen", "uniform")
    kind = col["kind"]
    if gen == "pk":
        start = int(col.get("start", 1))
        out = np.arange(start, start + n, dtype=np.int64)
    elif gen == "fk":
        ref = col.get("ref")
        if ref is not None:
            t, c = ref.split(".")
            if (t, c) not in ctx:
                raise UsageError(f"fk {col['name']} references {ref} before it is generated")
            domain = np.unique(np.asarray([v for v in ctx[(t, c)] if v is not None], dtype=np.int64))
        else:
            domain = np.arange(1, int(col["domain"]) + 1, dtype=np.int64)
        p = zipf_probabilities(domain.size, float(col.get("zipf", 0.0)))
        ranks = rng.choice(domain.size, size=n, p=p)
        perm = rng.permutation(domain.size)
        out = domain[perm[ranks]]
    elif gen == "uniform":
        lo, hi = col.get("low", 0), col.get("high", 100)
        if kind == "float":
            out = rng.uniform(lo, hi, size=n)
        else:
            out = rng.integers(int(lo), int(hi) + 1, size=n)
        if "corr" in col:
            base = np.asarray(ctx[(ctx["__table__"], col["corr"])], dtype=object)
            bv = np.array([np.nan if v is None else float(v) for v in base])
            order = np.argsort(np.argsort(np.nan_to_num(bv, nan=0.0), kind="stable"), kind="stable")
            rank = order / max(n - 1, 1)
            s = float(col.get("strength", 0.8))
            mixed = s * rank + (1 - s) * rng.random(n)
            vals = lo + (hi - lo) * mixed
            out = vals if kind == "float" else np.floor(vals + 0.5).astype(np.int64)
    elif gen == "choice":
        values = col["values"]
        p = col.get("p")
        out = np.asarray(values, dtype=object)[rng.choice(len(values), size=n, p=p)]
    elif gen == "words":
        k = int(col.get("words", 2))
        picks = rng.integers(0, len(WORDS), size=(n, k))
        out = np.array([" ".join(WORDS[j] for j in row) for row in picks], dtype=object)
    else:
        raise UsageError(f"unknown generator {gen!r}")
    vals = out.tolist()
    null_frac = float(col.get("null_frac", 0.0))
    if null_frac > 0:
        mask = rng.random(n) < null_frac
        vals = [None if m else v for v, m in zip(vals, mask.tolist())]
    return vals


def generate_db(spec: Mapping | str | os.PathLike, out_dir=None) -> Database:
    """Build a seeded synthetic database from a JSON-style spec.

    Foreign keys draw referenced values with Zipf-distributed frequencies
    (exponent ``zipf``) over a seeded permutation of the referenced domain.
    If ``out_dir`` is given, the schema and one CSV per table are written there.
    """
    if not isinstance(spec, Mapping):
        with open(spec, encoding="utf-8") as fh:
            spec = json.load(fh)
    seed = int(spec.get("seed", 0))
    rng = np.random.default_rng(seed)
    joins = list(spec.get("joins", []))
    schema_tables = []
    for t in spec["tables"]:
        schema_tables.append({"name": t["name"],
                              "columns": [{"name": c["name"], "kind": c["kind"]} for c in t["columns"]]})
        for c in t["columns"]:
            if c.get("gen") == "fk" and c.get("ref"):
                rel = f"{c['ref']}={t['name']}.{c['name']}"
                if rel not in joins:
                    joins.append(rel)
    catalog = load_schema({"tables": schema_tables, "joins": joins})
    ctx: dict = {}
    columns = {}
    for t in spec["tables"]:
        n = int(t["rows"])
        if n < 0:
            raise UsageError(f"table {t['name']} has negative row count")
        ctx["__table__"] = t["name"]
        cols = {}
        for c in t["columns"]:
            vals = _gen_column(c, n, rng, ctx)
            cols[c["name"]] = vals
            ctx[(t["name"], c["name"])] = vals
        columns[t["name"]] = cols
    db = Database.from_columns(catalog, columns)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "schema.json", "w", encoding="utf-8") as fh:
            json.dump(db.catalog.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, table in db.tables.items():
            write_csv(table, out / f"{name}.csv")
    return db


def default_spec(seed: int = 0, scale: float = 1.0, zipf: float = 1.5, null_frac: float = 0.02) -> dict:
    """Four-table schema with two key groups; C and D each reference both A and B."""
    def rows(n):
        return max(2, int(round(n * scale)))

    return {
        "seed": seed,
        "tables": [
            {"name": "A", "rows": rows(400), "columns": [
                {"name": "id", "kind": "integer-key", "gen": "pk"},
                {"name": "a1", "kind": "integer", "gen": "uniform", "low": 0, "high": 99,
                 "corr": "id", "strength": 0.7},
                {"name": "a2", "kind": "categorical", "gen": "choice", "values": ["x", "y", "z", "w"],
                 "p": [0.4, 0.3, 0.2, 0.1]},
            ]},
            {"name": "B", "rows": rows(1500), "columns": [
                {"name": "id", "kind": "integer-key", "gen": "pk"},
                {"name": "Aid", "kind": "integer-key", "gen": "fk", "ref": "A.id", "zipf": zipf,
                 "null_frac": null_frac},
                {"name": "b1", "kind": "integer", "gen": "uniform", "low": 0, "high": 49,
                 "corr": "Aid", "strength": 0.6, "null_frac": null_frac},
                {"name": "b2", "kind": "text", "gen": "words"},
            ]},
            {"name": "C", "rows": rows(3000), "columns": [
                {"name": "Aid", "kind": "integer-key", "gen": "fk", "ref": "A.id", "zipf": zipf,
                 "null_frac": null_frac},
                {"name": "Bid", "kind": "integer-key", "gen": "fk", "ref": "B.id", "zipf": zipf},
                {"name": "c1", "kind": "float", "gen": "uniform", "low": 0.0, "high": 1.0},
            ]},
            {"name": "D", "rows": rows(2500), "columns": [
                {"name": "Bid", "kind": "integer-key", "gen": "fk", "ref": "B.id", "zipf": zipf * 0.8},
                {"name": "Aid", "kind": "integer-key", "gen": "fk", "ref": "A.id", "zipf": zipf,
                 "null_frac": null_frac},
                {"name": "d1", "kind": "integer", "gen": "uniform", "low": 0, "high": 9},
            ]},
        ],
    }


# -- workloads ------------------------------------------------------------------

TEMPLATES = ("chain", "star", "self", "cyclic")


def _random_filter(table, rng: np.random.Generator):
    cols = [c for c in table.definition.columns if not c.is_key]
    if not cols:
        return None
    c = cols[int(rng.integers(len(cols)))]
    values, valid = table.column(c.name)
    present = values[valid]
    if present.size == 0:
        return None
    lit = present[int(rng.integers(present.size))]
    lit = lit.item() if isinstance(lit, np.generic) else lit
    if c.kind == "text":
        word = lit.split()[0]
        return Atom(c.name, "LIKE", f"%{word}%")
    if c.kind == "categorical":
        other = present[int(rng.integers(present.size))]
        if rng.random() < 0.5:
            return Atom(c.name, "IN", tuple(sorted({lit, other})))
        return Atom(c.name, "=", lit)
    op = ["<", "<=", ">", ">=", "="][int(rng.integers(5))]
    if c.kind == "float":
        lit = round(float(lit), 3)
    a = Atom(c.name, op, lit)
    roll = rng.random()
    if roll < 0.15:
        lit2 = present[int(rng.integers(present.size))]
        lit2 = lit2.item() if isinstance(lit2, np.generic) else lit2
        return Or((a, Atom(c.name, "=", lit2)))
    if roll < 0.25 and c.kind == "integer":
        lo, hi = sorted((int(lit), int(present[int(rng.integers(present.size))])))
        return And((Atom(c.name, ">=", lo), Atom(c.name, "<=", hi)))
    return a


def random_query(db: Database, n_aliases: int, template: str, rng: np.random.Generator,
                 filter_prob: float = 0.5) -> Query | None:
    """One random connected query; ``None`` when the template cannot be realised."""
    catalog = db.catalog
    tables = [t.name for t in catalog.tables]
    key_tables = [t for t in tables if catalog.table(t).key_columns]
    if not key_tables:
        return None
    aliases: dict[str, str] = {}
    joins = []

    def add_alias(table):
        name = f"t{len(aliases)}"
        aliases[name] = table
        return name

    first = add_alias(key_tables[int(rng.integers(len(key_tables)))])
    anchor_pool = [first]
    for _ in range(n_aliases - 1):
        if template == "star":
            base = first
        elif template in ("chain", "cyclic"):
            base = anchor_pool[-1]
        else:
            base = anchor_pool[int(rng.integers(len(anchor_pool)))]
        btab = aliases[base]
        col = catalog.table(btab).key_columns[int(rng.integers(len(catalog.table(btab).key_columns)))]
        group = catalog.group(catalog.group_of(btab, col))
        partners = list(group.members)
        if template == "self" and len(aliases) == 1:
            same = [m for m in partners if m[0] == btab]
            partners = same or partners
        pt, pc = partners[int(rng.integers(len(partners)))]
        new = add_alias(pt)
        joins.append(((base, col), (new, pc)))
        anchor_pool.append(new)
    if template == "cyclic":
        graph = build_join_graph(Query(dict(aliases), tuple(joins)), catalog)
        options = []
        names = sorted(aliases)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                for ca in catalog.table(aliases[a]).key_columns:
                    for cb in catalog.table(aliases[b]).key_columns:
                        if catalog.group_of(aliases[a], ca) != catalog.group_of(aliases[b], cb):
                            continue
                        va, vb = graph.var_of.get((a, ca)), graph.var_of.get((b, cb))
                        if va is not None and va == vb:
                            continue
                        trial = Query(dict(aliases), tuple(joins) + (((a, ca), (b, cb)),))
                        if build_join_graph(trial, catalog).is_cyclic:
                            options.append(((a, ca), (b, cb)))
        if not options:
            return None
        joins.append(options[int(rng.integers(len(options)))])
    filters = {}
    for a, t in aliases.items():
        if rng.random() < filter_prob:
            f = _random_filter(db.tables[t], rng)
            if f is not None:
                filters[a] = f
    return Query(aliases, tuple(joins), filters)


def generate_workload(db: Database, n: int, seed: int = 0, templates: Iterable[str] = TEMPLATES,
                      min_aliases: int = 2, max_aliases: int = 6, filter_prob: float = 0.5) -> list[Query]:
    rng = np.random.default_rng(seed)
    templates = list(templates)
    for t in templates:
        if t not in TEMPLATES:
            raise UsageError(f"unknown template {t!r}")
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 100:
            raise UsageError("could not realise the requested workload templates on this schema")
        template = templates[len(out) % len(templates)]
        size = int(rng.integers(min_aliases, max_aliases + 1))
        q = random_query(db, size, template, rng, filter_prob)
        if q is None:
            continue
        if template == "self":
            tabs = list(q.aliases.values())
            if len(set(tabs)) == len(tabs):
                continue
        out.append(q)
    return out


# -- metrics -----------------------------------------------------------------

def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = sorted_values.size
    if n == 0:
        return float("nan")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def error_metrics(estimates, truths, percentiles=(50, 95, 99)) -> dict:
    """Ratio estimate/true per query plus nearest-rank percentiles.

    Queries whose true count is zero get ratio ``estimate + 1`` and are
    left out of the aggregates; their number is reported.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    zero = tru == 0
    ratios = np.where(zero, est + 1.0, est / np.where(zero, 1.0, tru))
    kept = np.sort(ratios[~zero])
    out = {f"p{p}": nearest_rank(kept, p) for p in percentiles}
    out.update({
        "n": int(est.size), "n_zero_true": int(zero.sum()),
        "under_fraction": float((est[~zero] < tru[~zero]).mean()) if (~zero).any() else 0.0,
        "coverage": float((est[~zero] >= tru[~zero]).mean()) if (~zero).any() else 1.0,
        "ratios": ratios.tolist(),
    })
    return out


def evaluate_workload(model, queries, db: Database, truths=None, method=None) -> dict:
    """Estimate every query, compare with exact counts, and aggregate."""
    method = method or (lambda q: model.estimate(q).estimate)
    rows, ests, trus = [], [], []
    failed = 0
    for i, q in enumerate(queries):
        try:
            true = truths[i] if truths is not None else exact_cardinality(q, db)
            est = float(method(q))
        except DataError as exc:
            failed += 1
            rows.append({"query": i, "error": str(exc)})
            continue
        ests.append(est)
        trus.append(true)
        row = {"query": i, "estimate": est, "true": int(true)}
        if true == 0:
            row["zero_true"] = True
        rows.append(row)
    metrics = error_metrics(ests, trus)
    metrics["failed"] = failed
    metrics["rows"] = rows
    return metrics


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for r, row in zip(rows, cells):
        # numbers align right, text aligns left
        lines.append("  ".join(v.rjust(w) if isinstance(r.get(c), (int, float)) else v.ljust(w)
                               for v, w, c in zip(row, widths, columns)).rstrip())
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
