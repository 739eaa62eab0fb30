"""SQL subset parser, query IR, join graph and connected sub-plan enumeration.

Grammar::

    SELECT COUNT(*) FROM table [AS] alias {, table [AS] alias}
    [WHERE condition {AND condition}] [;]

A condition is either an equality between two join-key columns or a
filter over the columns of one alias (AND/OR/NOT over comparisons, IN,
LIKE, BETWEEN).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping

from joinbound.catalog import Catalog, parse_key_ref
from joinbound.exceptions import QueryError
from joinbound.predicates import (And, Atom, Not, Or, Predicate, check_types, conjoin, from_json,
                                  normalize, to_json, to_sql)

KEYWORDS = {"SELECT", "COUNT", "FROM", "AS", "WHERE", "AND", "OR", "NOT", "IN", "LIKE", "BETWEEN"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<str>'(?:[^']|'')*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*|"[^"]+")
  | (?P<op><>|!=|<=|>=|=|<|>)
  | (?P<punct>[(),.*;])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    value: object
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QueryError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        s = m.group()
        col = pos - line_start + 1
        if kind == "ws":
            nl = s.count("\n")
            if nl:
                line += nl
                line_start = pos + s.rindex("\n") + 1
        elif kind == "num":
            value = float(s) if any(ch in s for ch in ".eE") else int(s)
            tokens.append(Token("num", s, value, line, col))
        elif kind == "str":
            tokens.append(Token("str", s, s[1:-1].replace("''", "'"), line, col))
        elif kind == "ident":
            if s.startswith('"'):
                tokens.append(Token("ident", s, s[1:-1], line, col))
            elif s.upper() in KEYWORDS:
                tokens.append(Token("kw", s, s.upper(), line, col))
            else:
                tokens.append(Token("ident", s, s, line, col))
        else:
            tokens.append(Token(kind, s, s, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", None, line, pos - line_start + 1))
    return tokens


@dataclass(frozen=True)
class ColRef:
    alias: str | None
    column: str
    line: int
    col: int


@dataclass
class _Cmp:
    left: ColRef
    op: str
    right: object          # ColRef or literal
    line: int
    col: int


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        return QueryError(msg, tok.line, tok.col)

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def accept(self, kind, value=None) -> Token | None:
        t = self.tok
        if t.kind == kind and (value is None or t.value == value):
            return self.advance()
        return None

    def expect(self, kind, value=None, what=None) -> Token:
        t = self.accept(kind, value)
        if t is None:
            found = self.tok.text or "end of input"
            raise self.error(f"expected {what or value or kind}, found {found!r}")
        return t

    def query(self):
        self.expect("kw", "SELECT")
        self.expect("kw", "COUNT")
        self.expect("punct", "(")
        self.expect("punct", "*")
        self.expect("punct", ")")
        self.expect("kw", "FROM")
        tables = [self.table_ref()]
        while self.accept("punct", ","):
            tables.append(self.table_ref())
        where = None
        if self.accept("kw", "WHERE"):
            where = self.expr()
        self.accept("punct", ";")
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r}")
        return tables, where

    def table_ref(self):
        t = self.expect("ident", what="table name")
        alias_tok = t
        if self.accept("kw", "AS"):
            alias_tok = self.expect("ident", what="alias")
        elif self.tok.kind == "ident":
            alias_tok = self.advance()
        return t, alias_tok

    def expr(self):
        node = self.conj()
        items = [node]
        while self.accept("kw", "OR"):
            items.append(self.conj())
        return items[0] if len(items) == 1 else ("or", items)

    def conj(self):
        items = [self.neg()]
        while self.accept("kw", "AND"):
            items.append(self.neg())
        return items[0] if len(items) == 1 else ("and", items)

    def neg(self):
        if self.accept("kw", "NOT"):
            return ("not", self.neg())
        if self.accept("punct", "("):
            e = self.expr()
            self.expect("punct", ")")
            return e
        return self.comparison()

    def colref(self) -> ColRef:
        t = self.expect("ident", what="column")
        if self.accept("punct", "."):
            c = self.expect("ident", what="column")
            return ColRef(t.value, c.value, t.line, t.col)
        return ColRef(None, t.value, t.line, t.col)

    def literal(self):
        t = self.tok
        if t.kind in ("num", "str"):
            self.advance()
            return t.value
        raise self.error(f"expected a literal, found {t.text or 'end of input'!r}")

    def comparison(self):
        start = self.tok
        left = self.colref()
        negate = bool(self.accept("kw", "NOT"))
        if self.accept("kw", "IN"):
            self.expect("punct", "(")
            vals = [self.literal()]
            while self.accept("punct", ","):
                vals.append(self.literal())
            self.expect("punct", ")")
            node = _Cmp(left, "IN", tuple(vals), start.line, start.col)
            return ("not", node) if negate else node
        if self.accept("kw", "LIKE"):
            pat = self.tok
            if pat.kind != "str":
                raise self.error("LIKE needs a string pattern")
            self.advance()
            return _Cmp(left, "NOT LIKE" if negate else "LIKE", pat.value, start.line, start.col)
        if self.accept("kw", "BETWEEN"):
            lo = self.literal()
            self.expect("kw", "AND")
            hi = self.literal()
            node = _Cmp(left, "BETWEEN", (lo, hi), start.line, start.col)
            return ("not", node) if negate else node
        if negate:
            raise self.error("expected IN, LIKE or BETWEEN after NOT")
        op_tok = self.expect("op", what="comparison operator")
        op = "!=" if op_tok.value in ("<>", "!=") else op_tok.value
        if self.tok.kind == "ident":
            right = self.colref()
        else:
            right = self.literal()
        return _Cmp(left, op, right, start.line, start.col)


JoinCond = tuple[tuple[str, str], tuple[str, str]]


@dataclass
class Query:
    """Normalised query: sorted aliases, sorted join conditions, one predicate per alias."""

    aliases: dict[str, str]
    joins: tuple[JoinCond, ...] = ()
    filters: dict[str, Predicate] = field(default_factory=dict)

    def __post_init__(self):
        self.aliases = {a: self.aliases[a] for a in sorted(self.aliases)}
        conds = set()
        for l, r in self.joins:
            l, r = (tuple(l), tuple(r))
            if l == r:
                continue
            conds.add(tuple(sorted((l, r))))
        self.joins = tuple(sorted(conds))
        self.filters = {a: normalize(p) for a, p in sorted(self.filters.items()) if p is not None}
        for (la, _), (ra, _) in self.joins:
            for a in (la, ra):
                if a not in self.aliases:
                    raise QueryError(f"join condition references undeclared alias {a!r}")
        for a in self.filters:
            if a not in self.aliases:
                raise QueryError(f"filter references undeclared alias {a!r}")

    def __eq__(self, other):
        return (isinstance(other, Query) and self.aliases == other.aliases
                and self.joins == other.joins and self.to_json() == other.to_json())

    def __hash__(self):
        return hash(self.to_sql())

    def to_sql(self) -> str:
        froms = ", ".join(f"{t} AS {a}" for a, t in self.aliases.items())
        conds = [f"{la}.{lc} = {ra}.{rc}" for (la, lc), (ra, rc) in self.joins]
        conds += [to_sql(p, a) for a, p in self.filters.items()]
        sql = f"SELECT COUNT(*) FROM {froms}"
        if conds:
            sql += " WHERE " + " AND ".join(conds)
        return sql

    def to_json(self) -> dict:
        return {
            "aliases": dict(self.aliases),
            "joins": [f"{la}.{lc}={ra}.{rc}" for (la, lc), (ra, rc) in self.joins],
            "filters": {a: to_json(p) for a, p in self.filters.items()},
        }

    @classmethod
    def from_json(cls, obj, catalog: Catalog | None = None) -> "Query":
        if isinstance(obj, str):
            obj = json.loads(obj)
        joins = []
        for j in obj.get("joins", []):
            if isinstance(j, str):
                if j.count("=") != 1:
                    raise QueryError(f"malformed join {j!r}")
                l, r = j.split("=")
                joins.append((parse_key_ref(l), parse_key_ref(r)))
            else:
                joins.append((parse_key_ref(j[0]), parse_key_ref(j[1])))
        filters = {}
        for a, p in obj.get("filters", {}).items():
            filters[a] = parse_filter(p, a) if isinstance(p, str) else from_json(p)
        q = cls(dict(obj["aliases"]), tuple(joins), filters)
        if catalog is not None:
            validate(q, catalog)
        return q

    @property
    def alias_list(self) -> list[str]:
        return list(self.aliases)


def parse_filter(text: str, alias: str) -> Predicate:
    """Parse a standalone filter expression; column qualifiers must be ``alias`` or absent."""
    p = _Parser(text)
    tree = p.expr()
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r}")

    def conv(node):
        if isinstance(node, _Cmp):
            if isinstance(node.right, ColRef):
                raise QueryError("column comparisons are not allowed in filters", node.line, node.col)
            if node.left.alias not in (None, alias):
                raise QueryError(f"filter for {alias!r} references alias {node.left.alias!r}",
                                 node.left.line, node.left.col)
            return Atom(node.left.column, node.op, node.right)
        tag, body = node
        if tag == "not":
            return Not(conv(body))
        return (And if tag == "and" else Or)(tuple(conv(c) for c in body))

    return conv(tree)


def parse_sql(text: str, catalog: Catalog) -> Query:
    """Parse and validate a ``SELECT COUNT(*)`` statement against ``catalog``."""
    p = _Parser(text)
    tables, where = p.query()
    aliases: dict[str, str] = {}
    for t, a in tables:
        if not catalog.has_table(t.value):
            raise QueryError(f"unknown table {t.value!r}", t.line, t.col)
        if a.value in aliases:
            raise QueryError(f"duplicate alias {a.value!r}", a.line, a.col)
        aliases[a.value] = t.value

    def resolve(ref: ColRef) -> tuple[str, str]:
        if ref.alias is not None:
            if ref.alias not in aliases:
                raise QueryError(f"unknown alias {ref.alias!r}", ref.line, ref.col)
            if not catalog.table(aliases[ref.alias]).has_column(ref.column):
                raise QueryError(f"unknown column {ref.alias}.{ref.column}", ref.line, ref.col)
            return ref.alias, ref.column
        owners = [a for a, t in aliases.items() if catalog.table(t).has_column(ref.column)]
        if not owners:
            raise QueryError(f"unknown column {ref.column!r}", ref.line, ref.col)
        if len(owners) > 1:
            raise QueryError(f"ambiguous column {ref.column!r} (in {', '.join(sorted(owners))})",
                             ref.line, ref.col)
        return owners[0], ref.column

    joins: list[JoinCond] = []
    per_alias: dict[str, list[Predicate]] = {}

    def conv(node) -> tuple[Predicate, set[str]]:
        if isinstance(node, _Cmp):
            if isinstance(node.right, ColRef):
                raise QueryError("join conditions must be top-level conjuncts", node.line, node.col)
            a, c = resolve(node.left)
            return Atom(c, node.op, node.right), {a}
        tag, body = node
        if tag == "not":
            inner, used = conv(body)
            return Not(inner), used
        parts = [conv(x) for x in body]
        used = set().union(*(u for _, u in parts))
        return (And if tag == "and" else Or)(tuple(x for x, _ in parts)), used

    conjuncts = []
    if where is not None:
        stack = [where]
        while stack:
            node = stack.pop(0)
            if isinstance(node, tuple) and node[0] == "and":
                stack = list(node[1]) + stack
            else:
                conjuncts.append(node)
    for node in conjuncts:
        if isinstance(node, _Cmp) and isinstance(node.right, ColRef):
            if node.op != "=":
                raise QueryError(f"non-equi join {node.op!r} is not supported", node.line, node.col)
            lhs, rhs = resolve(node.left), resolve(node.right)
            joins.append((lhs, rhs))
            continue
        pred, used = conv(node)
        if len(used) != 1:
            line, col = _position(node)
            raise QueryError(f"filter spans several aliases: {', '.join(sorted(used))}", line, col)
        per_alias.setdefault(used.pop(), []).append(pred)
    q = Query(aliases, tuple(joins), {a: conjoin(ps) for a, ps in per_alias.items()})
    validate(q, catalog)
    return q


def _position(node):
    while not isinstance(node, _Cmp):
        node = node[1] if node[0] == "not" else node[1][0]
    return node.line, node.col


def validate(q: Query, catalog: Catalog) -> None:
    for a, t in q.aliases.items():
        if not catalog.has_table(t):
            raise QueryError(f"unknown table {t!r}")
    for (la, lc), (ra, rc) in q.joins:
        for a, c in ((la, lc), (ra, rc)):
            tdef = catalog.table(q.aliases[a])
            if not tdef.has_column(c):
                raise QueryError(f"unknown column {a}.{c}")
            if not tdef.column(c).is_key:
                raise QueryError(f"{a}.{c} is not a join key")
        gl = catalog.group_of(q.aliases[la], lc)
        gr = catalog.group_of(q.aliases[ra], rc)
        if gl != gr:
            raise QueryError(f"join {la}.{lc} = {ra}.{rc} crosses key groups {gl} and {gr}")
    for a, p in q.filters.items():
        check_types(p, catalog.table(q.aliases[a]), a)


def parse_query(obj, catalog: Catalog) -> Query:
    """Accept SQL text, IR JSON text, a dict, or a :class:`Query`."""
    if isinstance(obj, Query):
        validate(obj, catalog)
        return obj
    if isinstance(obj, Mapping):
        return Query.from_json(obj, catalog)
    text = str(obj).strip()
    if text.startswith("{"):
        return Query.from_json(text, catalog)
    return parse_sql(text, catalog)


@dataclass
class Variable:
    """A per-query equivalent key group."""

    id: int
    members: tuple[tuple[str, str], ...]      # (alias, column), sorted
    catalog_group: int

    @property
    def aliases(self) -> tuple[str, ...]:
        return tuple(sorted({a for a, _ in self.members}))


@dataclass
class JoinGraph:
    query: Query
    variables: list[Variable]
    var_of: dict[tuple[str, str], int]
    is_cyclic: bool
    has_self_join: bool

    def alias_keys(self, alias: str) -> list[tuple[str, int]]:
        """Join-key columns of ``alias`` that take part in some variable, with that variable."""
        return sorted((c, v) for (a, c), v in self.var_of.items() if a == alias)

    def alias_vars(self, alias: str) -> set[int]:
        return {v for (a, _), v in self.var_of.items() if a == alias}

    def neighbours(self, alias: str) -> set[str]:
        out = set()
        for v in self.alias_vars(alias):
            out.update(self.variables[v].aliases)
        out.discard(alias)
        return out

    def is_connected(self, subset) -> bool:
        subset = set(subset)
        if not subset:
            return False
        start = min(subset)
        seen = {start}
        stack = [start]
        while stack:
            a = stack.pop()
            for b in self.neighbours(a):
                if b in subset and b not in seen:
                    seen.add(b)
                    stack.append(b)
        return seen == subset

    def components(self) -> list[list[str]]:
        left = set(self.query.aliases)
        out = []
        while left:
            start = min(left)
            seen = {start}
            stack = [start]
            while stack:
                a = stack.pop()
                for b in self.neighbours(a):
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            out.append(sorted(seen))
            left -= seen
        return out


def build_join_graph(q: Query, catalog: Catalog) -> JoinGraph:
    """Variables are connected components of the query's key-equality graph."""
    nodes = sorted({x for cond in q.joins for x in cond})
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for l, r in q.joins:
        rl, rr = find(l), find(r)
        if rl != rr:
            parent[max(rl, rr)] = min(rl, rr)
    comps: dict = {}
    for n in nodes:
        comps.setdefault(find(n), []).append(n)
    groups = sorted((sorted(m) for m in comps.values()), key=lambda m: m[0])
    variables, var_of = [], {}
    for i, members in enumerate(groups):
        cat_groups = {catalog.group_of(q.aliases[a], c) for a, c in members}
        if len(cat_groups) != 1:
            raise QueryError(f"join keys {members} span catalog groups {sorted(cat_groups)}")
        variables.append(Variable(i, tuple(members), cat_groups.pop()))
        for m in members:
            var_of[m] = i
    # cycle test on the bipartite alias/variable incidence graph
    incid = {(a, v.id) for v in variables for a, _ in v.members}
    n_nodes = len(q.aliases) + len(variables)
    adj: dict = {}
    for a, v in incid:
        adj.setdefault(("a", a), set()).add(("v", v))
        adj.setdefault(("v", v), set()).add(("a", a))
    seen, n_comp = set(), 0
    for node in [("a", a) for a in q.aliases] + [("v", v.id) for v in variables]:
        if node in seen:
            continue
        n_comp += 1
        stack = [node]
        seen.add(node)
        while stack:
            x = stack.pop()
            for y in adj.get(x, ()):
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
    # an alias holding two keys of one variable is a diagonal constraint, not a cycle
    is_cyclic = len(incid) > n_nodes - n_comp
    tables = list(q.aliases.values())
    return JoinGraph(q, variables, var_of, is_cyclic, len(set(tables)) < len(tables))


def subquery(q: Query, graph: JoinGraph, subset) -> Query:
    """Query induced by ``subset``: equalities implied within each variable, filters kept."""
    subset = set(subset)
    joins = []
    for v in graph.variables:
        inside = [m for m in v.members if m[0] in subset]
        for m in inside[1:]:
            joins.append((inside[0], m))
    return Query({a: q.aliases[a] for a in sorted(subset)}, tuple(joins),
                 {a: p for a, p in q.filters.items() if a in subset})


@dataclass
class SubPlan:
    aliases: tuple[str, ...]

    @property
    def id(self) -> str:
        return ",".join(self.aliases)


def enumerate_subplans(graph: JoinGraph, cap: int = 16384) -> tuple[list[SubPlan], bool]:
    """Connected alias subsets ordered by size, then alias tuple. Returns ``(plans, truncated)``."""
    aliases = sorted(graph.query.aliases)
    if cap < len(aliases):
        raise QueryError(f"sub-plan cap {cap} is below the alias count {len(aliases)}")
    nbrs = {a: graph.neighbours(a) for a in aliases}
    level = [frozenset((a,)) for a in aliases]
    out: list[SubPlan] = []
    truncated = False
    while level:
        for s in sorted(level, key=lambda s: tuple(sorted(s))):
            if len(out) >= cap:
                return out, True
            out.append(SubPlan(tuple(sorted(s))))
        nxt = set()
        for s in level:
            for a in s:
                for b in nbrs[a]:
                    if b not in s:
                        nxt.add(s | {b})
        level = list(nxt)
    return out, truncated


def count_connected_subsets(graph: JoinGraph) -> int:
    aliases = sorted(graph.query.aliases)
    return sum(1 for r in range(1, len(aliases) + 1) for c in combinations(aliases, r)
               if graph.is_connected(c))
