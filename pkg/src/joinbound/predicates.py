"""Filter predicates: expression trees, row evaluation and vectorised masks.

Comparisons against a null cell are false. ``NOT`` is plain boolean
negation, so ``NOT (x = 1)`` holds on a null ``x``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Mapping

import numpy as np

from joinbound.exceptions import QueryError

COMPARISONS = ("=", "!=", "<", "<=", ">", ">=")
OPS = COMPARISONS + ("IN", "BETWEEN", "LIKE", "NOT LIKE")
MAX_IN_LITERALS = 1024
NUMERIC_KINDS = ("integer-key", "integer", "float")
STRING_KINDS = ("categorical", "text")


class Predicate:
    def columns(self) -> frozenset[str]:
        raise NotImplementedError

    def __and__(self, other):
        return And((self, other))

    def __or__(self, other):
        return Or((self, other))

    def __invert__(self):
        return Not(self)


@dataclass(frozen=True)
class Atom(Predicate):
    column: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in OPS:
            raise QueryError(f"unsupported operator {self.op!r}")
        if self.op == "IN":
            vals = tuple(self.value)
            if not vals:
                raise QueryError("empty IN list")
            if len(vals) > MAX_IN_LITERALS:
                raise QueryError(f"IN list has {len(vals)} literals, limit is {MAX_IN_LITERALS}")
            object.__setattr__(self, "value", vals)
        elif self.op == "BETWEEN":
            lo, hi = self.value
            object.__setattr__(self, "value", (lo, hi))
        elif self.op in ("LIKE", "NOT LIKE") and not isinstance(self.value, str):
            raise QueryError("LIKE pattern must be a string literal")

    def columns(self):
        return frozenset((self.column,))

    def literals(self) -> tuple:
        if self.op in ("IN", "BETWEEN"):
            return tuple(self.value)
        return (self.value,)


@dataclass(frozen=True)
class And(Predicate):
    children: tuple[Predicate, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def columns(self):
        return frozenset().union(*(c.columns() for c in self.children))


@dataclass(frozen=True)
class Or(Predicate):
    children: tuple[Predicate, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def columns(self):
        return frozenset().union(*(c.columns() for c in self.children))


@dataclass(frozen=True)
class Not(Predicate):
    child: Predicate

    def columns(self):
        return self.child.columns()


@lru_cache(maxsize=1024)
def like_regex(pattern: str) -> re.Pattern:
    parts = []
    for ch in pattern:
        if ch == "%":
            parts.append(".*")
        elif ch == "_":
            parts.append(".")
        else:
            parts.append(re.escape(ch))
    return re.compile("".join(parts), re.DOTALL)


def _compare(v, op: str, lit) -> bool:
    if op == "=":
        return v == lit
    if op == "!=":
        return v != lit
    if op == "<":
        return v < lit
    if op == "<=":
        return v <= lit
    if op == ">":
        return v > lit
    return v >= lit


def _eval_atom(a: Atom, v) -> bool:
    if v is None:
        return False
    if a.op in COMPARISONS:
        return bool(_compare(v, a.op, a.value))
    if a.op == "IN":
        return v in a.value
    if a.op == "BETWEEN":
        return bool(a.value[0] <= v <= a.value[1])
    hit = like_regex(a.value).fullmatch(v) is not None
    return hit if a.op == "LIKE" else not hit


def eval_predicate(row: Mapping[str, Any], pred: Predicate | None) -> bool:
    """Evaluate ``pred`` on a single row given as ``{column: value-or-None}``."""
    if pred is None:
        return True
    if isinstance(pred, Atom):
        if pred.column not in row:
            raise QueryError(f"unknown column {pred.column!r}")
        return _eval_atom(pred, row[pred.column])
    if isinstance(pred, And):
        return all(eval_predicate(row, c) for c in pred.children)
    if isinstance(pred, Or):
        return any(eval_predicate(row, c) for c in pred.children)
    if isinstance(pred, Not):
        return not eval_predicate(row, pred.child)
    raise TypeError(f"not a predicate: {pred!r}")


def atom_mask(a: Atom, values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Vectorised :func:`_eval_atom` over one column."""
    out = np.zeros(values.shape[0], dtype=bool)
    if not valid.any():
        return out
    vals = values[valid]
    if a.op in COMPARISONS:
        hit = _compare(vals, a.op, a.value)
        hit = np.asarray(hit, dtype=bool)
    elif a.op == "IN":
        if vals.dtype == object:
            lits = set(a.value)
            hit = np.fromiter((v in lits for v in vals), dtype=bool, count=vals.size)
        else:
            hit = np.isin(vals, np.asarray(a.value))
    elif a.op == "BETWEEN":
        lo, hi = a.value
        hit = np.asarray((vals >= lo) & (vals <= hi), dtype=bool)
    else:
        rx = like_regex(a.value)
        hit = np.fromiter((rx.fullmatch(v) is not None for v in vals), dtype=bool, count=vals.size)
        if a.op == "NOT LIKE":
            hit = ~hit
    out[valid] = hit
    return out


def predicate_mask(pred: Predicate | None, columns: Mapping[str, tuple[np.ndarray, np.ndarray]],
                   n_rows: int) -> np.ndarray:
    """Boolean row mask; ``columns`` maps name to ``(values, valid)``."""
    if pred is None:
        return np.ones(n_rows, dtype=bool)
    if isinstance(pred, Atom):
        if pred.column not in columns:
            raise QueryError(f"unknown column {pred.column!r}")
        values, valid = columns[pred.column]
        return atom_mask(pred, values, valid)
    if isinstance(pred, And):
        m = np.ones(n_rows, dtype=bool)
        for c in pred.children:
            m &= predicate_mask(c, columns, n_rows)
        return m
    if isinstance(pred, Or):
        m = np.zeros(n_rows, dtype=bool)
        for c in pred.children:
            m |= predicate_mask(c, columns, n_rows)
        return m
    if isinstance(pred, Not):
        return ~predicate_mask(pred.child, columns, n_rows)
    raise TypeError(f"not a predicate: {pred!r}")


def table_mask(table, pred: Predicate | None) -> np.ndarray:
    if pred is None:
        return np.ones(table.n_rows, dtype=bool)
    cols = {c: table.column(c) for c in pred.columns()}
    return predicate_mask(pred, cols, table.n_rows)


def _literal_ok(kind: str, lit) -> bool:
    if kind in NUMERIC_KINDS:
        return isinstance(lit, (int, float, np.integer, np.floating)) and not isinstance(lit, bool)
    return isinstance(lit, str)


def check_types(pred: Predicate | None, table_def, where: str = "") -> None:
    """Raise :class:`QueryError` on unknown columns or column/literal type mismatch."""
    if pred is None:
        return
    for a in atoms(pred):
        if not table_def.has_column(a.column):
            raise QueryError(f"unknown column {where or table_def.name}.{a.column}")
        kind = table_def.column(a.column).kind
        if a.op in ("LIKE", "NOT LIKE"):
            if kind != "text":
                raise QueryError(f"type mismatch: LIKE on non-text column {where or table_def.name}.{a.column}")
            continue
        for lit in a.literals():
            if not _literal_ok(kind, lit):
                raise QueryError(f"type mismatch: literal {lit!r} against {kind} column "
                                 f"{where or table_def.name}.{a.column}")


def atoms(pred: Predicate | None) -> list[Atom]:
    if pred is None:
        return []
    if isinstance(pred, Atom):
        return [pred]
    if isinstance(pred, Not):
        return atoms(pred.child)
    return [a for c in pred.children for a in atoms(c)]


def _lit_sql(v) -> str:
    if isinstance(v, str):
        return "'" + v.replace("'", "''") + "'"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v))


def to_sql(pred: Predicate, qualifier: str | None = None) -> str:
    if isinstance(pred, Atom):
        col = f"{qualifier}.{pred.column}" if qualifier else pred.column
        if pred.op == "IN":
            return f"{col} IN ({', '.join(_lit_sql(v) for v in pred.value)})"
        if pred.op == "BETWEEN":
            return f"{col} BETWEEN {_lit_sql(pred.value[0])} AND {_lit_sql(pred.value[1])}"
        op = "<>" if pred.op == "!=" else pred.op
        return f"{col} {op} {_lit_sql(pred.value)}"
    if isinstance(pred, Not):
        return f"NOT ({to_sql(pred.child, qualifier)})"
    sep = " AND " if isinstance(pred, And) else " OR "
    return "(" + sep.join(to_sql(c, qualifier) for c in pred.children) + ")"


def normalize(pred: Predicate | None) -> Predicate | None:
    """Flatten nested AND/OR, drop singleton combinators, sort children, dedupe."""
    if pred is None or isinstance(pred, Atom):
        return pred
    if isinstance(pred, Not):
        inner = normalize(pred.child)
        if isinstance(inner, Not):
            return inner.child
        return Not(inner)
    kind = type(pred)
    flat: list[Predicate] = []
    for c in pred.children:
        c = normalize(c)
        if isinstance(c, kind):
            flat.extend(c.children)
        else:
            flat.append(c)
    uniq = {to_sql(c): c for c in flat}
    children = tuple(uniq[k] for k in sorted(uniq))
    if len(children) == 1:
        return children[0]
    return kind(children)


def conjoin(preds) -> Predicate | None:
    preds = [p for p in preds if p is not None]
    if not preds:
        return None
    if len(preds) == 1:
        return preds[0]
    return normalize(And(tuple(preds)))


def to_json(pred: Predicate | None):
    if pred is None:
        return None
    if isinstance(pred, Atom):
        v = list(pred.value) if pred.op in ("IN", "BETWEEN") else pred.value
        return {"col": pred.column, "op": pred.op, "value": v}
    if isinstance(pred, Not):
        return {"not": to_json(pred.child)}
    key = "and" if isinstance(pred, And) else "or"
    return {key: [to_json(c) for c in pred.children]}


def from_json(obj) -> Predicate | None:
    if obj is None:
        return None
    if "not" in obj:
        return Not(from_json(obj["not"]))
    if "and" in obj:
        return And(tuple(from_json(c) for c in obj["and"]))
    if "or" in obj:
        return Or(tuple(from_json(c) for c in obj["or"]))
    try:
        return Atom(obj["col"], obj["op"], obj["value"])
    except KeyError as exc:
        raise QueryError(f"malformed predicate JSON, missing {exc}") from None
