"""Schema, table storage, join-key equivalence groups and exact value counts."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from joinbound.exceptions import DataError, SchemaError

KEY = "integer-key"
COLUMN_KINDS = ("integer-key", "integer", "float", "categorical", "text")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ColumnDef:
    name: str
    kind: str

    @property
    def is_key(self) -> bool:
        return self.kind == KEY


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]
    row_count: int = 0

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column(s) {dup} in table {self.name!r}")
        for c in self.columns:
            if c.kind not in COLUMN_KINDS:
                raise SchemaError(f"unknown column kind {c.kind!r} for {self.name}.{c.name}")

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def key_columns(self) -> list[str]:
        return [c.name for c in self.columns if c.is_key]

    def column(self, name: str) -> ColumnDef:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {self.name}.{name}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)


@dataclass(frozen=True)
class EquivalenceGroup:
    id: int
    members: tuple[tuple[str, str], ...]

    def __contains__(self, key) -> bool:
        return tuple(key) in self.members


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller representative wins so the result is order independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def components(self):
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return [sorted(v) for v in out.values()]


def parse_key_ref(text: str) -> tuple[str, str]:
    parts = text.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise SchemaError(f"malformed column reference {text!r}, expected table.column")
    return parts[0].strip(), parts[1].strip()


def parse_relation(text: str) -> tuple[tuple[str, str], tuple[str, str]]:
    if text.count("=") != 1:
        raise SchemaError(f"malformed join relation {text!r}, expected A.x=B.y")
    lhs, rhs = text.split("=")
    return parse_key_ref(lhs), parse_key_ref(rhs)


@dataclass(frozen=True)
class Catalog:
    tables: tuple[TableDef, ...]
    groups: tuple[EquivalenceGroup, ...]
    relations: tuple[tuple[tuple[str, str], tuple[str, str]], ...] = ()
    version: int = SCHEMA_VERSION
    _group_of: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate table names: {sorted({n for n in names if names.count(n) > 1})}")
        lookup = {}
        for g in self.groups:
            for m in g.members:
                if m in lookup:
                    raise SchemaError(f"join key {m} in more than one group")
                lookup[m] = g.id
        self._group_of.update(lookup)

    def table(self, name: str) -> TableDef:
        for t in self.tables:
            if t.name == name:
                return t
        raise SchemaError(f"unknown table {name!r}")

    def has_table(self, name: str) -> bool:
        return any(t.name == name for t in self.tables)

    @property
    def join_keys(self) -> list[tuple[str, str]]:
        return [(t.name, c) for t in self.tables for c in t.key_columns]

    def group_of(self, table: str, column: str) -> int:
        try:
            return self._group_of[(table, column)]
        except KeyError:
            raise SchemaError(f"{table}.{column} is not a join key") from None

    def group(self, gid: int) -> EquivalenceGroup:
        return self.groups[gid]

    def with_row_count(self, table: str, n: int) -> "Catalog":
        tables = tuple(replace(t, row_count=int(n)) if t.name == table else t for t in self.tables)
        return Catalog(tables, self.groups, self.relations, self.version)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "tables": [
                {"name": t.name, "row_count": t.row_count,
                 "columns": [{"name": c.name, "kind": c.kind} for c in t.columns]}
                for t in self.tables
            ],
            "joins": [f"{a[0]}.{a[1]}={b[0]}.{b[1]}" for a, b in self.relations],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Catalog":
        return load_schema(d)


def load_schema(descriptor) -> Catalog:
    """Build a :class:`Catalog` from a schema descriptor.

    ``descriptor`` is a mapping ``{"tables": [...], "joins": ["A.id=B.Aid", ...]}``
    or a path to a JSON file holding one. Equivalence groups are the
    connected components of the join relations over all integer-key
    columns; group ids ascend with each group's smallest ``(table, column)``.
    """
    if isinstance(descriptor, (str, os.PathLike)):
        with open(descriptor, encoding="utf-8") as fh:
            descriptor = json.load(fh)
    version = int(descriptor.get("version", SCHEMA_VERSION))
    if version > SCHEMA_VERSION:
        raise SchemaError(f"schema version {version} is newer than supported {SCHEMA_VERSION}")
    tables = []
    for t in descriptor.get("tables", []):
        cols = tuple(ColumnDef(c["name"], c.get("kind", "integer")) for c in t.get("columns", []))
        tables.append(TableDef(t["name"], cols, int(t.get("row_count", 0))))
    by_name = {}
    for t in tables:
        if t.name in by_name:
            raise SchemaError(f"duplicate table {t.name!r}")
        by_name[t.name] = t

    relations = []
    for rel in descriptor.get("joins", []):
        if isinstance(rel, str):
            lhs, rhs = parse_relation(rel)
        else:
            lhs, rhs = parse_key_ref(rel[0]), parse_key_ref(rel[1])
        for tname, cname in (lhs, rhs):
            if tname not in by_name or not by_name[tname].has_column(cname):
                raise SchemaError(f"join relation {rel!r} references unknown column {tname}.{cname}")
            if not by_name[tname].column(cname).is_key:
                raise SchemaError(f"join relation {rel!r}: {tname}.{cname} is not an integer-key column")
        relations.append(tuple(sorted((lhs, rhs))))

    keys = [(t.name, c) for t in tables for c in t.key_columns]
    uf = _UnionFind(keys)
    for a, b in relations:
        uf.union(a, b)
    comps = sorted(uf.components(), key=lambda members: members[0])
    groups = tuple(EquivalenceGroup(i, tuple(m)) for i, m in enumerate(comps))
    return Catalog(tuple(tables), groups, tuple(sorted(set(relations))), version)


class ValueCountStore:
    """Exact value -> count map for one join key, stored as sorted arrays."""

    __slots__ = ("values", "counts")

    def __init__(self, values=None, counts=None):
        self.values = np.asarray([] if values is None else values, dtype=np.int64)
        self.counts = np.asarray([] if counts is None else counts, dtype=np.int64)

    @classmethod
    def from_array(cls, arr) -> "ValueCountStore":
        values, counts = np.unique(np.asarray(arr, dtype=np.int64), return_counts=True)
        return cls(values, counts.astype(np.int64))

    @property
    def ndv(self) -> int:
        return int(self.values.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def count(self, value) -> int:
        i = np.searchsorted(self.values, value)
        if i < self.values.size and self.values[i] == value:
            return int(self.counts[i])
        return 0

    def as_dict(self) -> dict[int, int]:
        return {int(v): int(c) for v, c in zip(self.values, self.counts)}

    def copy(self) -> "ValueCountStore":
        return ValueCountStore(self.values.copy(), self.counts.copy())

    def updated(self, inserted=(), deleted=()) -> "ValueCountStore":
        """Return a new store with ``inserted`` values added and ``deleted`` removed."""
        ins = ValueCountStore.from_array(inserted)
        dele = ValueCountStore.from_array(deleted)
        values = np.union1d(np.union1d(self.values, ins.values), dele.values)
        counts = np.zeros(values.size, dtype=np.int64)
        counts[np.searchsorted(values, self.values)] += self.counts
        counts[np.searchsorted(values, ins.values)] += ins.counts
        counts[np.searchsorted(values, dele.values)] -= dele.counts
        if (counts < 0).any():
            bad = values[counts < 0][:5].tolist()
            raise DataError(f"deletion below zero count for value(s) {bad}")
        keep = counts > 0
        return ValueCountStore(values[keep], counts[keep])

    def __eq__(self, other):
        return (isinstance(other, ValueCountStore)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.counts, other.counts))

    def __repr__(self):
        return f"ValueCountStore(ndv={self.ndv}, total={self.total})"


class Table:
    """Column-oriented table: one numpy array plus validity mask per column."""

    def __init__(self, definition: TableDef, data: Mapping[str, np.ndarray],
                 valid: Mapping[str, np.ndarray]):
        self.definition = definition
        self.data = dict(data)
        self.valid = dict(valid)
        sizes = {len(v) for v in self.data.values()}
        if len(sizes) > 1:
            raise DataError(f"ragged columns in table {definition.name}")
        self.n_rows = sizes.pop() if sizes else 0

    @property
    def name(self) -> str:
        return self.definition.name

    def __len__(self):
        return self.n_rows

    def column(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.data:
            raise SchemaError(f"unknown column {self.name}.{name}")
        return self.data[name], self.valid[name]

    def row(self, i: int) -> dict:
        out = {}
        for name, arr in self.data.items():
            if not self.valid[name][i]:
                out[name] = None
            else:
                v = arr[i]
                out[name] = v.item() if isinstance(v, np.generic) else v
        return out

    def take(self, idx) -> "Table":
        idx = np.asarray(idx)
        return Table(self.definition, {k: v[idx] for k, v in self.data.items()},
                     {k: v[idx] for k, v in self.valid.items()})

    def concat(self, other: "Table") -> "Table":
        data = {k: np.concatenate([v, other.data[k]]) for k, v in self.data.items()}
        valid = {k: np.concatenate([v, other.valid[k]]) for k, v in self.valid.items()}
        return Table(self.definition, data, valid)

    def key_values(self, column: str) -> np.ndarray:
        """Non-null values of a join-key column."""
        values, valid = self.column(column)
        return values[valid]

    def value_counts(self, column: str) -> ValueCountStore:
        return ValueCountStore.from_array(self.key_values(column))

    def row_keys(self) -> list[tuple]:
        """Hashable per-row tuples over every column (nulls as None)."""
        cols = []
        for name in self.definition.column_names:
            arr, valid = self.data[name], self.valid[name]
            vals = arr.tolist()
            cols.append([v if ok else None for v, ok in zip(vals, valid.tolist())])
        return list(zip(*cols)) if cols else [()] * self.n_rows


def _empty_column(kind: str, n: int = 0) -> np.ndarray:
    if kind in ("integer-key", "integer"):
        return np.zeros(n, dtype=np.int64)
    if kind == "float":
        return np.zeros(n, dtype=np.float64)
    return np.empty(n, dtype=object)


def empty_table(definition: TableDef) -> Table:
    return Table(definition,
                 {c.name: _empty_column(c.kind) for c in definition.columns},
                 {c.name: np.zeros(0, dtype=bool) for c in definition.columns})


class KeyEncoder:
    """Canonicalises join-key cells to int64 per equivalence group.

    A group whose first ingested non-empty key column holds only integers
    stays in integer mode. Otherwise every member is dictionary-encoded in
    first-seen order.
    """

    def __init__(self, modes=None, dictionaries=None):
        self.modes: dict[int, str] = dict(modes or {})
        self.dictionaries: dict[int, dict[str, int]] = {int(k): dict(v) for k, v in (dictionaries or {}).items()}

    def encode(self, gid: int, cells: list[str], where: str) -> np.ndarray:
        mode = self.modes.get(gid)
        if mode != "dict":
            try:
                out = np.array([int(c) for c in cells], dtype=np.int64)
            except (ValueError, OverflowError):
                if mode == "int":
                    raise DataError(f"{where}: non-integer key value in integer-encoded group {gid}") from None
                mode = None
            else:
                if cells:
                    self.modes[gid] = "int"
                return out
        self.modes[gid] = "dict"
        mapping = self.dictionaries.setdefault(gid, {})
        codes = np.empty(len(cells), dtype=np.int64)
        for i, c in enumerate(cells):
            code = mapping.get(c)
            if code is None:
                code = mapping[c] = len(mapping)
            codes[i] = code
        return codes

    def to_dict(self) -> dict:
        return {"modes": {str(k): v for k, v in sorted(self.modes.items())},
                "dictionaries": {str(k): v for k, v in sorted(self.dictionaries.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KeyEncoder":
        return cls({int(k): v for k, v in d.get("modes", {}).items()},
                   {int(k): v for k, v in d.get("dictionaries", {}).items()})


def _parse_cells(kind: str, cells: list[str], where: str):
    n = len(cells)
    valid = np.fromiter((c != "" for c in cells), dtype=bool, count=n)
    if kind == "integer":
        out = np.zeros(n, dtype=np.int64)
        for i, c in enumerate(cells):
            if c != "":
                try:
                    out[i] = int(c)
                except ValueError:
                    raise DataError(f"{where}, row {i + 1}: type mismatch, {c!r} is not an integer") from None
        return out, valid
    if kind == "float":
        out = np.zeros(n, dtype=np.float64)
        for i, c in enumerate(cells):
            if c != "":
                try:
                    out[i] = float(c)
                except ValueError:
                    raise DataError(f"{where}, row {i + 1}: type mismatch, {c!r} is not a number") from None
        return out, valid
    out = np.empty(n, dtype=object)
    for i, c in enumerate(cells):
        out[i] = c if c != "" else None
    return out, valid


def _read_source(source) -> str:
    if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source
                                            and Path(source).is_file()):
        with open(source, newline="", encoding="utf-8") as fh:
            return fh.read()
    if isinstance(source, str):
        return source
    return source.read()


def ingest_table(csv_source, table_def: TableDef, catalog: Catalog | None = None,
                 encoder: KeyEncoder | None = None) -> tuple[Table, dict[str, ValueCountStore]]:
    """Parse an RFC-4180 CSV with header row into a :class:`Table`.

    Returns the table and an exact :class:`ValueCountStore` per join key.
    Empty cells are nulls; nulls never enter a key store.
    """
    text = _read_source(csv_source)
    where = table_def.name
    reader = csv.reader(io.StringIO(text), strict=True)
    try:
        rows = list(reader)
    except csv.Error as exc:
        raise DataError(f"{where}: malformed CSV ({exc})") from None
    if not rows:
        raise DataError(f"{where}: missing header row")
    header = [h.strip() for h in rows[0]]
    unknown = [h for h in header if not table_def.has_column(h)]
    if unknown:
        raise DataError(f"{where}: unknown column(s) {unknown} in CSV header")
    missing = [c for c in table_def.column_names if c not in header]
    if missing:
        raise DataError(f"{where}: CSV header lacks column(s) {missing}")
    body = rows[1:]
    width = len(header)
    for i, r in enumerate(body):
        if len(r) != width:
            if len(r) == 0 or r == [""] and width > 1:
                raise DataError(f"{where}, row {i + 1}: malformed CSV row (empty line)")
            raise DataError(f"{where}, row {i + 1}: malformed CSV row, expected {width} fields got {len(r)}")
    encoder = encoder if encoder is not None else KeyEncoder()
    data, valid = {}, {}
    for j, name in enumerate(header):
        cdef = table_def.column(name)
        cells = [r[j] for r in body]
        if cdef.is_key:
            mask = np.fromiter((c != "" for c in cells), dtype=bool, count=len(cells))
            present = [c.strip() for c in cells if c != ""]
            gid = catalog.group_of(table_def.name, name) if catalog is not None else -1
            codes = encoder.encode(gid, present, f"{where}.{name}")
            full = np.zeros(len(cells), dtype=np.int64)
            full[mask] = codes
            data[name], valid[name] = full, mask
        else:
            data[name], valid[name] = _parse_cells(cdef.kind, cells, f"{where}.{name}")
    table = Table(replace(table_def, row_count=len(body)), data, valid)
    stores = {c: table.value_counts(c) for c in table_def.key_columns}
    for c, s in stores.items():
        if s.total != int(table.valid[c].sum()):
            raise DataError(f"{where}.{c}: value counts do not sum to non-null rows")
    return table, stores


def write_csv(table: Table, path, encoder: KeyEncoder | None = None, catalog: Catalog | None = None):
    """Write ``table`` as CSV; dictionary-encoded keys are decoded back to strings."""
    names = table.definition.column_names
    decoders = {}
    if encoder is not None and catalog is not None:
        for c in table.definition.key_columns:
            gid = catalog.group_of(table.name, c)
            if encoder.modes.get(gid) == "dict":
                inv = {v: k for k, v in encoder.dictionaries[gid].items()}
                decoders[c] = inv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        cols = []
        for n in names:
            arr, ok = table.data[n], table.valid[n]
            dec = decoders.get(n)
            kind = table.definition.column(n).kind
            vals = arr.tolist()
            col = []
            for v, present in zip(vals, ok.tolist()):
                if not present:
                    col.append("")
                elif dec is not None:
                    col.append(dec[v])
                elif kind == "float":
                    col.append(repr(float(v)))
                else:
                    col.append(str(v))
            cols.append(col)
        for row in zip(*cols):
            w.writerow(row)


class Database:
    """A catalog plus loaded tables, their key value-count stores and key encoder."""

    def __init__(self, catalog: Catalog, tables: Mapping[str, Table] | None = None,
                 stores: Mapping[tuple[str, str], ValueCountStore] | None = None,
                 encoder: KeyEncoder | None = None):
        self.catalog = catalog
        self.tables: dict[str, Table] = dict(tables or {})
        self.stores: dict[tuple[str, str], ValueCountStore] = dict(stores or {})
        self.encoder = encoder if encoder is not None else KeyEncoder()
        for t in catalog.tables:
            if t.name not in self.tables:
                self.tables[t.name] = empty_table(t)
            for c in t.key_columns:
                self.stores.setdefault((t.name, c), self.tables[t.name].value_counts(c))

    def ingest(self, name: str, csv_source) -> Table:
        tdef = self.catalog.table(name)
        table, stores = ingest_table(csv_source, tdef, self.catalog, self.encoder)
        self.tables[name] = table
        self.catalog = self.catalog.with_row_count(name, table.n_rows)
        for c, s in stores.items():
            self.stores[(name, c)] = s
        return table

    @classmethod
    def from_directory(cls, schema, data_dir) -> "Database":
        catalog = schema if isinstance(schema, Catalog) else load_schema(schema)
        db = cls(catalog)
        data_dir = Path(data_dir)
        for t in catalog.tables:
            path = data_dir / f"{t.name}.csv"
            if not path.exists():
                raise DataError(f"missing data file {path}")
            db.ingest(t.name, path)
        return db

    @classmethod
    def from_columns(cls, catalog: Catalog, columns: Mapping[str, Mapping[str, Iterable]]) -> "Database":
        """Build a database from python/numpy columns (``None`` marks a null)."""
        tables = {}
        for tdef in catalog.tables:
            cols = columns.get(tdef.name, {})
            data, valid = {}, {}
            n = None
            for c in tdef.columns:
                raw = list(cols.get(c.name, []))
                if n is None:
                    n = len(raw)
                elif len(raw) != n:
                    raise DataError(f"column {tdef.name}.{c.name} has {len(raw)} rows, expected {n}")
                mask = np.array([v is not None and not (isinstance(v, float) and np.isnan(v)) for v in raw],
                                dtype=bool)
                arr = _empty_column(c.kind, len(raw))
                for i, v in enumerate(raw):
                    if mask[i]:
                        arr[i] = v
                data[c.name], valid[c.name] = arr, mask
            tables[tdef.name] = Table(replace(tdef, row_count=n or 0), data, valid)
        catalog_n = catalog
        for name, t in tables.items():
            catalog_n = catalog_n.with_row_count(name, t.n_rows)
        return cls(catalog_n, tables)

    def table(self, name: str) -> Table:
        return self.tables[name]

    def store(self, table: str, column: str) -> ValueCountStore:
        return self.stores[(table, column)]

    def group_stores(self, gid: int) -> dict[tuple[str, str], ValueCountStore]:
        return {m: self.stores[m] for m in self.catalog.group(gid).members}


def selinger_join_size(rows_a: float, rows_b: float, ndv_a: int, ndv_b: int,
                       sel_a: float = 1.0, sel_b: float = 1.0) -> float:
    """Classic uniformity estimate ``P_A P_B |A||B| / max(NDV_A, NDV_B)``."""
    if ndv_a is None or ndv_b is None:
        raise DataError("missing NDV")
    denom = max(int(ndv_a), int(ndv_b))
    if denom == 0:
        return 0.0
    return float(sel_a) * float(sel_b) * float(rows_a) * float(rows_b) / denom


def selinger_estimate(query, db: Database, selectivities: Mapping[str, float] | None = None) -> float:
    """Selinger baseline for an equi-join query.

    Each filtered alias contributes ``sel * |table|``; every join condition
    divides by the larger NDV of its two keys (pairwise composition).
    """
    selectivities = dict(selectivities or {})
    est = 1.0
    for alias, table in query.aliases.items():
        est *= selectivities.get(alias, 1.0) * db.catalog.table(table).row_count
    for (la, lc), (ra, rc) in query.joins:
        ndv_l = db.store(query.aliases[la], lc).ndv
        ndv_r = db.store(query.aliases[ra], rc).ndv
        denom = max(ndv_l, ndv_r)
        if denom == 0:
            return 0.0
        est /= denom
    return est
