"""Single-file model container.

Layout: 8-byte magic, 8-byte little-endian header length, a UTF-8 JSON
header (sorted keys), then binary sections. Each section is one array in
``.npy`` format (no pickling) or a UTF-8 JSON blob. The header's
``sections`` table maps names to ``[offset, length]`` relative to the end
of the header.
"""

from __future__ import annotations

import contextlib
import fcntl
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from joinbound.binning import BinMap, BinSummary
from joinbound.catalog import Catalog, KeyEncoder, Table, ValueCountStore, load_schema
from joinbound.estimators import ESTIMATORS
from joinbound.exceptions import ModelFormatError

MAGIC = b"JBMODEL\x00"
FORMAT_VERSION = 1


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()
        self.sections: dict[str, list[int]] = {}

    def array(self, name: str, arr) -> str:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == object:
            raise TypeError(f"section {name}: object arrays go through json()")
        b = io.BytesIO()
        np.save(b, arr, allow_pickle=False)
        return self._put(name, b.getvalue())

    def json(self, name: str, obj) -> str:
        data = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
        return self._put(name, data)

    def _put(self, name, data: bytes) -> str:
        if name in self.sections:
            raise ValueError(f"duplicate section {name}")
        self.sections[name] = [self.buf.tell(), len(data)]
        self.buf.write(data)
        return name


class _Reader:
    def __init__(self, data: bytes, sections):
        self.data = data
        self.sections = sections

    def _get(self, name) -> bytes:
        try:
            off, n = self.sections[name]
        except KeyError:
            raise ModelFormatError(f"missing section {name!r}") from None
        if off + n > len(self.data):
            raise ModelFormatError(f"section {name!r} is truncated")
        return self.data[off:off + n]

    def array(self, name) -> np.ndarray:
        return np.load(io.BytesIO(self._get(name)), allow_pickle=False)

    def json(self, name):
        return json.loads(self._get(name).decode())


def _py(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _py(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_py(x) for x in v]
    return v


def serialize(model) -> bytes:
    from sklearn.utils.validation import check_is_fitted
    check_is_fitted(model, "binmaps_")
    w = _Writer()
    header: dict = {
        "format": "joinbound-model",
        "format_version": FORMAT_VERSION,
        "params": _py(model.get_params()),
        "catalog": model.catalog_.to_dict(),
        "encoder": model.encoder_.to_dict(),
        "budget": {str(g): int(k) for g, k in sorted(model.budget_.items())},
        "provenance": _py(model.provenance_),
    }
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        header["created"] = int(epoch)
    header["binmaps"] = [
        {"group_id": g, "k": int(b.k), "strategy": b.strategy,
         "values": w.array(f"bin/{g}/values", b.values), "bins": w.array(f"bin/{g}/bins", b.bins)}
        for g, b in sorted(model.binmaps_.items())]
    header["summaries"] = []
    for (t, c), s in sorted(model.summaries_.items()):
        p = f"sum/{t}/{c}"
        header["summaries"].append({"table": t, "column": c, "total": w.array(p + "/total", s.total),
                                    "mfv": w.array(p + "/mfv", s.mfv), "ndv": w.array(p + "/ndv", s.ndv)})
    header["stores"] = []
    for (t, c), s in sorted(model.stores_.items()):
        p = f"store/{t}/{c}"
        header["stores"].append({"table": t, "column": c, "values": w.array(p + "/values", s.values),
                                 "counts": w.array(p + "/counts", s.counts)})
    header["tables"] = []
    for name in sorted(model.tables_):
        tab = model.tables_[name]
        cols = []
        for cname in tab.definition.column_names:
            values, valid = tab.column(cname)
            p = f"table/{name}/{cname}"
            if values.dtype == object:
                vsec = w.json(p + "/values", [v if ok else None for v, ok in zip(values.tolist(), valid.tolist())])
            else:
                vsec = w.array(p + "/values", values)
            cols.append({"name": cname, "values": vsec, "valid": w.array(p + "/valid", valid)})
        header["tables"].append({"name": name, "n_rows": int(tab.n_rows), "columns": cols})
    header["estimators"] = {}
    for name in sorted(model.estimators_):
        est = model.estimators_[name]
        meta, arrays = est.get_state()
        header["estimators"][name] = {
            "tag": est.tag, "meta": w.json(f"est/{name}/meta", _py(meta)),
            "arrays": {k: w.array(f"est/{name}/{k}", v) for k, v in sorted(arrays.items())}}
    header["sections"] = w.sections
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + w.buf.getvalue()


def deserialize(data: bytes):
    from joinbound.model import JoinCardinalityEstimator
    if len(data) < 16 or data[:8] != MAGIC:
        raise ModelFormatError("not a joinbound model file")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise ModelFormatError("model header is truncated")
    try:
        header = json.loads(data[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version!r}, expected {FORMAT_VERSION}")
    r = _Reader(data[16 + n:], header["sections"])
    model = JoinCardinalityEstimator(**header["params"])
    catalog: Catalog = load_schema(header["catalog"])
    model.catalog_ = catalog
    model.encoder_ = KeyEncoder.from_dict(header["encoder"])
    model.budget_ = {int(g): int(k) for g, k in header["budget"].items()}
    model.provenance_ = header["provenance"]
    model.binmaps_ = {int(b["group_id"]): BinMap(int(b["group_id"]), r.array(b["values"]), r.array(b["bins"]),
                                                 int(b["k"]), b["strategy"])
                      for b in header["binmaps"]}
    model.summaries_ = {(s["table"], s["column"]): BinSummary(r.array(s["total"]), r.array(s["mfv"]),
                                                              r.array(s["ndv"]))
                        for s in header["summaries"]}
    model.stores_ = {(s["table"], s["column"]): ValueCountStore(r.array(s["values"]), r.array(s["counts"]))
                     for s in header["stores"]}
    model.tables_ = {}
    for t in header["tables"]:
        tdef = catalog.table(t["name"])
        data_cols, valid_cols = {}, {}
        for c in t["columns"]:
            valid = r.array(c["valid"]).astype(bool)
            if tdef.column(c["name"]).kind in ("categorical", "text"):
                vals = np.empty(valid.size, dtype=object)
                vals[:] = r.json(c["values"])
            else:
                vals = r.array(c["values"])
            data_cols[c["name"]], valid_cols[c["name"]] = vals, valid
        model.tables_[t["name"]] = Table(tdef, data_cols, valid_cols)
    model.estimators_ = {}
    for name, e in header["estimators"].items():
        cls = ESTIMATORS.get(e["tag"])
        if cls is None:
            raise ModelFormatError(f"unknown estimator tag {e['tag']!r}")
        est = cls()
        arrays = {k: r.array(sec) for k, sec in e["arrays"].items()}
        est.set_state(r.json(e["meta"]), arrays, model.tables_[name], model._table_binmaps(name))
        model.estimators_[name] = est
    model.fit_time_ = 0.0
    return model


@contextlib.contextmanager
def _locked(path: Path):
    lock_path = path.with_name(path.name + ".lock")
    with open(lock_path, "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def save_model(model, path) -> None:
    """Write atomically: temp file in the target directory, fsync, rename."""
    path = Path(path)
    data = serialize(model)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _locked(path):
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise


def load_model(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"model file {path} does not exist") from None
    return deserialize(data)
