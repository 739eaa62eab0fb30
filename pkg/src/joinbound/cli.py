"""Command line interface.

Every subcommand writes JSON lines to stdout (or an aligned text table with
``--format table``). Exit codes: 0 ok, 1 usage, 2 data error, 3 internal.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
import warnings
from pathlib import Path

from joinbound import __version__
from joinbound.catalog import Database, empty_table, load_schema
from joinbound.exceptions import DataError, JoinBoundError, UsageError
from joinbound.model import (ESTIMATOR_NAMES, JOINHIST_MODES, JoinCardinalityEstimator, delta_digest,
                             read_delta)
from joinbound.oracle import (default_spec, error_metrics, exact_cardinality, format_table,
                              generate_db, generate_workload)
from joinbound.queryir import parse_query

CONFIG_ENV = "JOINBOUND_CONFIG"
CONFIG_KEYS = {"k", "total_bins", "strategy", "estimator", "rate", "seed", "cap", "smoothing", "workload"}
DEFAULTS = {"k": 100, "total_bins": None, "strategy": "gbsa", "estimator": "chowliu", "rate": 0.01,
            "seed": 0, "cap": 16384, "smoothing": 1.0, "workload": None}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(obj, out):
    out.write(json.dumps(obj, sort_keys=True, allow_nan=False) + "\n")


def read_workload(path) -> list[tuple[int, str]]:
    """Non-empty, non-comment lines of a workload file with their 1-based line numbers."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read workload {path}: {exc.strerror}") from None
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith(("--", "#")):
            out.append((n, s))
    return out


def load_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config key(s) {sorted(unknown)}")
        cfg.update(data)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _model_from_config(cfg) -> JoinCardinalityEstimator:
    model = JoinCardinalityEstimator(k=cfg["k"], total_bins=cfg["total_bins"], strategy=cfg["strategy"],
                                     estimator=cfg["estimator"], rate=cfg["rate"], seed=cfg["seed"],
                                     subplan_cap=cfg["cap"], smoothing=cfg["smoothing"])
    try:
        model._check_params()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model


def _load_db(schema, data) -> Database:
    if not schema or not data:
        raise UsageError("--schema and --data are required")
    return Database.from_directory(schema, data)


def _queries(args) -> list[tuple[int, str]]:
    if args.query is not None and args.query_file is not None:
        raise UsageError("give either --query or --query-file, not both")
    if args.query is not None:
        return [(1, args.query)]
    if args.query_file is not None:
        return read_workload(args.query_file)
    raise UsageError("one of --query or --query-file is required")


def _load_model(path) -> JoinCardinalityEstimator:
    if not path:
        raise UsageError("--model is required")
    return JoinCardinalityEstimator.load(path)


def _error_record(line, exc) -> dict:
    return {"line": line, "error": str(exc), "error_type": type(exc).__name__}


# -- subcommands -------------------------------------------------------------

def cmd_gen(args, out) -> int:
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                spec = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"spec {args.spec} is not valid JSON: {exc}") from None
    else:
        spec = default_spec(seed=0, scale=args.scale, zipf=args.zipf)
    if args.seed is not None:
        spec = {**spec, "seed": args.seed}
    if not args.out:
        raise UsageError("--out is required")
    try:
        db = generate_db(spec, args.out)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"inconsistent synthetic spec: {exc}") from None
    record = {"out": str(args.out), "schema": str(Path(args.out) / "schema.json"),
              "tables": {n: t.n_rows for n, t in sorted(db.tables.items())}}
    if args.workload_out:
        qs = generate_workload(db, args.n_queries, seed=spec.get("seed", 0))
        Path(args.workload_out).write_text("".join(q.to_sql() + "\n" for q in qs), encoding="utf-8")
        record["workload"] = str(args.workload_out)
        record["queries"] = len(qs)
    _emit(record, out)
    return 0


def cmd_train(args, out) -> int:
    cfg = load_config(args)
    model = _model_from_config(cfg)
    db = _load_db(args.schema, args.data)
    if not args.model:
        raise UsageError("--model is required")
    workload = None
    if cfg["workload"]:
        workload = [q for _, q in read_workload(cfg["workload"])]
    binmaps = None
    if args.bins_from:
        binmaps = _load_model(args.bins_from).binmaps_
    model.fit(db, workload=workload, binmaps=binmaps)
    model.save(args.model)
    _emit({"model": str(args.model), "estimator": model.estimator, "strategy": model.strategy,
           "bins": {str(g): int(k) for g, k in sorted(model.budget_.items())},
           "tables": {n: t.n_rows for n, t in sorted(model.tables_.items())},
           "fit_time": model.fit_time_}, out)
    return 0


def cmd_estimate(args, out) -> int:
    model = _load_model(args.model)
    if args.joinhist and args.explain:
        raise UsageError("--explain is not available with --joinhist")
    status = 0
    rows = []
    for line, text in _queries(args):
        try:
            if args.joinhist:
                rep = model.joinhist_estimate(text, mode=args.joinhist)
            else:
                rep = model.estimate(text, order=args.order, explain=args.explain)
            rec = {"line": line, **rep.to_json()}
        except DataError as exc:
            rec = _error_record(line, exc)
            status = 2
        rows.append(rec)
        if args.format == "json":
            _emit(rec, out)
    if args.format == "table":
        out.write(format_table(rows, ["line", "subplan", "estimate", "wall_time", "error"]) + "\n")
    return status


def cmd_subplans(args, out) -> int:
    model = _load_model(args.model)
    cap = args.cap if args.cap is not None else model.subplan_cap
    status = 0
    for line, text in _queries(args):
        t0 = time.perf_counter()
        try:
            reports, truncated = model.estimate_subplans(text, cap=cap)
        except DataError as exc:
            _emit(_error_record(line, exc), out)
            status = 2
            continue
        wall = time.perf_counter() - t0
        rows = [{"line": line, **r.to_json()} for r in reports]
        if args.format == "json":
            for r in rows:
                _emit(r, out)
        else:
            out.write(format_table(rows, ["subplan", "estimate", "wall_time"]) + "\n")
        summary = {"line": line, "summary": {"subplans": len(reports), "truncated": truncated,
                                             "cap": cap, "wall_time": wall}}
        if args.format == "json":
            _emit(summary, out)
        else:
            out.write(f"{len(reports)} sub-plans in {wall:.4f}s" + (" (truncated)" if truncated else "") + "\n")
    return status


def _read_delta_dir(model, path):
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"delta directory {path} does not exist")
    inserted, deleted = {}, {}
    for tdef in model.catalog_.tables:
        parts_ins, parts_del = [], []
        f = path / f"{tdef.name}.csv"
        if f.exists():
            ins, dele = read_delta(f, tdef, model.catalog_, model.encoder_)
            parts_ins.append(ins)
            parts_del.append(dele)
        f = path / f"{tdef.name}.delete.csv"
        if f.exists():
            ins, dele = read_delta(f, tdef, model.catalog_, model.encoder_)
            parts_del.append(ins.concat(dele))
        if parts_ins or parts_del:
            ins = empty_table(tdef)
            for p in parts_ins:
                ins = ins.concat(p)
            dele = empty_table(tdef)
            for p in parts_del:
                dele = dele.concat(p)
            inserted[tdef.name] = ins
            deleted[tdef.name] = dele
    known = {t.name for t in model.catalog_.tables}
    for f in sorted(path.glob("*.csv")):
        stem = f.name[:-len(".delete.csv")] if f.name.endswith(".delete.csv") else f.stem
        if stem not in known:
            raise DataError(f"delta file {f.name} does not match any table")
    return inserted, deleted


def cmd_update(args, out) -> int:
    model = _load_model(args.model)
    if not args.data:
        raise UsageError("--data (delta directory) is required")
    inserted, deleted = _read_delta_dir(model, args.data)
    t0 = time.perf_counter()
    digest = delta_digest(inserted, deleted)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model.partial_fit(inserted, deleted, digest=digest)
    wall = time.perf_counter() - t0
    target = args.out or args.model
    model.save(target)
    rec = {"model": str(target), "digest": digest, "update_time": wall,
           "inserted": {n: t.n_rows for n, t in sorted(inserted.items())},
           "deleted": {n: t.n_rows for n, t in sorted(deleted.items())}}
    if caught:
        rec["warnings"] = [str(w.message) for w in caught]
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    _emit(rec, out)
    return 0


def _parse_list(text, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"malformed list {text!r}") from None


def cmd_bench(args, out) -> int:
    """Grid over k, binning strategy and estimator, plus optional histogram-join baselines."""
    cfg = load_config(args)
    db = _load_db(args.schema, args.data)
    if not cfg["workload"]:
        raise UsageError("--workload is required")
    lines = read_workload(cfg["workload"])
    queries, truths, rows = [], [], []
    for line, text in lines:
        try:
            q = parse_query(text, db.catalog)
            truths.append(exact_cardinality(q, db))
            queries.append(q)
        except DataError as exc:
            rows.append({"cell": "oracle", **_error_record(line, exc)})
    ks = _parse_list(args.grid_k, int) if args.grid_k else [cfg["k"]]
    strategies = _parse_list(args.strategies) if args.strategies else [cfg["strategy"]]
    estimators = _parse_list(args.estimators) if args.estimators else [cfg["estimator"]]
    for e in estimators:
        if e not in ESTIMATOR_NAMES:
            raise UsageError(f"unknown estimator {e!r}")
    modes = _parse_list(args.joinhist) if args.joinhist else []
    for m in modes:
        if m not in JOINHIST_MODES:
            raise UsageError(f"unknown joinhist mode {m!r}")
    cells = []
    for k in ks:
        for strategy in strategies:
            for est in estimators:
                cells.append(({**cfg, "k": k, "strategy": strategy, "estimator": est}, None))
                for m in modes:
                    cells.append(({**cfg, "k": k, "strategy": strategy, "estimator": est}, m))
    report = []
    for c, mode in cells:
        name = f"k={c['k']} strategy={c['strategy']} estimator={c['estimator']}" + (f" joinhist={mode}" if mode else "")
        try:
            t0 = time.perf_counter()
            model = _model_from_config(c).fit(db)
            fit_time = time.perf_counter() - t0
            ests, tru, lat, failed = [], [], [], 0
            for q, t in zip(queries, truths):
                try:
                    t1 = time.perf_counter()
                    r = model.joinhist_estimate(q, mode) if mode else model.estimate(q)
                    lat.append(time.perf_counter() - t1)
                    ests.append(r.estimate)
                    tru.append(t)
                except DataError:
                    failed += 1
            m = error_metrics(ests, tru)
            lat.sort()
            row = {"cell": name, "k": c["k"], "strategy": c["strategy"], "estimator": c["estimator"],
                   "joinhist": mode, "p50": m["p50"], "p95": m["p95"], "p99": m["p99"],
                   "coverage": m["coverage"], "under_fraction": m["under_fraction"],
                   "n": m["n"], "n_zero_true": m["n_zero_true"], "failed": failed, "fit_time": fit_time,
                   "latency_p50": lat[len(lat) // 2] if lat else None,
                   "latency_max": lat[-1] if lat else None}
        except (JoinBoundError, ValueError) as exc:
            row = {"cell": name, "error": str(exc), "error_type": type(exc).__name__}
        report.append(row)
    if args.format == "json":
        for r in rows + report:
            _emit(r, out)
    else:
        out.write(format_table(report, ["cell", "p50", "p95", "p99", "coverage", "failed", "fit_time",
                                        "latency_p50"]) + "\n")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="joinbound", description="Join cardinality upper bounds from binned statistics.")
    p.add_argument("--version", action="version", version=f"joinbound {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, fmt=True):
        sp.add_argument("--config", help=f"JSON run config (also ${CONFIG_ENV})")
        if fmt:
            sp.add_argument("--format", choices=("json", "table"), default="json")

    def training(sp):
        sp.add_argument("--schema")
        sp.add_argument("--data", help="directory with one <table>.csv per table")
        sp.add_argument("--k", type=int)
        sp.add_argument("--total-bins", dest="total_bins", type=int)
        sp.add_argument("--strategy")
        sp.add_argument("--estimator", choices=ESTIMATOR_NAMES)
        sp.add_argument("--rate", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--smoothing", type=float)
        sp.add_argument("--workload")
        sp.add_argument("--cap", type=int)

    def query(sp):
        sp.add_argument("--model")
        sp.add_argument("--query")
        sp.add_argument("--query-file", dest="query_file")

    sp = sub.add_parser("gen", help="write a synthetic database")
    sp.add_argument("--spec", help="JSON synthetic-data spec")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--zipf", type=float, default=1.5)
    sp.add_argument("--workload-out", dest="workload_out")
    sp.add_argument("--n-queries", dest="n_queries", type=int, default=100)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="build a model file from schema and CSVs")
    common(sp, fmt=False)
    training(sp)
    sp.add_argument("--model")
    sp.add_argument("--bins-from", dest="bins_from", help="reuse the bins of an existing model")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("estimate", help="estimate query cardinalities")
    common(sp)
    query(sp)
    sp.add_argument("--explain", action="store_true")
    sp.add_argument("--order", choices=("mindegree", "induced"), default=None)
    sp.add_argument("--joinhist", choices=JOINHIST_MODES)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("subplans", help="estimate every connected sub-plan of a query")
    common(sp)
    query(sp)
    sp.add_argument("--cap", type=int)
    sp.set_defaults(func=cmd_subplans)

    sp = sub.add_parser("update", help="fold delta CSVs into a model")
    common(sp, fmt=False)
    sp.add_argument("--model")
    sp.add_argument("--data", help="directory of <table>.csv delta files")
    sp.add_argument("--out", help="write the updated model here instead of in place")
    sp.set_defaults(func=cmd_update)

    sp = sub.add_parser("bench", help="compare configurations against exact counts")
    common(sp)
    training(sp)
    sp.add_argument("--grid-k", dest="grid_k", help="comma-separated k values")
    sp.add_argument("--strategies", help="comma-separated binning strategies")
    sp.add_argument("--estimators", help="comma-separated estimators")
    sp.add_argument("--joinhist", help="comma-separated histogram-join modes to add per cell")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        if getattr(args, "order", None) == "mindegree":
            args.order = None
        return args.func(args, out)
    except SystemExit as exc:      # --help / --version
        return int(exc.code or 0)
    except JoinBoundError as exc:
        print(f"joinbound: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        print(f"joinbound: internal error: {exc}", file=sys.stderr)
        if os.environ.get("JOINBOUND_DEBUG"):
            traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
