import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from joinbound.catalog import Database, load_schema
from joinbound.oracle import default_spec, generate_db

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Two tables whose key counts reproduce the worked join example:
# A.id: 1 x8, 2 x4, 3 x3, plus one row of 5 (total 16)
# B.Aid: 1 x6, 2 x5, 3 x5, 6 x6, 7 x2 (total 24)
A_IDS = [1] * 8 + [2] * 4 + [3] * 3 + [5]
B_IDS = [1] * 6 + [2] * 5 + [3] * 5 + [6] * 6 + [7] * 2

TOY_SCHEMA = {
    "tables": [
        {"name": "A", "columns": [{"name": "id", "kind": "integer-key"}, {"name": "x", "kind": "integer"},
                                  {"name": "name", "kind": "text"}]},
        {"name": "B", "columns": [{"name": "Aid", "kind": "integer-key"}, {"name": "y", "kind": "integer"}]},
    ],
    "joins": ["A.id=B.Aid"],
}

FIG_QUERY = "SELECT COUNT(*) FROM A a, B b WHERE a.id = b.Aid"


def toy_columns():
    names = ["Anna", "Bo", "Annika", "Cy", "Dan", "Hanna", "Eve", "Jo"]
    return {
        "A": {"id": A_IDS, "x": list(range(16)), "name": [names[i % len(names)] for i in range(16)]},
        "B": {"Aid": B_IDS, "y": [i % 7 for i in range(24)]},
    }


@pytest.fixture
def toy_db():
    return Database.from_columns(load_schema(TOY_SCHEMA), toy_columns())


@functools.lru_cache(maxsize=None)
def synth_db(seed=0, scale=0.5, zipf=1.5):
    return generate_db(default_spec(seed=seed, scale=scale, zipf=zipf))


@pytest.fixture(scope="session")
def small_db():
    return synth_db(1, 0.5)


def brute_bound(counts_by_table, labels):
    """Sum over bins of min_t(total_t / mfv_t) * prod_t mfv_t, from plain dicts.

    ``counts_by_table`` is a list of {value: count}; ``labels`` maps value -> bin.
    """
    bins = set(labels.values())
    out = 0.0
    for b in bins:
        totals, mfvs = [], []
        for counts in counts_by_table:
            in_bin = [c for v, c in counts.items() if labels[v] == b]
            totals.append(sum(in_bin))
            mfvs.append(max(in_bin, default=0))
        if min(totals) == 0:
            continue
        ratio = min(t / m for t, m in zip(totals, mfvs))
        prod = 1.0
        for m in mfvs:
            prod *= m
        out += ratio * prod
    return out


def count_dict(values):
    d = {}
    for v in values:
        d[v] = d.get(v, 0) + 1
    return d


def rel_close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def rng(seed):
    return np.random.default_rng(seed)


# -- acceptance report: one line per criterion in the terminal summary --------------

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {status}  {label}  {detail}")
