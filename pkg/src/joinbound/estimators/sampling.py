"""Uniform row sample without replacement, counts scaled by the inverse rate."""

from __future__ import annotations

import numpy as np

from joinbound.catalog import Table
from joinbound.estimators.base import TableEstimator, scan_mass
from joinbound.exceptions import UsageError


def sample_size(n_rows: int, rate: float) -> int:
    return int(np.floor(rate * n_rows + 0.5))


def sample_indices(n_rows: int, rate: float, seed) -> np.ndarray:
    if not 0.0 < rate <= 1.0:
        raise UsageError(f"sampling rate must lie in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    m = sample_size(n_rows, rate)
    return np.sort(rng.choice(n_rows, size=m, replace=False)).astype(np.int64)


def build_sample(table: Table, rate: float, seed=0) -> Table:
    return table.take(sample_indices(table.n_rows, rate, seed))


class Sampling(TableEstimator):
    tag = "sample"

    def __init__(self, rate: float = 0.01, seed=0):
        super().__init__()
        if not 0.0 < rate <= 1.0:
            raise UsageError(f"sampling rate must lie in (0, 1], got {rate}")
        self.rate = float(rate)
        self.seed = seed
        self.indices = np.zeros(0, dtype=np.int64)
        self.sample: Table | None = None

    def _materialize(self, table):
        self.table = table
        self.indices = sample_indices(table.n_rows, self.rate, self.seed)
        self.sample = table.take(self.indices)

    def fit(self, table, binmaps):
        self.binmaps = dict(binmaps)
        self._materialize(table)
        return self

    def _mass(self, pred, keys):
        return scan_mass(self.sample, pred, keys, self.binmaps, scale=1.0 / self.rate)

    def update(self, table, inserted, deleted):
        # redraw over the updated table so the sample stays uniform
        self._materialize(table)

    def get_state(self):
        return {"rate": self.rate, "seed": self.seed}, {"indices": self.indices}

    def set_state(self, meta, arrays, table, binmaps):
        super().set_state(meta, arrays, table, binmaps)
        self.rate = float(meta["rate"])
        self.seed = meta["seed"]
        self.indices = np.asarray(arrays["indices"], dtype=np.int64)
        self.sample = table.take(self.indices)
        return self
