"""Common interface for single-table estimators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from joinbound.binning import BinMap, BinSummary
from joinbound.catalog import Table
from joinbound.predicates import Predicate, table_mask


@dataclass
class ConditionalBinDistribution:
    """Expected filtered row counts per bin (or bin pair) of one or two join keys.

    ``mass[b]`` estimates ``P(key in b | filter) * |filtered rows|``.
    ``mfv`` and ``ndv`` hold the unconditioned per-bin most-frequent-value
    count and distinct count of each key.
    """

    keys: tuple[str, ...]
    mass: np.ndarray
    mfv: tuple[np.ndarray, ...]
    ndv: tuple[np.ndarray, ...]
    filtered_total: float
    estimator: str = ""
    meta: dict = field(default_factory=dict)

    def marginal(self, i: int) -> np.ndarray:
        if self.mass.ndim == 1:
            return self.mass
        return self.mass.sum(axis=1 - i)


def binned_keys(table: Table, keys, binmaps: Mapping[str, BinMap]):
    """Bin index per row for each key plus a mask of rows where all keys are non-null."""
    ok = np.ones(table.n_rows, dtype=bool)
    idx = []
    for key in keys:
        values, valid = table.column(key)
        ok &= valid
        idx.append(binmaps[key].lookup(values))
    return idx, ok


def bin_counts(idx, rows: np.ndarray, shape, weights=None) -> np.ndarray:
    """Histogram of selected rows over the bin grid given per-key bin indices."""
    flat = np.zeros(int(rows.sum()), dtype=np.int64)
    for i, k in zip(idx, shape):
        flat = flat * k + i[rows]
    size = int(np.prod(shape))
    if weights is None:
        out = np.bincount(flat, minlength=size).astype(np.float64)
    else:
        out = np.bincount(flat, weights=weights[rows], minlength=size)
    return out.reshape(shape)


class TableEstimator:
    """Produces conditional bin distributions for one table.

    Subclasses implement :meth:`fit`, :meth:`_mass` and :meth:`update`.
    """

    tag = "base"

    def __init__(self):
        self.table: Table | None = None
        self.binmaps: dict[str, BinMap] = {}

    def fit(self, table: Table, binmaps: Mapping[str, BinMap]):
        raise NotImplementedError

    def _mass(self, pred: Predicate | None, keys: tuple[str, ...]) -> tuple[np.ndarray, float]:
        raise NotImplementedError

    def update(self, table: Table, inserted: Table, deleted: Table):
        """Absorb a delta. ``table`` is the post-update table."""
        raise NotImplementedError

    def filtered_total(self, pred: Predicate | None) -> float:
        return self._mass(pred, ())[1]

    def distribution(self, pred: Predicate | None, keys, summaries: Mapping[str, BinSummary]
                     ) -> ConditionalBinDistribution:
        keys = tuple(keys)
        mass, total = self._mass(pred, keys)
        return ConditionalBinDistribution(
            keys, mass,
            tuple(summaries[k].mfv.astype(np.float64) for k in keys),
            tuple(summaries[k].ndv.astype(np.float64) for k in keys),
            float(total), self.tag)

    def get_state(self) -> tuple[dict, dict]:
        return {}, {}

    def set_state(self, meta: dict, arrays: Mapping[str, np.ndarray], table: Table,
                  binmaps: Mapping[str, BinMap]):
        self.table = table
        self.binmaps = dict(binmaps)
        return self


def scan_mass(table: Table, pred, keys, binmaps, scale: float = 1.0):
    rows = table_mask(table, pred)
    total = float(rows.sum())
    if not keys:
        return np.asarray(total * scale), total * scale
    idx, ok = binned_keys(table, keys, binmaps)
    shape = tuple(binmaps[k].n_bins for k in keys)
    mass = bin_counts(idx, rows & ok, shape)
    if scale != 1.0:
        mass = mass * scale
        total = total * scale
    return mass, total
