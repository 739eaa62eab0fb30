"""Exact estimator: filters the stored table at query time."""

from __future__ import annotations

from joinbound.estimators.base import TableEstimator, scan_mass


class TrueScan(TableEstimator):
    tag = "truescan"

    def fit(self, table, binmaps):
        self.table = table
        self.binmaps = dict(binmaps)
        return self

    def _mass(self, pred, keys):
        return scan_mass(self.table, pred, keys, self.binmaps)

    def update(self, table, inserted, deleted):
        self.table = table
