"""Join cardinality upper bounds from binned single-table statistics."""

from joinbound.binning import (BinMap, BinSummary, EqualDepthBinner, EqualWidthBinner, GBSABinner,
                               SingleBinner, allocate_bin_budget, gbsa, min_variance_bins,
                               summarize_bins)
from joinbound.catalog import Catalog, Database, ValueCountStore, load_schema
from joinbound.exceptions import DataError, JoinBoundError, QueryError, SchemaError, UsageError
from joinbound.factorgraph import EstimateReport
from joinbound.model import JoinCardinalityEstimator
from joinbound.queryir import Query, build_join_graph, enumerate_subplans, parse_sql

__version__ = "0.1.0"

__all__ = [
    "BinMap", "BinSummary", "Catalog", "DataError", "Database", "EqualDepthBinner", "EqualWidthBinner",
    "EstimateReport", "GBSABinner", "JoinBoundError", "JoinCardinalityEstimator", "Query", "QueryError",
    "SchemaError", "SingleBinner", "UsageError", "ValueCountStore", "allocate_bin_budget",
    "build_join_graph", "enumerate_subplans", "gbsa", "load_schema", "min_variance_bins", "parse_sql",
    "summarize_bins",
]
