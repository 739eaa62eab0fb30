from joinbound.estimators.base import ConditionalBinDistribution, TableEstimator
from joinbound.estimators.chowliu import ChowLiu
from joinbound.estimators.sampling import Sampling, build_sample
from joinbound.estimators.truescan import TrueScan

ESTIMATORS = {"truescan": TrueScan, "sample": Sampling, "chowliu": ChowLiu}


def make_estimator(name: str, rate: float = 0.01, seed=0, smoothing: float = 1.0):
    if name == "truescan":
        return TrueScan()
    if name == "sample":
        return Sampling(rate, seed)
    if name == "chowliu":
        return ChowLiu(smoothing=smoothing, rate=rate, seed=seed)
    from joinbound.exceptions import UsageError
    raise UsageError(f"unknown estimator {name!r}")


__all__ = ["ChowLiu", "ConditionalBinDistribution", "ESTIMATORS", "Sampling", "TableEstimator",
           "TrueScan", "build_sample", "make_estimator"]
