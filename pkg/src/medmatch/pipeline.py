"""One pass of GPS fit -> match -> smooth with fixed hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AnalyticDataset
from .erf import ErfEstimate, smooth_erf
from .gps import ClusterGps, GpsModel, fit_method_gps
from .learners import RegressorSpec
from .matching import MatchedDataset, MatchSpec, build_grid, match_all

__all__ = ["PipelineResult", "run_pipeline"]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    gps: GpsModel | ClusterGps
    matched: MatchedDataset
    erf: ErfEstimate
    extras: dict = field(default_factory=dict)


def run_pipeline(data: AnalyticDataset, spec: MatchSpec, regressor: RegressorSpec | None = None,
                 bandwidth: float | None = None, grid: np.ndarray | None = None,
                 gps: GpsModel | ClusterGps | None = None, grid_size: int = 100) -> PipelineResult:
    if gps is None:
        gps = fit_method_gps(data, spec.method, regressor)
    exposure_grid = build_grid(data, spec.delta)
    matched = match_all(data, gps, exposure_grid, spec)
    erf = smooth_erf(matched, grid_size=grid_size, bandwidth=bandwidth, grid=grid)
    return PipelineResult(gps=gps, matched=matched, erf=erf)
