"""GPS matching for exposure-response estimation in clustered data with surrogates."""

from .data import (
    AnalyticDataset,
    AnalyticUnit,
    Schema,
    load_dataset,
    trim_exposure_tails,
    truncate_by_cluster_support,
)
from .diagnostics import BalanceReport, TuningGrid, balance_gate, balance_report, tune
from .erf import ErfEstimate, select_bandwidth, smooth_erf
from .errors import MedMatchError
from .gps import ClusterGps, GpsModel, fit_gps, fit_method_gps, gps_density
from .inference import BootstrapSpec, ErfBand, block_bootstrap_band
from .learners import RegressorSpec
from .matching import METHODS, MatchedDataset, MatchSpec, build_grid, match_all
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AnalyticDataset",
    "AnalyticUnit",
    "Schema",
    "load_dataset",
    "trim_exposure_tails",
    "truncate_by_cluster_support",
    "BalanceReport",
    "TuningGrid",
    "balance_gate",
    "balance_report",
    "tune",
    "ErfEstimate",
    "select_bandwidth",
    "smooth_erf",
    "MedMatchError",
    "ClusterGps",
    "GpsModel",
    "fit_gps",
    "fit_method_gps",
    "gps_density",
    "BootstrapSpec",
    "ErfBand",
    "block_bootstrap_band",
    "RegressorSpec",
    "METHODS",
    "MatchedDataset",
    "MatchSpec",
    "build_grid",
    "match_all",
    "run_pipeline",
]
