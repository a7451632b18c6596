"""Pointwise Wald bands from a cluster-stratified m-out-of-n block bootstrap.

Blocks are the unit's ``block_id`` (all rows sharing it are resampled
together). Each replicate draws ``m`` blocks with replacement, allocating
them to clusters in proportion to each cluster's share of blocks, reruns the
pipeline with the hyperparameters held fixed and evaluates the ERF on the
full-data grid. The replicate spread is rescaled by sqrt(m / n).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .data import AnalyticDataset
from .erf import ErfEstimate
from .errors import InferenceError, MedMatchError, ParameterError
from .gps import ClusterGps, GpsModel
from .learners import RegressorSpec
from .matching import MatchSpec
from .pipeline import run_pipeline

__all__ = [
    "BootstrapSpec",
    "ErfBand",
    "default_m",
    "normal_quantile",
    "allocate_blocks",
    "resample_blocks",
    "block_bootstrap_band",
]


def default_m(n_blocks: int) -> int:
    return int(math.floor(2.0 * math.sqrt(n_blocks)))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"probability must lie in (0, 1), got {p}")
    return float(ndtri(p))


@dataclass(frozen=True)
class BootstrapSpec:
    replicates: int = 200
    m: int | None = None
    stratify: bool = True
    level: float = 0.95
    seed: int = 0
    refit_gps: bool = True
    max_dropped: float = 0.2

    def __post_init__(self):
        if self.replicates < 2:
            raise ParameterError("need at least 2 bootstrap replicates")
        if self.m is not None and self.m < 1:
            raise ParameterError("m must be positive")
        if not 0.0 < self.level < 1.0:
            raise ParameterError("confidence level must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class ErfBand:
    grid: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    replicates: np.ndarray
    m: int
    n_blocks: int
    dropped: int
    seed: int

    def log(self) -> dict:
        return {"B": int(len(self.replicates) + self.dropped), "m": self.m, "n": self.n_blocks,
                "dropped": self.dropped, "seed": self.seed}


def _blocks(data: AnalyticDataset):
    """Block labels, rows of each block and the cluster each block belongs to."""
    labels, first, inv = np.unique(data.block_id, return_index=True, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.cumsum(np.bincount(inv, minlength=len(labels)))
    rows = np.split(order, bounds[:-1])
    return rows, data.cluster_id[first]


def allocate_blocks(block_counts: dict[str, int], m: int) -> dict[str, int]:
    """Proportional allocation of ``m`` draws; leftover draws go to the largest clusters."""
    total = sum(block_counts.values())
    alloc = {c: int(math.floor(m * n / total)) for c, n in block_counts.items()}
    left = m - sum(alloc.values())
    by_size = sorted(block_counts, key=lambda c: -block_counts[c])  # stable: first-seen on ties
    for c in by_size[:left]:
        alloc[c] += 1
    return alloc


def resample_blocks(data: AnalyticDataset, m: int, rng: np.random.Generator,
                    stratify: bool = True) -> AnalyticDataset:
    rows, block_cluster = _blocks(data)
    if stratify:
        clusters = list(dict.fromkeys(block_cluster.tolist()))
        members = {c: np.nonzero(block_cluster == c)[0] for c in clusters}
        alloc = allocate_blocks({c: len(members[c]) for c in clusters}, m)
        picked = np.concatenate([rng.choice(members[c], size=alloc[c], replace=True)
                                 for c in clusters if alloc[c] > 0])
    else:
        picked = rng.integers(0, len(rows), size=m)
    index = np.concatenate([rows[b] for b in picked])
    return data.take(index, relabel=True)


def _replicate(args):
    data, spec, regressor, bandwidth, grid, gps, m, stratify, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    try:
        sample = resample_blocks(data, m, rng, stratify)
        result = run_pipeline(sample, spec, regressor, bandwidth=bandwidth, grid=grid, gps=gps)
    except MedMatchError:
        return None
    return result.erf.mu_hat


def block_bootstrap_band(data: AnalyticDataset, estimate: ErfEstimate, match_spec: MatchSpec,
                         spec: BootstrapSpec, regressor: RegressorSpec | None = None,
                         gps: GpsModel | ClusterGps | None = None, workers: int = 1) -> ErfBand:
    """Band around ``estimate`` (the full-data fit) with everything but the data fixed."""
    rows, _ = _blocks(data)
    n_blocks = len(rows)
    m = default_m(n_blocks) if spec.m is None else spec.m
    if m > n_blocks:
        raise ParameterError(f"m={m} exceeds the number of blocks ({n_blocks})")
    fixed_gps = None if spec.refit_gps else gps
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.replicates)
    jobs = [(data, match_spec, regressor, estimate.bandwidth, estimate.grid, fixed_gps, m,
             spec.stratify, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(_replicate, jobs))
    else:
        curves = [_replicate(job) for job in jobs]
    kept = [c for c in curves if c is not None]
    dropped = len(curves) - len(kept)
    if dropped > spec.max_dropped * spec.replicates or len(kept) < 2:
        raise InferenceError(f"{dropped} of {spec.replicates} bootstrap replicates failed")
    reps = np.vstack(kept)
    se = math.sqrt(m / n_blocks) * reps.std(axis=0, ddof=1)
    z = normal_quantile((1 + spec.level) / 2)
    return ErfBand(grid=estimate.grid, se=se, ci_lower=estimate.mu_hat - z * se,
                   ci_upper=estimate.mu_hat + z * se, replicates=reps, m=m, n_blocks=n_blocks,
                   dropped=dropped, seed=spec.seed)
