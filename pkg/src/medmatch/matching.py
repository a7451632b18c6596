"""Exposure windows, caliper matching on GPS and cluster surrogate, matched data.

Four strategies share one engine. For unit ``j`` at pseudo-exposure
``w_l`` the candidates are the units whose observed exposure lies within the
caliper of ``w_l``; the match minimises

* medmatch:        tau * d(e*_j(w_l), e*_k(w_k)) + (1 - tau) * d(u*_j, u*_k)
* adjusted, fixed: lam * d(e*_j(w_l), e*_k(w_k)) + (1 - lam) * d(w_l*, w*_k)
* within:          as adjusted, but GPS model, candidate pool and GPS
                   normalisation are all restricted to unit j's cluster.

GPS values are min-max normalised per level over the targets' values at the
level together with every pool unit's value at its observed exposure; U and
W are normalised once over the whole sample. Ties
go to the candidate with the lowest unit id.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import pandas as pd
from numba import njit

from .data import AnalyticDataset
from .errors import ParameterError
from .gps import ClusterGps, GpsModel, normal_density, unit_mean_sigma

__all__ = [
    "METHODS",
    "ExposureGrid",
    "MatchSpec",
    "MatchedDataset",
    "build_grid",
    "min_max_normalize",
    "match_all",
    "match_counts_to_weights",
    "prepare_levels",
    "select_matches",
]

METHODS = ("medmatch", "adjusted", "within", "fixed")


@dataclass(frozen=True)
class ExposureGrid:
    delta: float
    w_min: float
    pseudo_exposures: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.pseudo_exposures)

    @property
    def windows(self) -> list[tuple[float, float]]:
        return [(self.w_min + l * self.delta, self.w_min + (l + 1) * self.delta)
                for l in range(self.n_levels)]


def build_grid(data: AnalyticDataset | tuple[float, float], delta: float) -> ExposureGrid:
    """Split [min w, min w + L*delta] into L windows of width delta; levels are midpoints."""
    if not delta > 0:
        raise ParameterError(f"caliper delta must be positive, got {delta}")
    lo, hi = data if isinstance(data, tuple) else data.exposure_range
    if not hi > lo:
        raise ParameterError("exposure range is empty (max(w) == min(w))")
    span = hi - lo
    if delta >= span:
        warnings.warn(f"delta={delta} covers the whole exposure range; using a single window",
                      stacklevel=2)
        n_levels = 1
    else:
        # tolerance keeps exact multiples (e.g. 1/0.25) from gaining a spurious window
        n_levels = max(1, math.ceil(span / delta - 1e-9))
    levels = lo + (np.arange(n_levels) + 0.5) * delta
    return ExposureGrid(delta=float(delta), w_min=float(lo), pseudo_exposures=levels)


def min_max_normalize(values) -> np.ndarray:
    """Affine map onto [0, 1]; a constant vector maps to zeros."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ParameterError("cannot normalise an empty vector")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _scale(x, lo, hi):
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class MatchSpec:
    method: str = "medmatch"
    delta: float = 1.0
    weight: float = 0.5
    metric: str = "l1"
    caliper: str = "half"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.delta > 0:
            raise ParameterError(f"delta must be positive, got {self.delta}")
        if not 0.0 <= self.weight <= 1.0:
            raise ParameterError(f"weight must lie in [0, 1], got {self.weight}")
        if self.metric not in ("l1", "l2"):
            raise ParameterError(f"metric must be 'l1' or 'l2', got {self.metric!r}")
        if self.caliper not in ("half", "full"):
            raise ParameterError(f"caliper must be 'half' or 'full', got {self.caliper!r}")

    @property
    def radius(self) -> float:
        return self.delta / 2 if self.caliper == "half" else self.delta

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class MatchedDataset:
    """Imputed counterfactual rows; indices refer to positions in ``data``."""

    data: AnalyticDataset
    grid: ExposureGrid
    spec: MatchSpec
    target: np.ndarray
    level: np.ndarray
    match: np.ndarray
    n_unmatched: int

    def __len__(self) -> int:
        return len(self.target)

    @property
    def pseudo_exposure(self) -> np.ndarray:
        return self.grid.pseudo_exposures[self.level]

    @property
    def imputed_outcome(self) -> np.ndarray:
        return self.data.outcome[self.match]

    @property
    def match_counts(self) -> np.ndarray:
        return np.bincount(self.match, minlength=len(self.data))

    def matched_values(self, variable: str) -> np.ndarray:
        variables = self.data.variables()
        if variable not in variables:
            raise KeyError(f"unknown variable {variable!r}; have {sorted(variables)}")
        return variables[variable][self.match]

    def to_frame(self) -> pd.DataFrame:
        d = self.data
        cols = {
            "target_id": d.unit_id[self.target],
            "level": self.level,
            "pseudo_exposure": self.pseudo_exposure,
            "match_id": d.unit_id[self.match],
            "imputed_outcome": self.imputed_outcome,
            "match_U": d.u[self.match],
            "match_Zstar": d.zstar[self.match],
        }
        for k, name in enumerate(d.covariate_names):
            cols[f"match_{name}"] = d.covariates[self.match, k]
        return pd.DataFrame(cols)


def match_counts_to_weights(matched: MatchedDataset) -> dict[str, int]:
    counts = matched.match_counts
    return {str(uid): int(c) for uid, c in zip(matched.data.unit_id, counts)}


@dataclass
class _Cell:
    """One level x pool block: targets, candidates and their normalised scores."""

    level: int
    targets: np.ndarray
    candidates: np.ndarray
    gps_t: np.ndarray
    gps_c: np.ndarray
    aux_t: np.ndarray
    aux_c: np.ndarray


def _caliper_candidates(w_sorted, order, w, centre, radius):
    pad = 1e-9 * max(1.0, abs(centre), radius)
    lo = np.searchsorted(w_sorted, centre - radius - pad, side="left")
    hi = np.searchsorted(w_sorted, centre + radius + pad, side="right")
    cand = order[lo:hi]
    return cand[np.abs(w[cand] - centre) <= radius]


def prepare_levels(data: AnalyticDataset, gps: GpsModel | ClusterGps, grid: ExposureGrid,
                   method: str, radius: float,
                   moments: tuple[np.ndarray, np.ndarray] | None = None) -> list[_Cell]:
    """Everything the selection step needs that does not depend on the weight.

    ``moments`` optionally supplies the per-unit GPS mean and sd so repeated
    calls (one per caliper during tuning) skip the regressor.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}")
    if (method == "within") != isinstance(gps, ClusterGps):
        raise ParameterError(f"method {method!r} got an incompatible GPS model")
    if isinstance(gps, GpsModel):
        expected = "C_Zstar_clusters" if method == "fixed" else "C_Zstar_U"
        if gps.feature_spec != expected:
            raise ParameterError(f"method {method!r} needs a {expected} GPS, got {gps.feature_spec}")

    w = data.exposure
    mean, sigma = unit_mean_sigma(gps, data) if moments is None else moments
    gps_obs = normal_density(w, mean, sigma)
    order = np.argsort(w, kind="stable")
    w_sorted = w[order]
    by_id = np.argsort(data.id_rank, kind="stable")
    rank = data.id_rank
    u_star = min_max_normalize(data.u)
    w_lo, w_hi = data.exposure_range

    if method == "within":
        pools = [np.nonzero(data.cluster_id == c)[0] for c in data.clusters]
    else:
        pools = [by_id]
    pools = [p[np.argsort(rank[p], kind="stable")] for p in pools]
    pool_of = np.empty(len(data), dtype=np.int64)
    for k, p in enumerate(pools):
        pool_of[p] = k

    # observed-exposure GPS of every unit in the pool enters each level's min-max
    obs_lo = [gps_obs[p].min() for p in pools]
    obs_hi = [gps_obs[p].max() for p in pools]

    cells = []
    for l, centre in enumerate(grid.pseudo_exposures):
        cand_all = _caliper_candidates(w_sorted, order, w, centre, radius)
        cand_all = cand_all[np.argsort(rank[cand_all], kind="stable")]
        gps_level = normal_density(centre, mean, sigma)
        for k, targets in enumerate(pools):
            cand = cand_all[pool_of[cand_all] == k] if len(pools) > 1 else cand_all
            et, ec = gps_level[targets], gps_obs[cand]
            lo = min(et.min(), obs_lo[k])
            hi = max(et.max(), obs_hi[k])
            if method == "medmatch":
                aux_t, aux_c = u_star[targets], u_star[cand]
            else:
                aux_t = np.full(len(targets), _scale(np.float64(centre), w_lo, w_hi))
                aux_c = _scale(w[cand], w_lo, w_hi)
            cells.append(_Cell(l, targets, cand, _scale(et, lo, hi), _scale(ec, lo, hi), aux_t, aux_c))
    return cells


@njit(cache=True)
def _argmin_kernel(gps_t, gps_c, aux_t, aux_c, weight, other, squared, out):
    # strict "<" keeps the first (lowest-id) candidate on exact ties
    for i in range(gps_t.shape[0]):
        best = np.inf
        arg = 0
        for k in range(gps_c.shape[0]):
            dg = gps_t[i] - gps_c[k]
            da = aux_t[i] - aux_c[k]
            if squared:
                cost = weight * (dg * dg) + other * (da * da)
            else:
                cost = weight * abs(dg) + other * abs(da)
            if cost < best:
                best = cost
                arg = k
        out[i] = arg


def _argmin_cost(cell: _Cell, weight: float, metric: str) -> np.ndarray:
    out = np.empty(len(cell.targets), dtype=np.int64)
    _argmin_kernel(cell.gps_t, cell.gps_c, cell.aux_t, cell.aux_c, float(weight),
                   1.0 - float(weight), metric == "l2", out)
    return out


def select_matches(data: AnalyticDataset, grid: ExposureGrid, spec: MatchSpec,
                   cells: list[_Cell]) -> MatchedDataset:
    targets, levels, matches = [], [], []
    unmatched = 0
    for cell in cells:
        if len(cell.targets) == 0:
            continue
        if len(cell.candidates) == 0:
            unmatched += len(cell.targets)
            continue
        pick = _argmin_cost(cell, spec.weight, spec.metric)
        targets.append(cell.targets)
        levels.append(np.full(len(cell.targets), cell.level))
        matches.append(cell.candidates[pick])
    if targets:
        target = np.concatenate(targets)
        level = np.concatenate(levels)
        match = np.concatenate(matches)
        # canonical row order: by level, then by target position
        key = np.lexsort((target, level))
        target, level, match = target[key], level[key], match[key]
    else:
        target = level = match = np.zeros(0, dtype=np.int64)
    return MatchedDataset(data=data, grid=grid, spec=spec, target=target, level=level,
                          match=match, n_unmatched=unmatched)


def match_all(data: AnalyticDataset, gps: GpsModel | ClusterGps, grid: ExposureGrid,
              spec: MatchSpec) -> MatchedDataset:
    """Match every unit at every pseudo-exposure level (with replacement)."""
    if not math.isclose(grid.delta, spec.delta, rel_tol=1e-12):
        raise ParameterError(f"grid delta {grid.delta} differs from spec delta {spec.delta}")
    cells = prepare_levels(data, gps, grid, spec.method, spec.radius)
    return select_matches(data, grid, spec, cells)


def iter_weights(data, gps, grid, method, radius, weights, metric="l1", caliper="half",
                 moments=None) -> Iterator[tuple[float, MatchedDataset]]:
    """Matched datasets for several weights sharing one grid (prepared once)."""
    cells = prepare_levels(data, gps, grid, method, radius, moments)
    for weight in weights:
        spec = MatchSpec(method=method, delta=grid.delta, weight=float(weight), metric=metric,
                         caliper=caliper)
        yield float(weight), select_matches(data, grid, spec, cells)
