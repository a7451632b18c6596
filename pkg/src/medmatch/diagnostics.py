"""Balance (absolute correlation), distribution preservation (KS), ESS and tuning."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .data import AnalyticDataset
from .errors import InsufficientDataError, MedMatchError, ParameterError, TuningError
from .gps import ClusterGps, GpsModel, unit_mean_sigma
from .matching import MatchedDataset, build_grid, iter_weights

__all__ = [
    "BalanceReport",
    "TuningGrid",
    "absolute_correlation",
    "pearson_abs",
    "ks_statistic",
    "effective_sample_size",
    "balance_report",
    "prematch_correlations",
    "balance_gate",
    "match_report",
    "default_deltas",
    "default_weights",
    "tune",
]


def pearson_abs(x, y) -> float:
    """|Pearson correlation|, defined as 0 when either vector is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise InsufficientDataError(f"correlation needs at least 3 rows, got {len(x)}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        return 0.0
    r = np.dot(xc, yc) / np.sqrt(sxx * syy)
    return float(min(1.0, abs(r)))


def absolute_correlation(matched: MatchedDataset, variable: str) -> float:
    """AC between the row's pseudo-exposure and the matched unit's value of ``variable``."""
    return pearson_abs(matched.pseudo_exposure, matched.matched_values(variable))


def ks_statistic(original, matched) -> float:
    """Two-sample Kolmogorov-Smirnov distance sup_x |F1(x) - F2(x)|."""
    a = np.sort(np.asarray(original, dtype=float))
    b = np.sort(np.asarray(matched, dtype=float))
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("KS statistic needs two non-empty samples")
    points = np.concatenate([a, b])
    fa = np.searchsorted(a, points, side="right") / a.size
    fb = np.searchsorted(b, points, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _ks_against_counts(sorted_values: np.ndarray, order: np.ndarray, counts: np.ndarray) -> float:
    """KS between a sample and the same units repeated ``counts`` times."""
    c = np.cumsum(counts[order])
    last = np.ones(len(sorted_values), dtype=bool)
    last[:-1] = sorted_values[:-1] < sorted_values[1:]
    pos = np.nonzero(last)[0]
    fa = (pos + 1) / len(sorted_values)
    fb = c[pos] / c[-1]
    return float(np.max(np.abs(fa - fb)))


def effective_sample_size(match_counts) -> float:
    """(sum c)^2 / sum c^2; 1 when one unit takes every match, N when usage is uniform."""
    c = np.asarray(list(match_counts.values()) if isinstance(match_counts, dict) else match_counts,
                   dtype=float)
    if np.any(c < 0):
        raise ParameterError("match counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ParameterError("effective sample size is undefined for all-zero counts")
    return float(total * total / np.dot(c, c))


@dataclass
class BalanceReport:
    ac: dict[str, float]
    ks: dict[str, float]
    ess: float
    n_units: int
    n_rows: int
    n_unmatched: int = 0
    prematch_ac: dict[str, float] = field(default_factory=dict)

    @property
    def mean_ac(self) -> float:
        return float(np.mean(list(self.ac.values())))

    @property
    def mean_ks(self) -> float:
        return float(np.mean(list(self.ks.values())))

    def to_dict(self) -> dict:
        out = {
            "ac": self.ac,
            "ks": self.ks,
            "mean_ac": self.mean_ac,
            "mean_ks": self.mean_ks,
            "ess": self.ess,
            "n_units": self.n_units,
            "n_rows": self.n_rows,
            "n_unmatched": self.n_unmatched,
        }
        if self.prematch_ac:
            out["prematch_ac"] = self.prematch_ac
            out["prematch_mean_ac"] = float(np.mean(list(self.prematch_ac.values())))
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = [{"variable": v, "ac": self.ac[v], "ks": self.ks[v],
                 "prematch_ac": self.prematch_ac.get(v, np.nan)} for v in self.ac]
        return pd.DataFrame(rows)


def prematch_correlations(data: AnalyticDataset) -> dict[str, float]:
    return {name: pearson_abs(data.exposure, values) for name, values in data.variables().items()}


def balance_report(matched: MatchedDataset, variables: Sequence[str] | None = None,
                   extra: dict[str, np.ndarray] | None = None) -> BalanceReport:
    """AC and KS for each variable plus ESS of the match counts.

    ``extra`` supplies additional per-unit variables (e.g. a simulated
    confounder) aligned with ``matched.data``.
    """
    data = matched.data
    pool = dict(data.variables())
    if extra:
        pool.update(extra)
    names = list(variables) if variables is not None else list(pool)
    counts = matched.match_counts
    ac, ks = {}, {}
    for name in names:
        values = np.asarray(pool[name], dtype=float)
        ac[name] = pearson_abs(matched.pseudo_exposure, values[matched.match])
        order = np.argsort(values, kind="stable")
        ks[name] = _ks_against_counts(values[order], order, counts)
    return BalanceReport(ac=ac, ks=ks, ess=effective_sample_size(counts), n_units=len(data),
                         n_rows=len(matched), n_unmatched=matched.n_unmatched,
                         prematch_ac={n: pearson_abs(data.exposure, pool[n]) for n in names})


def balance_gate(report: BalanceReport | float, threshold: float = 0.1) -> bool:
    mean_ac = report if isinstance(report, (int, float)) else report.mean_ac
    return bool(mean_ac < threshold)


def match_report(matched: MatchedDataset) -> dict:
    counts = matched.match_counts
    values, freq = np.unique(counts, return_counts=True)
    return {
        "rows": len(matched),
        "unmatched": matched.n_unmatched,
        "ess": effective_sample_size(counts) if counts.sum() else None,
        "counts_histogram": {str(int(v)): int(f) for v, f in zip(values, freq)},
    }


def default_deltas(data: AnalyticDataset, n: int = 10) -> np.ndarray:
    lo, hi = data.exposure_range
    span = hi - lo
    return np.linspace(span / 100, span / 10, n)


def default_weights() -> np.ndarray:
    return np.round(np.linspace(0.0, 1.0, 11), 10)


@dataclass
class TuningGrid:
    method: str
    criterion: str
    deltas: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    ac: np.ndarray
    ks: np.ndarray
    ess: np.ndarray
    variables: tuple[str, ...]
    selected: tuple[float, float]
    fixed: bool = False

    @property
    def selected_index(self) -> tuple[int, int]:
        i = int(np.nonzero(self.deltas == self.selected[0])[0][0])
        j = int(np.nonzero(self.weights == self.selected[1])[0][0])
        return i, j

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "method": self.method,
            "criterion": self.criterion,
            "fixed": self.fixed,
            "deltas": [float(d) for d in self.deltas],
            "weights": [float(w) for w in self.weights],
            "variables": list(self.variables),
            "criterion_values": clean(self.values),
            "mean_ac": clean(np.nanmean(self.ac, axis=2)) if self.ac.size else [],
            "mean_ks": clean(np.nanmean(self.ks, axis=2)) if self.ks.size else [],
            "ess": clean(self.ess),
            "selected": {"delta": self.selected[0], "weight": self.selected[1]},
        }

    @classmethod
    def fixed_point(cls, method: str, delta: float, weight: float) -> "TuningGrid":
        """Record of hyperparameters supplied by the user rather than searched."""
        one = np.zeros((1, 1))
        return cls(method=method, criterion="fixed", deltas=np.array([delta]),
                   weights=np.array([weight]), values=one, ac=np.zeros((1, 1, 0)),
                   ks=np.zeros((1, 1, 0)), ess=np.full((1, 1), np.nan), variables=(),
                   selected=(float(delta), float(weight)), fixed=True)


def _normalize_over_grid(a: np.ndarray) -> np.ndarray:
    """Min-max each variable's values across the finite grid points."""
    out = np.full_like(a, np.nan)
    for v in range(a.shape[-1]):
        x = a[..., v]
        ok = np.isfinite(x)
        if not ok.any():
            continue
        lo, hi = x[ok].min(), x[ok].max()
        out[..., v] = np.where(ok, 0.0 if hi == lo else (x - lo) / (hi - lo), np.nan)
    return out


def tune(data: AnalyticDataset, gps: GpsModel | ClusterGps, method: str,
         deltas: Sequence[float] | None = None, weights: Sequence[float] | None = None,
         criterion: str = "ac_plus_ks", metric: str = "l1", caliper: str = "half") -> TuningGrid:
    """Grid search over (delta, weight) minimising the normalised AC/KS criterion.

    Ties go to the smallest delta, then the smallest weight.
    """
    if criterion not in ("ac_only", "ac_plus_ks"):
        raise ParameterError(f"criterion must be 'ac_only' or 'ac_plus_ks', got {criterion!r}")
    deltas = np.sort(np.asarray(default_deltas(data) if deltas is None else deltas, dtype=float))
    weights = np.sort(np.asarray(default_weights() if weights is None else weights, dtype=float))
    if deltas.size == 0 or weights.size == 0:
        raise ParameterError("tuning grid needs at least one delta and one weight")
    variables = tuple(data.variables())
    values = {n: np.asarray(v, dtype=float) for n, v in data.variables().items()}
    orders = {n: np.argsort(v, kind="stable") for n, v in values.items()}
    sorted_vals = {n: values[n][orders[n]] for n in variables}

    shape = (len(deltas), len(weights), len(variables))
    ac = np.full(shape, np.nan)
    ks = np.full(shape, np.nan)
    ess = np.full(shape[:2], np.nan)
    moments = unit_mean_sigma(gps, data)
    for i, delta in enumerate(deltas):
        radius = delta / 2 if caliper == "half" else delta
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grid = build_grid(data, float(delta))
            results = iter_weights(data, gps, grid, method, radius, weights, metric, caliper,
                                   moments)
            for j, (_, matched) in enumerate(results):
                if len(matched) < 3:
                    continue
                counts = matched.match_counts
                px = matched.pseudo_exposure
                for v, name in enumerate(variables):
                    ac[i, j, v] = pearson_abs(px, values[name][matched.match])
                    ks[i, j, v] = _ks_against_counts(sorted_vals[name], orders[name], counts)
                ess[i, j] = effective_sample_size(counts)
        except MedMatchError:
            continue

    ok = np.all(np.isfinite(ac), axis=2)
    if not ok.any():
        raise TuningError(f"matching failed at every grid point for method {method!r}")
    ac_n = _normalize_over_grid(ac)
    if criterion == "ac_only":
        crit = np.nanmean(ac_n, axis=2)
    else:
        crit = np.nanmean((ac_n + _normalize_over_grid(ks)) / 2, axis=2)
    crit = np.where(ok, crit, np.nan)
    flat = int(np.nanargmin(crit))  # row-major: smallest delta, then smallest weight
    i, j = divmod(flat, len(weights))
    return TuningGrid(method=method, criterion=criterion, deltas=deltas, weights=weights,
                      values=crit, ac=ac, ks=ks, ess=ess, variables=variables,
                      selected=(float(deltas[i]), float(weights[j])))
