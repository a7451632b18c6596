"""Local linear (Gaussian kernel) smoothing of matched data into an ERF."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateModelError, InsufficientDataError, MedMatchError, ParameterError
from .matching import MatchedDataset

__all__ = [
    "ErfEstimate",
    "local_linear",
    "loocv_score",
    "default_bandwidths",
    "select_bandwidth",
    "smooth_erf",
    "hazard_ratios",
]

# relative determinant below which the local design is treated as singular
_SINGULAR = 1e-10
_CHUNK = 1_000_000


def _aggregate(x, y):
    ux, inv, n = np.unique(np.asarray(x, dtype=float), return_inverse=True, return_counts=True)
    sy = np.bincount(inv, weights=np.asarray(y, dtype=float), minlength=len(ux))
    return ux, inv, n.astype(float), sy


def _fit_at(ux, n, sy, at, h, leverage=False):
    """Local linear fit at points ``at``; returns (fit, singular mask, own-point leverage).

    Moments are taken about the data point nearest each evaluation point and
    outcomes enter as group means relative to that point's mean. Both are
    exact at the centre, so a fit dominated by one level still resolves the
    slope towards its neighbours instead of losing it to rounding. Leverage is
    only meaningful when ``at`` are data points and is computed only on request.
    """
    at = np.asarray(at, dtype=float)
    ym = sy / n
    fit = np.empty(len(at))
    singular = np.zeros(len(at), dtype=bool)
    lev = np.empty(len(at))
    step = max(1, _CHUNK // len(ux))
    for s in range(0, len(at), step):
        t = at[s:s + step]
        rows = np.arange(len(t))
        d = ux[None, :] - t[:, None]
        z2 = (d / h) ** 2
        c = np.argmin(z2, axis=1)
        # shift so the closest point has kernel weight 1; ratios are unchanged
        shift = z2[rows, c]
        k = np.exp(-0.5 * (z2 - shift[:, None]))
        kn = k * n[None, :]
        dc = d[rows, c]
        e = d - dc[:, None]
        r = ym[None, :] - ym[c][:, None]
        s0 = kn.sum(axis=1)
        s1 = (kn * e).sum(axis=1)
        s2 = (kn * e * e).sum(axis=1)
        r0 = (kn * r).sum(axis=1)
        r1 = (kn * r * e).sum(axis=1)
        det = s0 * s2 - s1 * s1
        bad = ~(det > _SINGULAR * s0 * s2)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (s2 * r0 - s1 * r1) / det
            b = (s0 * r1 - s1 * r0) / det
            ll = ym[c] + a - b * dc
            if leverage:
                # kernel weight of a single row sitting exactly at t, relative to the shift
                k0 = np.exp(0.5 * shift)
                quad = (s2 + 2 * s1 * dc + s0 * dc * dc) / det
                lev[s:s + step] = np.where(bad, k0 / s0, k0 * quad)
        fit[s:s + step] = np.where(bad, ym[c] + r0 / s0, ll)
        singular[s:s + step] = bad
    return fit, singular, lev


def local_linear(x, y, at, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel local linear regression of ``y`` on ``x`` evaluated at ``at``.

    Where the local design is singular (fewer than two distinct x values carry
    weight) the local constant fit is used instead.
    """
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    ux, _, n, sy = _aggregate(x, y)
    fit, _, _ = _fit_at(ux, n, sy, at, bandwidth)
    return fit


def loocv_score(x, y, bandwidth: float) -> float:
    """Mean squared leave-one-out prediction error; inf when any fit is degenerate."""
    y = np.asarray(y, dtype=float)
    ux, inv, n, sy = _aggregate(x, y)
    fit, singular, lev = _fit_at(ux, n, sy, ux, bandwidth, leverage=True)
    if singular.any() or np.any(lev >= 1 - 1e-12) or not np.all(np.isfinite(fit)):
        return float("inf")
    resid = (y - fit[inv]) / (1 - lev[inv])
    return float(np.mean(resid * resid))


def default_bandwidths(span: float, n: int = 20) -> np.ndarray:
    return np.geomspace(span / 200, span / 2, n)


def _xy(matched):
    if isinstance(matched, MatchedDataset):
        return matched.pseudo_exposure, matched.imputed_outcome
    x, y = matched
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def select_bandwidth(matched: MatchedDataset | tuple, candidates: Sequence[float] | None = None) -> float:
    """Bandwidth minimising the LOOCV error; ties go to the smallest bandwidth."""
    x, y = _xy(matched)
    if candidates is None:
        span = float(np.ptp(x))
        if span == 0:
            raise DegenerateModelError("all pseudo-exposures are identical")
        candidates = default_bandwidths(span)
    candidates = np.sort(np.asarray(candidates, dtype=float))
    if candidates.size == 0:
        raise ParameterError("need at least one bandwidth candidate")
    if np.any(candidates <= 0):
        raise ParameterError("bandwidth candidates must be positive")
    if candidates.size == 1:
        return float(candidates[0])
    scores = np.array([loocv_score(x, y, h) for h in candidates])
    if not np.isfinite(scores).any():
        raise DegenerateModelError("every bandwidth candidate gives a degenerate fit")
    return float(candidates[int(np.argmin(scores))])


@dataclass(frozen=True, eq=False)
class ErfEstimate:
    grid: np.ndarray
    mu_hat: np.ndarray
    bandwidth: float
    se: np.ndarray | None = None
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None

    @property
    def baseline(self) -> float:
        return float(self.mu_hat[0])

    @property
    def hazard_ratio(self) -> np.ndarray:
        return hazard_ratios(self)

    def with_band(self, se, lower, upper) -> "ErfEstimate":
        return replace(self, se=np.asarray(se), ci_lower=np.asarray(lower), ci_upper=np.asarray(upper))

    def to_frame(self) -> pd.DataFrame:
        cols = {"w": self.grid, "mu_hat": self.mu_hat}
        try:
            cols["hazard_ratio"] = self.hazard_ratio
        except MedMatchError:
            cols["hazard_ratio"] = np.full(len(self.grid), np.nan)
        if self.ci_lower is not None:
            cols["ci_lower"] = self.ci_lower
            cols["ci_upper"] = self.ci_upper
        return pd.DataFrame(cols)


def smooth_erf(matched: MatchedDataset | tuple, grid_size: int = 100, bandwidth: float | None = None,
               grid: Sequence[float] | None = None,
               candidates: Sequence[float] | None = None,
               exposure_range: tuple[float, float] | None = None) -> ErfEstimate:
    """Smooth imputed outcomes against pseudo-exposures.

    The evaluation grid defaults to ``grid_size`` equally spaced points over
    the observed exposure range of the matched data's source sample.
    """
    x, y = _xy(matched)
    if len(x) < 10:
        raise InsufficientDataError(f"smoothing needs at least 10 matched rows, got {len(x)}")
    if np.ptp(x) == 0:
        raise DegenerateModelError("all pseudo-exposures are identical")
    if bandwidth is not None and not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    if grid is None:
        if exposure_range is None:
            exposure_range = (matched.data.exposure_range if isinstance(matched, MatchedDataset)
                              else (float(x.min()), float(x.max())))
        grid = np.linspace(exposure_range[0], exposure_range[1], grid_size)
    grid = np.asarray(grid, dtype=float)
    h = select_bandwidth((x, y), candidates) if bandwidth is None else float(bandwidth)
    mu = local_linear(x, y, grid, h)
    if not np.all(np.isfinite(mu)):
        raise DegenerateModelError("smoother produced non-finite values")
    return ErfEstimate(grid=grid, mu_hat=mu, bandwidth=h)


def hazard_ratios(erf: ErfEstimate) -> np.ndarray:
    base = erf.mu_hat[0]
    if base == 0:
        raise ParameterError("baseline outcome is zero; shift the baseline grid point "
                             "or the outcome scale before forming ratios")
    return erf.mu_hat / base
