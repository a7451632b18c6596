"""Generalized propensity score: Normal density around a fitted conditional mean."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import AnalyticDataset, AnalyticUnit
from .errors import DegenerateModelError, InsufficientDataError, ParameterError
from .learners import Regressor, RegressorSpec, make_regressor, regressor_from_dict

__all__ = [
    "FEATURE_SPECS",
    "GpsModel",
    "ClusterGps",
    "normal_density",
    "design_matrix",
    "fit_gps",
    "fit_method_gps",
    "gps_density",
    "gps_profile",
    "unit_mean_sigma",
]

# C + Z* + U (medmatch, adjusted); C + Z* (within); C + Z* + cluster one-hot (fixed)
FEATURE_SPECS = ("C_Zstar_U", "C_Zstar", "C_Zstar_clusters")
METHOD_FEATURES = {
    "medmatch": "C_Zstar_U",
    "adjusted": "C_Zstar_U",
    "within": "C_Zstar",
    "fixed": "C_Zstar_clusters",
}

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def normal_density(w, mean, sigma):
    """Normal density evaluated elementwise; identical code path for scalars and arrays."""
    z = (np.asarray(w, dtype=float) - mean) / sigma
    return np.exp(-0.5 * z * z) / (sigma * _SQRT_2PI)


def _feature_names(data_cov_names, kind, cluster_levels):
    names = list(data_cov_names) + ["Zstar"]
    if kind == "C_Zstar_U":
        names.append("U")
    elif kind == "C_Zstar_clusters":
        names += [f"cluster[{c}]" for c in cluster_levels]
    return names


def design_matrix(data: AnalyticDataset, kind: str, cluster_levels: Sequence[str] = ()) -> np.ndarray:
    if kind not in FEATURE_SPECS:
        raise ParameterError(f"unknown feature spec {kind!r}; expected one of {FEATURE_SPECS}")
    cols = [data.covariates, data.zstar[:, None]]
    if kind == "C_Zstar_U":
        cols.append(data.u[:, None])
    elif kind == "C_Zstar_clusters":
        levels = np.asarray(cluster_levels, dtype=str)
        cols.append((data.cluster_id[:, None] == levels[None, :]).astype(float))
    return np.hstack(cols)


def _unit_features(unit: AnalyticUnit, kind: str, cluster_levels: Sequence[str]) -> np.ndarray:
    feats = list(unit.covariates) + [unit.zstar]
    if kind == "C_Zstar_U":
        feats.append(unit.u)
    elif kind == "C_Zstar_clusters":
        feats += [1.0 if unit.cluster_id == c else 0.0 for c in cluster_levels]
    return np.asarray(feats, dtype=float)


@dataclass(frozen=True, eq=False)
class GpsModel:
    mean_model: Regressor
    sigma: float
    feature_spec: str
    feature_names: tuple[str, ...]
    cluster_levels: tuple[str, ...] = ()

    def features(self, data: AnalyticDataset) -> np.ndarray:
        return design_matrix(data, self.feature_spec, self.cluster_levels)

    def mean(self, data: AnalyticDataset) -> np.ndarray:
        return self.mean_model.predict(self.features(data))

    def density(self, w, data: AnalyticDataset) -> np.ndarray:
        return normal_density(w, self.mean(data), self.sigma)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "feature_spec": self.feature_spec,
            "feature_names": list(self.feature_names),
            "cluster_levels": list(self.cluster_levels),
            "mean_model": self.mean_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GpsModel":
        return cls(
            mean_model=regressor_from_dict(doc["mean_model"]),
            sigma=float(doc["sigma"]),
            feature_spec=doc["feature_spec"],
            feature_names=tuple(doc["feature_names"]),
            cluster_levels=tuple(doc.get("cluster_levels", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GpsModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ClusterGps:
    """One GPS model per cluster (the *within* strategy)."""

    models: dict[str, GpsModel] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_cluster": {c: m.to_dict() for c, m in self.models.items()}}


def fit_gps(data: AnalyticDataset, feature_spec: str = "C_Zstar_U",
            regressor_spec: RegressorSpec | None = None) -> GpsModel:
    """Fit E[W | features] by least squares and take sigma from the residuals."""
    regressor_spec = regressor_spec or RegressorSpec()
    if len(data) < 10:
        raise InsufficientDataError(f"GPS fit needs at least 10 units, got {len(data)}")
    levels = tuple(str(c) for c in data.clusters) if feature_spec == "C_Zstar_clusters" else ()
    X = design_matrix(data, feature_spec, levels)
    w = data.exposure
    if np.ptp(w) == 0:
        raise DegenerateModelError("exposure is constant; GPS residual variance is zero")
    model = make_regressor(regressor_spec).fit(X, w)
    resid = w - model.predict(X)
    sigma = float(np.std(resid, ddof=1))
    if not sigma > 1e-12 * max(1.0, float(np.abs(w).max())):
        raise DegenerateModelError("GPS residual variance is zero (perfect fit)")
    return GpsModel(
        mean_model=model,
        sigma=sigma,
        feature_spec=feature_spec,
        feature_names=tuple(_feature_names(data.covariate_names, feature_spec, levels)),
        cluster_levels=levels,
    )


def fit_method_gps(data: AnalyticDataset, method: str,
                   regressor_spec: RegressorSpec | None = None) -> GpsModel | ClusterGps:
    """Fit the GPS model each matching strategy expects."""
    if method not in METHOD_FEATURES:
        raise ParameterError(f"unknown method {method!r}")
    kind = METHOD_FEATURES[method]
    if method != "within":
        return fit_gps(data, kind, regressor_spec)
    models = {}
    for c in data.clusters:
        idx = np.nonzero(data.cluster_id == c)[0]
        models[str(c)] = fit_gps(data.take(idx), kind, regressor_spec)
    return ClusterGps(models)


def gps_density(model: GpsModel, w: float, features) -> float:
    mean = model.mean_model.predict(np.asarray(features, dtype=float).reshape(1, -1))[0]
    return float(normal_density(w, mean, model.sigma))


def gps_profile(model: GpsModel, unit: AnalyticUnit, pseudo_exposures) -> np.ndarray:
    """GPS of one unit at each pseudo-exposure, from a single regressor pass."""
    feats = _unit_features(unit, model.feature_spec, model.cluster_levels)
    mean = model.mean_model.predict(feats.reshape(1, -1))[0]
    return normal_density(np.asarray(pseudo_exposures, dtype=float), mean, model.sigma)


def unit_mean_sigma(gps: GpsModel | ClusterGps, data: AnalyticDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit fitted conditional mean and residual sd."""
    if isinstance(gps, GpsModel):
        return gps.mean(data), np.full(len(data), gps.sigma)
    mean = np.empty(len(data))
    sigma = np.empty(len(data))
    for c, model in gps.models.items():
        idx = np.nonzero(data.cluster_id == c)[0]
        if len(idx):
            mean[idx] = model.mean_model.predict(model.features(data)[idx])
            sigma[idx] = model.sigma
    missing = set(np.unique(data.cluster_id)) - set(gps.models)
    if missing:
        raise ParameterError(f"no GPS model for clusters {sorted(missing)}")
    return mean, sigma
