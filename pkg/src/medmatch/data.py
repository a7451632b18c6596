"""Analytic data model, CSV ingestion and cluster-support truncation."""

from __future__ import annotations

import csv

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyResultError, InputError, IntegrityError, ParameterError, SchemaError

__all__ = [
    "AnalyticUnit",
    "AnalyticDataset",
    "Schema",
    "ClusterSupport",
    "TruncationReport",
    "load_dataset",
    "cluster_support",
    "truncate_by_cluster_support",
    "trim_exposure_tails",
]


@dataclass(frozen=True)
class AnalyticUnit:
    unit_id: str
    cluster_id: str
    exposure: float
    outcome: float
    covariates: tuple[float, ...]
    zstar: float
    u: float


@dataclass(frozen=True)
class Schema:
    """Maps the pipeline's roles to column names of a CSV file."""

    unit_id: str = "unit_id"
    cluster_id: str = "cluster_id"
    exposure: str = "W"
    outcome: str = "Y"
    zstar: str = "Zstar"
    u: str = "U"
    covariates: tuple[str, ...] = ()
    block_id: str | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "Schema":
        values = dict(mapping)
        if "covariates" in values:
            values["covariates"] = tuple(values["covariates"])
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "cluster_id": self.cluster_id,
            "exposure": self.exposure,
            "outcome": self.outcome,
            "zstar": self.zstar,
            "u": self.u,
            "covariates": list(self.covariates),
            "block_id": self.block_id,
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _id_rank(ids: np.ndarray) -> np.ndarray:
    """Rank of each id; numeric ids are ordered numerically, others lexically."""
    try:
        keys = np.array([float(x) for x in ids])
        if not np.all(np.isfinite(keys)):
            raise ValueError
    except ValueError:
        keys = ids.astype(str)
    order = np.argsort(keys, kind="stable")
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


@dataclass(frozen=True, eq=False)
class AnalyticDataset:
    """Column-oriented, immutable container of analytic units.

    Arrays are stored read-only; every transformation returns a new dataset.
    ``block_id`` groups repeated observations of the same unit for the block
    bootstrap and defaults to ``unit_id``.
    """

    unit_id: np.ndarray
    cluster_id: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    zstar: np.ndarray
    u: np.ndarray
    covariate_names: tuple[str, ...]
    block_id: np.ndarray | None = None
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.unit_id)
        unit_id = np.asarray(self.unit_id).astype(str)
        cluster_id = np.asarray(self.cluster_id).astype(str)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1)
        block = unit_id if self.block_id is None else np.asarray(self.block_id).astype(str)
        arrays = {
            "exposure": np.asarray(self.exposure, dtype=float),
            "outcome": np.asarray(self.outcome, dtype=float),
            "zstar": np.asarray(self.zstar, dtype=float),
            "u": np.asarray(self.u, dtype=float),
        }
        if n < 2:
            raise InputError(f"need at least 2 units, got {n}")
        for name, a in arrays.items():
            if a.shape != (n,):
                raise InputError(f"{name} has shape {a.shape}, expected ({n},)")
        if cov.shape[0] != n or cov.shape[1] < 1:
            raise InputError(f"covariates must be ({n}, p>=1), got {cov.shape}")
        if len(self.covariate_names) != cov.shape[1]:
            raise InputError("covariate_names length does not match covariate columns")
        if cluster_id.shape != (n,) or block.shape != (n,):
            raise InputError("id arrays must have one entry per unit")
        if len(np.unique(unit_id)) != n:
            raise IntegrityError("unit ids are not unique")
        for name, a in list(arrays.items()) + [("covariates", cov)]:
            bad = ~np.isfinite(a)
            if bad.any():
                rows = np.unique(np.nonzero(bad)[0])
                raise InputError(f"non-finite {name} at rows {rows[:10].tolist()}")
        _check_u_constant(cluster_id, arrays["u"])

        set_ = object.__setattr__
        set_(self, "unit_id", _readonly(unit_id))
        set_(self, "cluster_id", _readonly(cluster_id))
        set_(self, "block_id", _readonly(block))
        set_(self, "covariates", _readonly(cov))
        set_(self, "covariate_names", tuple(self.covariate_names))
        for name, a in arrays.items():
            set_(self, name, _readonly(a))
        set_(self, "id_rank", _readonly(_id_rank(unit_id)))

    def __len__(self) -> int:
        return len(self.unit_id)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def exposure_range(self) -> tuple[float, float]:
        return float(self.exposure.min()), float(self.exposure.max())

    @property
    def clusters(self) -> np.ndarray:
        """Cluster labels in order of first appearance."""
        _, first = np.unique(self.cluster_id, return_index=True)
        return self.cluster_id[np.sort(first)]

    def unit(self, i: int) -> AnalyticUnit:
        return AnalyticUnit(
            unit_id=str(self.unit_id[i]),
            cluster_id=str(self.cluster_id[i]),
            exposure=float(self.exposure[i]),
            outcome=float(self.outcome[i]),
            covariates=tuple(float(c) for c in self.covariates[i]),
            zstar=float(self.zstar[i]),
            u=float(self.u[i]),
        )

    def units(self) -> list[AnalyticUnit]:
        return [self.unit(i) for i in range(len(self))]

    def variables(self) -> dict[str, np.ndarray]:
        """Measured variables whose balance is assessed: covariates, Z* and U."""
        out = {name: self.covariates[:, k] for k, name in enumerate(self.covariate_names)}
        out["Zstar"] = self.zstar
        out["U"] = self.u
        return out

    def take(self, index: Sequence[int] | np.ndarray, relabel: bool = False) -> "AnalyticDataset":
        """Subset (or resample) rows; ``relabel`` makes duplicated unit ids unique."""
        index = np.asarray(index, dtype=np.int64)
        unit_id = self.unit_id[index]
        if relabel:
            unit_id = np.array([f"{uid}#{k}" for k, uid in enumerate(unit_id)])
        return AnalyticDataset(
            unit_id=unit_id,
            cluster_id=self.cluster_id[index],
            exposure=self.exposure[index],
            outcome=self.outcome[index],
            covariates=self.covariates[index],
            zstar=self.zstar[index],
            u=self.u[index],
            covariate_names=self.covariate_names,
            block_id=self.block_id[index],
        )

    def replace(self, **arrays) -> "AnalyticDataset":
        fields = {
            "unit_id": self.unit_id,
            "cluster_id": self.cluster_id,
            "exposure": self.exposure,
            "outcome": self.outcome,
            "covariates": self.covariates,
            "zstar": self.zstar,
            "u": self.u,
            "covariate_names": self.covariate_names,
            "block_id": self.block_id,
        }
        fields.update(arrays)
        return AnalyticDataset(**fields)

    def to_frame(self, schema: Schema | None = None) -> pd.DataFrame:
        schema = schema or Schema(covariates=self.covariate_names)
        cols = {
            schema.unit_id: self.unit_id,
            schema.cluster_id: self.cluster_id,
            schema.exposure: self.exposure,
            schema.outcome: self.outcome,
        }
        for name, k in zip(schema.covariates, range(self.n_covariates)):
            cols[name] = self.covariates[:, k]
        cols[schema.zstar] = self.zstar
        cols[schema.u] = self.u
        if schema.block_id is not None:
            cols[schema.block_id] = self.block_id
        return pd.DataFrame(cols)


def _check_u_constant(cluster_id: np.ndarray, u: np.ndarray) -> None:
    frame = pd.DataFrame({"c": cluster_id, "u": u})
    spread = frame.groupby("c", sort=False)["u"].agg(["min", "max"])
    bad = spread.index[spread["min"] != spread["max"]]
    if len(bad):
        raise IntegrityError(f"U is not constant within cluster {bad[0]!r}")


def _parse_floats(text: np.ndarray) -> np.ndarray:
    """Correctly rounded parse; unparseable entries become NaN."""
    try:
        return np.char.strip(text).astype(float)
    except ValueError:
        out = np.empty(len(text))
        for i, v in enumerate(text):
            try:
                out[i] = float(v)
            except ValueError:
                out[i] = np.nan
        return out


def load_dataset(source: str | Path, schema: Schema | Mapping) -> AnalyticDataset:
    """Read a delimiter-separated file with a header row into a validated dataset."""
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    if not schema.covariates:
        raise SchemaError("schema must name at least one covariate column")
    path = Path(source)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    if path.stat().st_size == 0:
        raise InputError(f"{path} is empty")
    try:
        frame = pd.read_csv(path, sep=None, engine="python", dtype=str, encoding="utf-8",
                            keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise InputError(f"{path} is empty") from None
    except (csv.Error, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot parse {path}: {exc}") from None
    if frame.empty:
        raise InputError(f"{path} has no data rows")

    numeric = [schema.exposure, schema.outcome, schema.zstar, schema.u, *schema.covariates]
    required = [schema.unit_id, schema.cluster_id, *numeric]
    if schema.block_id is not None:
        required.append(schema.block_id)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")

    values = {}
    problems = []
    for col in numeric:
        parsed = _parse_floats(frame[col].to_numpy(dtype=str))
        bad = np.nonzero(~np.isfinite(parsed))[0]
        for row in bad:
            problems.append((int(row), col, frame[col].iloc[row]))
        values[col] = parsed
    if problems:
        problems.sort()
        detail = "; ".join(f"row {r} column {c!r} value {v!r}" for r, c, v in problems[:20])
        raise InputError(f"{len(problems)} non-finite or unparseable value(s): {detail}")

    return AnalyticDataset(
        unit_id=frame[schema.unit_id].to_numpy(),
        cluster_id=frame[schema.cluster_id].to_numpy(),
        exposure=values[schema.exposure],
        outcome=values[schema.outcome],
        covariates=np.column_stack([values[c] for c in schema.covariates]),
        zstar=values[schema.zstar],
        u=values[schema.u],
        covariate_names=tuple(schema.covariates),
        block_id=None if schema.block_id is None else frame[schema.block_id].to_numpy(),
    )


@dataclass(frozen=True)
class ClusterSupport:
    intervals: dict[str, tuple[float, float]]
    resolution: float


def cluster_support(data: AnalyticDataset) -> ClusterSupport:
    """Empirical exposure support [min, max] of each cluster."""
    frame = pd.DataFrame({"c": data.cluster_id, "w": data.exposure})
    agg = frame.groupby("c", sort=False)["w"].agg(["min", "max"])
    intervals = {str(c): (float(r["min"]), float(r["max"])) for c, r in agg.iterrows()}
    w = np.unique(data.exposure)
    resolution = float(np.min(np.diff(w))) if len(w) > 1 else 1.0
    return ClusterSupport(intervals=intervals, resolution=resolution)


@dataclass(frozen=True)
class TruncationReport:
    retained_interval: tuple[float, float]
    dropped: int
    kept: int

    def to_dict(self) -> dict:
        return {"retained_interval": list(self.retained_interval), "dropped": self.dropped,
                "kept": self.kept}


def _covered_intervals(intervals: Sequence[tuple[float, float]], k: int) -> list[tuple[float, float]]:
    """Maximal closed intervals where at least ``k`` of the given intervals overlap."""
    lo = np.array([a for a, _ in intervals])
    hi = np.array([b for _, b in intervals])
    points = np.unique(np.concatenate([lo, hi]))
    # coverage at each endpoint and at each gap midpoint, interleaved
    probes = np.empty(2 * len(points) - 1)
    probes[0::2] = points
    probes[1::2] = (points[:-1] + points[1:]) / 2
    cover = ((lo[None, :] <= probes[:, None]) & (probes[:, None] <= hi[None, :])).sum(axis=1)
    found = []
    start = None
    for i, ok in enumerate(cover >= k):
        if ok and start is None:
            start = i
        if not ok and start is not None:
            found.append((probes[start], probes[i - 1]))
            start = None
    if start is not None:
        found.append((probes[start], probes[-1]))
    return [(float(a), float(b)) for a, b in found]


def truncate_by_cluster_support(data: AnalyticDataset, k: int) -> tuple[AnalyticDataset, TruncationReport]:
    """Keep units inside the exposure range where at least ``k`` clusters are represented.

    A cluster represents exposure ``w`` when ``w`` lies within the cluster's
    observed [min, max]. If several disjoint ranges qualify, the one holding
    the most units wins (earliest on ties).
    """
    support = cluster_support(data)
    n_clusters = len(support.intervals)
    if not 1 <= k <= n_clusters:
        raise ParameterError(f"k must lie in [1, {n_clusters}], got {k}")
    candidates = _covered_intervals(list(support.intervals.values()), k)
    if not candidates:
        raise EmptyResultError(f"no exposure value is covered by {k} clusters")
    w = data.exposure
    counts = [int(np.count_nonzero((w >= a) & (w <= b))) for a, b in candidates]
    lo, hi = candidates[int(np.argmax(counts))]
    keep = np.nonzero((w >= lo) & (w <= hi))[0]
    report = TruncationReport(retained_interval=(lo, hi), dropped=len(data) - len(keep), kept=len(keep))
    if len(keep) == len(data):
        return data, report
    return data.take(keep), report


def trim_exposure_tails(data: AnalyticDataset, fraction: float) -> tuple[AnalyticDataset, np.ndarray]:
    """Drop units whose exposure lies outside the [fraction, 1 - fraction] sample quantiles.

    Returns the trimmed dataset and the kept row indices.
    """
    if not 0.0 <= fraction < 0.5:
        raise ParameterError(f"trim fraction must lie in [0, 0.5), got {fraction}")
    if fraction == 0.0:
        return data, np.arange(len(data))
    lo, hi = np.quantile(data.exposure, [fraction, 1.0 - fraction])
    keep = np.nonzero((data.exposure >= lo) & (data.exposure <= hi))[0]
    return data.take(keep), keep
