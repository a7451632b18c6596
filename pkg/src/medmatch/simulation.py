"""Clustered synthetic data with an unmeasured confounder and rank-preserving surrogates.

Data-generating process (all constants in :class:`DgpConfig`)::

    U_g  equally spaced on [-1, 1] over the G clusters
    C1..C4 ~ N(0, 1),  C5 ~ Uniform(-1, 1)
    Z | g  ~ N(U_g, z_sd^2)                      (unmeasured)
    Z*     = U_g + Phi(Z - U_g)                  (strictly increasing in Z within a cluster)
    W      = 1 + 0.5 (C1 + C2) - 0.3 C3 + 1.5 Z + N(0, 1)
    Y      = 0.1 W^3 - 0.5 W^2 + W + bZ Z + bWZ W Z + 0.5 (C1 - C4) + N(0, 1)

so the true ERF is mu(w) = 0.1 w^3 - 0.5 w^2 + w + (bZ + bWZ w) E[Z] with
E[Z] the size-weighted mean of U_g.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .data import AnalyticDataset, AnalyticUnit, trim_exposure_tails
from .diagnostics import balance_report, tune
from .erf import smooth_erf
from .errors import MedMatchError, ParameterError, StudyError
from .gps import fit_method_gps
from .learners import RegressorSpec
from .matching import METHODS, MatchSpec, build_grid, match_all

__all__ = [
    "DgpConfig",
    "SimScenario",
    "SimulatedUnit",
    "SimulatedData",
    "TrueErfOracle",
    "scenario_sizes",
    "generate",
    "true_erf",
    "evaluation_grid",
    "score",
    "StudyConfig",
    "MethodSummary",
    "SimReport",
    "run_study",
]

COVARIATES = ("C1", "C2", "C3", "C4", "C5")

# Scenario 3 sizes, smallest to largest U; min 14, max 422, total 2000
_SCENARIO3 = (14, 30, 60, 100, 150, 200, 272, 330, 422, 422)


def _ramp_sizes(lo: int, hi: int, g: int, total: int) -> list[int]:
    raw = np.linspace(lo, hi, g)
    sizes = np.floor(raw).astype(int)
    sizes[0], sizes[-1] = lo, hi
    short = total - sizes.sum()
    # hand out the remainder by largest fractional part, never touching the endpoints
    frac = raw - np.floor(raw)
    frac[[0, -1]] = -1
    for i in np.argsort(-frac, kind="stable")[:short]:
        sizes[i] += 1
    return sizes.tolist()


def scenario_sizes(scenario_id: int, n: int = 2000) -> list[int]:
    if scenario_id == 1:
        g = 10
    elif scenario_id == 2:
        g = 50
    elif scenario_id == 3:
        if n != 2000:
            raise ParameterError("scenario 3 is defined for N=2000")
        return list(_SCENARIO3)
    elif scenario_id == 4:
        if n != 2000:
            raise ParameterError("scenario 4 is defined for N=2000")
        return _ramp_sizes(13, 67, 50, 2000)
    else:
        raise ParameterError(f"scenario must be one of 1, 2, 3, 4; got {scenario_id}")
    if n % g:
        raise ParameterError(f"N={n} does not split into {g} equal clusters")
    return [n // g] * g


@dataclass(frozen=True)
class DgpConfig:
    z_sd: float = 0.5
    w_intercept: float = 1.0
    w_c12: float = 0.5
    w_c3: float = -0.3
    w_z: float = 1.5
    w_sd: float = 1.0
    y_c: float = 0.5
    y_sd: float = 1.0


@dataclass(frozen=True)
class SimScenario:
    scenario_id: int = 1
    n: int = 2000
    beta_z: float = 0.0
    beta_wz: float = 0.0
    seed: int = 0
    dgp: DgpConfig = field(default_factory=DgpConfig)

    @property
    def sizes(self) -> list[int]:
        return scenario_sizes(self.scenario_id, self.n)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def u_levels(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_clusters)


@dataclass(frozen=True)
class SimulatedUnit(AnalyticUnit):
    z: float = 0.0


@dataclass(frozen=True)
class TrueErfOracle:
    beta_z: float
    beta_wz: float
    mean_z: float
    sizes: tuple[int, ...] = ()
    u_levels: tuple[float, ...] = ()
    dgp: DgpConfig = field(default_factory=DgpConfig)
    support: tuple[float, float] | None = None

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        return 0.1 * w**3 - 0.5 * w**2 + w + self.beta_z * self.mean_z + self.beta_wz * w * self.mean_z

    def monte_carlo(self, w: float, n_draws: int, rng: np.random.Generator) -> tuple[float, float]:
        """Mean and standard error of simulated counterfactual outcomes Y(w)."""
        p = np.asarray(self.sizes, dtype=float)
        g = rng.choice(len(p), size=n_draws, p=p / p.sum())
        u = np.asarray(self.u_levels)[g]
        z = rng.normal(u, self.dgp.z_sd)
        c1 = rng.normal(size=n_draws)
        c4 = rng.normal(size=n_draws)
        y = (0.1 * w**3 - 0.5 * w**2 + w + self.beta_z * z + self.beta_wz * w * z
             + self.dgp.y_c * (c1 - c4) + rng.normal(0.0, self.dgp.y_sd, n_draws))
        return float(y.mean()), float(y.std(ddof=1) / math.sqrt(n_draws))


def true_erf(oracle: TrueErfOracle, w):
    out = oracle(w)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: AnalyticDataset
    z: np.ndarray

    def unit(self, i: int) -> SimulatedUnit:
        base = self.dataset.unit(i)
        return SimulatedUnit(**asdict(base), z=float(self.z[i]))


def _draw(scenario: SimScenario, rng: np.random.Generator):
    cfg = scenario.dgp
    sizes = np.asarray(scenario.sizes)
    if sizes.sum() != scenario.n or np.any(sizes < 1):
        raise ParameterError(f"cluster sizes {sizes.tolist()} do not sum to N={scenario.n}")
    n = scenario.n
    g = np.repeat(np.arange(len(sizes)), sizes)
    u = scenario.u_levels[g]
    c = rng.normal(size=(n, 5))
    c[:, 4] = rng.uniform(-1.0, 1.0, n)
    z = rng.normal(u, cfg.z_sd)
    zstar = u + ndtr(z - u)
    w = (cfg.w_intercept + cfg.w_c12 * (c[:, 0] + c[:, 1]) + cfg.w_c3 * c[:, 2] + cfg.w_z * z
         + rng.normal(0.0, cfg.w_sd, n))
    y = (0.1 * w**3 - 0.5 * w**2 + w + scenario.beta_z * z + scenario.beta_wz * w * z
         + cfg.y_c * (c[:, 0] - c[:, 3]) + rng.normal(0.0, cfg.y_sd, n))
    return g, u, c, z, zstar, w, y


def generate(scenario: SimScenario) -> tuple[SimulatedData, TrueErfOracle]:
    rng = np.random.default_rng(scenario.seed)
    g, u, c, z, zstar, w, y = _draw(scenario, rng)
    data = AnalyticDataset(
        unit_id=np.arange(scenario.n),
        cluster_id=np.array([f"g{k:02d}" for k in g]),
        exposure=w,
        outcome=y,
        covariates=c,
        zstar=zstar,
        u=u,
        covariate_names=COVARIATES,
    )
    sizes = np.asarray(scenario.sizes, dtype=float)
    oracle = TrueErfOracle(
        beta_z=scenario.beta_z,
        beta_wz=scenario.beta_wz,
        mean_z=float(np.dot(sizes, scenario.u_levels) / sizes.sum()),
        sizes=tuple(int(s) for s in scenario.sizes),
        u_levels=tuple(float(v) for v in scenario.u_levels),
        dgp=scenario.dgp,
    )
    return SimulatedData(dataset=data, z=z), oracle


def evaluation_grid(scenario: SimScenario, n_points: int = 50, coverage: float = 0.9,
                    reference_draws: int = 100) -> np.ndarray:
    """Equally spaced points over the central ``coverage`` of the exposure distribution.

    Quantiles come from a fixed reference sample so every replicate and
    method shares the grid.
    """
    rng = np.random.default_rng(20240101)
    ref = np.concatenate([_draw(scenario, rng)[5] for _ in range(reference_draws)])
    tail = (1 - coverage) / 2
    lo, hi = np.quantile(ref, [tail, 1 - tail])
    return np.linspace(lo, hi, n_points)


def score(estimates: Sequence[np.ndarray], oracle: TrueErfOracle, grid) -> tuple[float, float]:
    """Absolute bias and RMSE of ERF estimates on ``grid``, averaged over grid points."""
    grid = np.asarray(grid, dtype=float)
    est = np.vstack([np.asarray(e.mu_hat if hasattr(e, "mu_hat") else e, dtype=float)
                     for e in estimates])
    if est.shape[1] != len(grid):
        raise ParameterError("estimates and grid have different lengths")
    if not np.all(np.isfinite(grid)):
        raise ParameterError("evaluation grid has non-finite points")
    if oracle.support is not None:
        lo, hi = oracle.support
        if grid.min() < lo or grid.max() > hi:
            raise ParameterError(f"evaluation grid leaves the oracle support [{lo:.3f}, {hi:.3f}]")
    err = est - oracle(grid)[None, :]
    ab = float(np.mean(np.abs(err.mean(axis=0))))
    rmse = float(np.mean(np.sqrt((err**2).mean(axis=0))))
    return ab, rmse


@dataclass(frozen=True)
class StudyConfig:
    methods: tuple[str, ...] = METHODS
    replicates: int = 10
    criterion: str = "ac_plus_ks"
    deltas: tuple[float, ...] | None = None
    delta_fractions: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    tune: bool = True
    delta: float = 0.3
    weight: float = 0.5
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    grid_points: int = 50
    seed: int = 0
    workers: int = 1
    max_failed: float = 0.1
    trim: float = 0.05

    def __post_init__(self):
        if self.deltas is not None and self.delta_fractions is not None:
            raise ParameterError("give either deltas or delta_fractions, not both")
        if self.criterion not in ("ac_plus_ks", "ac_only"):
            raise ParameterError(f"unknown tuning criterion {self.criterion!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out


@dataclass
class MethodSummary:
    method: str
    errors: np.ndarray
    ks: dict[str, list[float]]
    ac: dict[str, list[float]]
    ess: list[float]
    selected: list[tuple[float, float]]
    failed: int
    ab: float = float("nan")
    rmse: float = float("nan")

    @property
    def mean_ks(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.ks.items()}

    @property
    def mean_ac(self) -> list[float]:
        """Per-replicate average AC over the measured variables (C, Z*, U)."""
        measured = [k for k in self.ac if k != "Z"]
        return [float(np.mean([self.ac[k][r] for k in measured])) for r in range(len(self.ess))]

    def bias_se(self) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise bias and its Monte Carlo standard error."""
        r = len(self.errors)
        return self.errors.mean(axis=0), self.errors.std(axis=0, ddof=1) / math.sqrt(max(r, 1))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ab": self.ab,
            "rmse": self.rmse,
            "replicates": int(len(self.errors)),
            "failed": self.failed,
            "mean_ks": self.mean_ks,
            "mean_ac": self.mean_ac,
            "ess": self.ess,
            "selected": [list(s) for s in self.selected],
        }


@dataclass
class SimReport:
    scenario: SimScenario
    config: StudyConfig
    grid: np.ndarray
    methods: dict[str, MethodSummary]

    def to_dict(self) -> dict:
        sc = self.scenario
        return {
            "scenario": sc.scenario_id,
            "n": sc.n,
            "beta_z": sc.beta_z,
            "beta_wz": sc.beta_wz,
            "sizes": sc.sizes,
            "config": self.config.to_dict(),
            "grid": [float(x) for x in self.grid],
            "methods": {m: s.to_dict() for m, s in self.methods.items()},
        }

    def to_long_frame(self) -> pd.DataFrame:
        sc = self.scenario
        rows = []

        def add(method, metric, value):
            rows.append({"scenario": sc.scenario_id, "method": method, "beta_z": sc.beta_z,
                         "beta_wz": sc.beta_wz, "metric": metric, "value": value})

        for m, s in self.methods.items():
            add(m, "AB", s.ab)
            add(m, "RMSE", s.rmse)
            for var, v in s.mean_ks.items():
                add(m, f"KS_{var}", v)
            for r, e in enumerate(s.ess):
                add(m, f"ESS_rep{r}", e)
        return pd.DataFrame(rows)


def _one_replicate(args):
    scenario, config, grid = args
    sim, _ = generate(scenario)
    # sparse exposure tails are trimmed before the GPS fit
    data, keep = trim_exposure_tails(sim.dataset, config.trim)
    z = sim.z[keep]
    out = {}
    for method in config.methods:
        try:
            gps = fit_method_gps(data, method, config.regressor)
            if config.tune:
                deltas = config.deltas
                if config.delta_fractions is not None:
                    # fractions of this replicate's exposure range
                    lo, hi = data.exposure_range
                    deltas = [f * (hi - lo) for f in config.delta_fractions]
                tg = tune(data, gps, method, deltas, config.weights, config.criterion)
                delta, weight = tg.selected
            else:
                delta, weight = config.delta, config.weight
            spec = MatchSpec(method=method, delta=delta, weight=weight)
            matched = match_all(data, gps, build_grid(data, delta), spec)
            report = balance_report(matched, extra={"Z": z})
            erf = smooth_erf(matched, grid=grid)
        except MedMatchError as exc:
            out[method] = exc
            continue
        out[method] = {"mu_hat": erf.mu_hat, "ks": report.ks, "ac": report.ac, "ess": report.ess,
                       "selected": (float(delta), float(weight))}
    return out


def run_study(scenario: SimScenario, config: StudyConfig | None = None) -> SimReport:
    """Repeat generate -> (tune) -> match -> smooth -> score for each method."""
    config = config or StudyConfig()
    if config.replicates < 1:
        raise ParameterError("need at least one replicate")
    for m in config.methods:
        if m not in METHODS:
            raise ParameterError(f"unknown method {m!r}")
    grid = evaluation_grid(scenario, config.grid_points)
    oracle = generate(SimScenario(scenario.scenario_id, scenario.n, scenario.beta_z,
                                  scenario.beta_wz, 0, scenario.dgp))[1]
    seeds = np.random.SeedSequence([config.seed, scenario.seed]).generate_state(config.replicates)
    jobs = [(SimScenario(scenario.scenario_id, scenario.n, scenario.beta_z, scenario.beta_wz,
                         int(s), scenario.dgp), config, grid) for s in seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_one_replicate, jobs))
    else:
        results = [_one_replicate(j) for j in jobs]

    summaries = {}
    for method in config.methods:
        ok = [r[method] for r in results if not isinstance(r[method], Exception)]
        failed = len(results) - len(ok)
        if failed > config.max_failed * len(results) or not ok:
            raise StudyError(f"{failed} of {len(results)} replicates failed for {method!r}")
        errors = np.vstack([r["mu_hat"] for r in ok]) - oracle(grid)[None, :]
        s = MethodSummary(
            method=method,
            errors=errors,
            ks={k: [r["ks"][k] for r in ok] for k in ok[0]["ks"]},
            ac={k: [r["ac"][k] for r in ok] for k in ok[0]["ac"]},
            ess=[r["ess"] for r in ok],
            selected=[r["selected"] for r in ok],
            failed=failed,
        )
        s.ab, s.rmse = score([r["mu_hat"] for r in ok], oracle, grid)
        summaries[method] = s
    return SimReport(scenario=scenario, config=config, grid=grid, methods=summaries)
