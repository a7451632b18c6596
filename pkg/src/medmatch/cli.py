"""Command-line front end: simulate | fit | tune | match | diagnose | truncate.

Every command accepts ``--config FILE`` (a JSON object whose keys mirror the
long flag names, with dashes or underscores) and writes the fully resolved
configuration to ``resolved-config.json`` in its output directory. Flags given
on the command line override the file.

Exit codes: 0 success, 2 usage error, 3 data error, 4 balance gate failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .data import Schema, load_dataset, trim_exposure_tails, truncate_by_cluster_support
from .diagnostics import (
    balance_gate,
    balance_report,
    effective_sample_size,
    ks_statistic,
    match_report,
    pearson_abs,
    tune,
    TuningGrid,
)
from .erf import smooth_erf
from .errors import InputError, MedMatchError, ParameterError
from .gps import fit_method_gps
from .inference import BootstrapSpec, block_bootstrap_band
from .learners import RegressorSpec
from .matching import METHODS, MatchSpec, build_grid, match_all
from .simulation import SimScenario, StudyConfig, generate, run_study

log = logging.getLogger("medmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GATE = 0, 2, 3, 4

_SCHEMA_KEYS = ("unit_id", "cluster_id", "exposure", "outcome", "zstar", "u", "covariates",
                "block_id")

_LEARNER = {"learner": "gbm", "n_rounds": 100, "max_depth": 2, "learning_rate": 0.1,
            "subsample": 1.0, "min_samples_leaf": 5}

_MATCHING = {"method": "medmatch", "metric": "l1", "caliper": "half"}

_TUNING = {"criterion": "ac_plus_ks", "deltas": None, "weights": None}

DEFAULTS = {
    "simulate": {"scenario": 1, "n": 2000, "beta_z": 1.0, "beta_wz": 1.0, "replicates": 10,
                 "methods": list(METHODS), "tune": True, "delta": 0.3, "weight": 0.5,
                 "delta_fractions": None, "trim": 0.05, "grid_points": 50,
                 "export_data": None, **_TUNING, **_LEARNER},
    "fit": {"input": None, "trim": 0.0, "truncate_k": None, "tune": True, "delta": None,
            "weight": None, "bandwidth": None, "grid_size": 100, "bootstrap": 200,
            "bootstrap_m": None, "level": 0.95, "threshold": 0.1, "write_matched": True,
            **_MATCHING, **_TUNING, **_LEARNER},
    "tune": {"input": None, "trim": 0.0, "truncate_k": None, **_MATCHING, **_TUNING,
             **_LEARNER},
    "match": {"input": None, "trim": 0.0, "truncate_k": None, "delta": None, "weight": 0.5,
              **_MATCHING, **_LEARNER},
    "diagnose": {"input": None, "matched": None},
    "truncate": {"input": None, "k": None},
}
_COMMON = {"out": "out", "seed": 0, "threads": None, "verbose": False}
_DATA_COMMANDS = ("fit", "tune", "match", "diagnose", "truncate")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser, data: bool) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of parameters (flags override it)")
    p.add_argument("--out", default=S, help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S,
                   help="worker processes for bootstrap and simulation (default: CPU count)")
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    if data:
        p.add_argument("--input", default=S, help="CSV or other delimited file with a header")
        g = p.add_argument_group("column mapping")
        g.add_argument("--unit-id", dest="unit_id", default=S)
        g.add_argument("--cluster-id", dest="cluster_id", default=S)
        g.add_argument("--exposure", default=S)
        g.add_argument("--outcome", default=S)
        g.add_argument("--zstar", default=S)
        g.add_argument("--u", default=S)
        g.add_argument("--covariates", type=_names, default=S,
                       help="comma-separated; default: every column not mapped to a role")
        g.add_argument("--block-id", dest="block_id", default=S)


def _add_learner(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("GPS learner")
    g.add_argument("--learner", choices=("gbm", "linear"), default=S)
    g.add_argument("--n-rounds", dest="n_rounds", type=int, default=S)
    g.add_argument("--max-depth", dest="max_depth", type=int, default=S)
    g.add_argument("--learning-rate", dest="learning_rate", type=float, default=S)
    g.add_argument("--subsample", type=float, default=S)
    g.add_argument("--min-samples-leaf", dest="min_samples_leaf", type=int, default=S)


def _add_matching(p: argparse.ArgumentParser, fixed: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--method", choices=METHODS, default=S)
    p.add_argument("--metric", choices=("l1", "l2"), default=S)
    p.add_argument("--caliper", choices=("half", "full"), default=S)
    if fixed:
        p.add_argument("--delta", type=float, default=S, help="caliper width")
        p.add_argument("--tau", "--lambda", "--weight", dest="weight", type=float, default=S,
                       help="GPS weight in the matching distance")


def _add_tuning(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--criterion", choices=("ac_plus_ks", "ac_only"), default=S)
    p.add_argument("--deltas", type=_floats, default=S, help="comma-separated caliper grid")
    p.add_argument("--weights", type=_floats, default=S, help="comma-separated weight grid")


def _add_preprocess(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--trim", type=float, default=S,
                   help="drop this fraction of units from each exposure tail")
    p.add_argument("--truncate-k", dest="truncate_k", type=int, default=S,
                   help="keep the exposure range covered by at least k clusters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medmatch",
                                     description="GPS matching for clustered data with surrogates")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("simulate", help="run a simulation study")
    _add_common(p, data=False)
    p.add_argument("--scenario", type=int, choices=(1, 2, 3, 4), default=S)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--beta-z", dest="beta_z", type=float, default=S)
    p.add_argument("--beta-wz", dest="beta_wz", type=float, default=S)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--methods", type=_names, default=S)
    p.add_argument("--no-tune", dest="tune", action="store_false", default=S)
    p.add_argument("--delta", type=float, default=S)
    p.add_argument("--tau", "--lambda", "--weight", dest="weight", type=float, default=S)
    p.add_argument("--delta-fractions", dest="delta_fractions", type=_floats, default=S,
                   help="caliper grid as fractions of each replicate's exposure range")
    p.add_argument("--trim", type=float, default=S)
    p.add_argument("--grid-points", dest="grid_points", type=int, default=S)
    p.add_argument("--export-data", dest="export_data", default=S,
                   help="also write one simulated dataset (seeded by --seed) to this CSV")
    _add_tuning(p)
    _add_learner(p)

    p = sub.add_parser("fit", help="truncate, tune, match, diagnose, smooth and bootstrap")
    _add_common(p, data=True)
    _add_preprocess(p)
    _add_matching(p)
    _add_tuning(p)
    p.add_argument("--tune", dest="tune", action="store_true", default=S)
    p.add_argument("--no-tune", dest="tune", action="store_false", default=S)
    p.add_argument("--bandwidth", type=float, default=S)
    p.add_argument("--grid-size", dest="grid_size", type=int, default=S)
    p.add_argument("--bootstrap", type=int, default=S, help="replicates (0 disables the band)")
    p.add_argument("--bootstrap-m", dest="bootstrap_m", type=int, default=S)
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--threshold", type=float, default=S, help="balance gate on mean AC")
    p.add_argument("--no-matched", dest="write_matched", action="store_false", default=S)
    _add_learner(p)

    p = sub.add_parser("tune", help="grid search over caliper and weight")
    _add_common(p, data=True)
    _add_preprocess(p)
    _add_matching(p, fixed=False)
    _add_tuning(p)
    _add_learner(p)

    p = sub.add_parser("match", help="match with fixed hyperparameters")
    _add_common(p, data=True)
    _add_preprocess(p)
    _add_matching(p)
    _add_learner(p)

    p = sub.add_parser("diagnose", help="balance diagnostics for a matched file")
    _add_common(p, data=True)
    p.add_argument("--matched", default=S, help="matched CSV written by fit or match")

    p = sub.add_parser("truncate", help="restrict to the range covered by k clusters")
    _add_common(p, data=True)
    p.add_argument("--k", type=int, default=S)
    return parser


def resolve_config(command: str, given: dict, file_values: dict) -> dict:
    """defaults < config file < flags."""
    allowed = {**_COMMON, **DEFAULTS[command]}
    if command in _DATA_COMMANDS:
        allowed.update({k: None for k in _SCHEMA_KEYS})
        allowed["schema"] = None
    cfg = {**_COMMON, **DEFAULTS[command]}
    file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
    unknown = sorted(set(file_values) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config keys for {command!r}: {unknown}")
    schema = dict(file_values.pop("schema", None) or {})
    cfg.update(file_values)
    cfg.update(given)
    if command in _DATA_COMMANDS:
        for key in _SCHEMA_KEYS:
            if key in cfg:
                schema[key] = cfg.pop(key)
        cfg["schema"] = schema
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    return cfg


def _schema_for(path: str, mapping: dict) -> Schema:
    mapping = {k: v for k, v in mapping.items() if v is not None}
    schema = Schema.from_mapping(mapping)
    if not schema.covariates:
        if not Path(path).exists():
            raise InputError(f"no such file: {path}")
        try:
            header = pd.read_csv(path, sep=None, engine="python", nrows=0,
                                 encoding="utf-8").columns
        except (csv.Error, pd.errors.ParserError, pd.errors.EmptyDataError,
                UnicodeDecodeError) as exc:
            raise InputError(f"cannot read the header of {path}: {exc}") from None
        roles = {schema.unit_id, schema.cluster_id, schema.exposure, schema.outcome,
                 schema.zstar, schema.u, schema.block_id}
        schema = Schema.from_mapping({**mapping, "covariates": [c for c in header
                                                               if c not in roles]})
    return schema


def _load(cfg: dict):
    if not cfg.get("input"):
        raise UsageError("--input is required")
    schema = _schema_for(cfg["input"], cfg["schema"])
    cfg["schema"] = schema.to_dict()
    return load_dataset(cfg["input"], schema)


def _preprocess(data, cfg: dict) -> tuple:
    info = {"n_input": len(data)}
    if cfg.get("trim"):
        data, _ = trim_exposure_tails(data, float(cfg["trim"]))
        info["trimmed_to"] = len(data)
    if cfg.get("truncate_k") is not None:
        data, report = truncate_by_cluster_support(data, int(cfg["truncate_k"]))
        info["truncation"] = report.to_dict()
    info["n_analysed"] = len(data)
    return data, info


def _regressor(cfg: dict) -> RegressorSpec:
    return RegressorSpec(kind=cfg["learner"], n_rounds=int(cfg["n_rounds"]),
                         max_depth=int(cfg["max_depth"]),
                         learning_rate=float(cfg["learning_rate"]),
                         subsample=float(cfg["subsample"]),
                         min_samples_leaf=int(cfg["min_samples_leaf"]), seed=int(cfg["seed"]))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n",
                    encoding="utf-8")


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def _tune_or_fix(data, gps, cfg: dict) -> TuningGrid:
    if cfg.get("tune", True):
        return tune(data, gps, cfg["method"], cfg.get("deltas"), cfg.get("weights"),
                    cfg["criterion"], cfg["metric"], cfg["caliper"])
    if cfg.get("delta") is None:
        raise UsageError("--no-tune needs --delta (and optionally --tau/--lambda)")
    weight = 0.5 if cfg.get("weight") is None else cfg["weight"]
    return TuningGrid.fixed_point(cfg["method"], float(cfg["delta"]), float(weight))


def cmd_simulate(cfg: dict, out: Path) -> int:
    scenario = SimScenario(int(cfg["scenario"]), n=int(cfg["n"]), beta_z=float(cfg["beta_z"]),
                           beta_wz=float(cfg["beta_wz"]), seed=int(cfg["seed"]))
    if cfg.get("export_data"):
        sim, _ = generate(scenario)
        # the latent confounder is not exported: it would pass for a covariate
        frame = sim.dataset.to_frame()
        _write_csv(Path(cfg["export_data"]), frame)
    study = StudyConfig(
        methods=tuple(cfg["methods"]), replicates=int(cfg["replicates"]),
        criterion=cfg["criterion"],
        deltas=None if cfg.get("deltas") is None else tuple(cfg["deltas"]),
        delta_fractions=None if cfg.get("delta_fractions") is None
        else tuple(cfg["delta_fractions"]),
        weights=None if cfg.get("weights") is None else tuple(cfg["weights"]),
        tune=bool(cfg["tune"]), delta=float(cfg["delta"]), weight=float(cfg["weight"]),
        regressor=_regressor(cfg), grid_points=int(cfg["grid_points"]), seed=int(cfg["seed"]),
        workers=int(cfg["threads"]), trim=float(cfg["trim"]))
    log.info("scenario %d: %d replicates of %s", scenario.scenario_id, study.replicates,
             ",".join(study.methods))
    report = run_study(scenario, study)
    _write_json(out / "simulation.json", report.to_dict())
    _write_csv(out / "simulation.csv", report.to_long_frame())
    return EXIT_OK


def cmd_fit(cfg: dict, out: Path) -> int:
    data, prep = _preprocess(_load(cfg), cfg)
    regressor = _regressor(cfg)
    gps = fit_method_gps(data, cfg["method"], regressor)
    grid = _tune_or_fix(data, gps, cfg)
    delta, weight = grid.selected
    _write_json(out / "tuning.json", grid.to_dict())
    spec = MatchSpec(cfg["method"], delta, weight, cfg["metric"], cfg["caliper"])
    matched = match_all(data, gps, build_grid(data, delta), spec)
    report = balance_report(matched)
    balance = {**report.to_dict(), "threshold": float(cfg["threshold"]),
               "passed": balance_gate(report, float(cfg["threshold"])),
               "match": match_report(matched), "preprocessing": prep}
    _write_json(out / "balance.json", balance)
    if cfg["write_matched"]:
        _write_csv(out / "matched.csv", matched.to_frame())

    erf = smooth_erf(matched, grid_size=int(cfg["grid_size"]), bandwidth=cfg.get("bandwidth"))
    if int(cfg["bootstrap"]) > 0:
        bspec = BootstrapSpec(replicates=int(cfg["bootstrap"]), m=cfg.get("bootstrap_m"),
                              level=float(cfg["level"]), seed=int(cfg["seed"]))
        band = block_bootstrap_band(data, erf, spec, bspec, regressor, gps,
                                    workers=int(cfg["threads"]))
        erf = erf.with_band(band.se, band.ci_lower, band.ci_upper)
        _write_json(out / "bootstrap.json", band.log())
    frame = erf.to_frame()
    for col in ("ci_lower", "ci_upper"):
        if col not in frame:
            frame[col] = np.nan
    _write_csv(out / "erf.csv", frame)

    if not balance["passed"]:
        log.error("balance gate failed: mean AC %.4f >= %.4f", report.mean_ac, cfg["threshold"])
        return EXIT_GATE
    return EXIT_OK


def cmd_tune(cfg: dict, out: Path) -> int:
    data, _ = _preprocess(_load(cfg), cfg)
    gps = fit_method_gps(data, cfg["method"], _regressor(cfg))
    grid = tune(data, gps, cfg["method"], cfg.get("deltas"), cfg.get("weights"),
                cfg["criterion"], cfg["metric"], cfg["caliper"])
    _write_json(out / "tuning.json", grid.to_dict())
    return EXIT_OK


def cmd_match(cfg: dict, out: Path) -> int:
    data, prep = _preprocess(_load(cfg), cfg)
    if cfg.get("delta") is None:
        raise UsageError("match needs --delta")
    gps = fit_method_gps(data, cfg["method"], _regressor(cfg))
    spec = MatchSpec(cfg["method"], float(cfg["delta"]), float(cfg["weight"]), cfg["metric"],
                     cfg["caliper"])
    matched = match_all(data, gps, build_grid(data, spec.delta), spec)
    _write_csv(out / "matched.csv", matched.to_frame())
    _write_json(out / "match-report.json", {**match_report(matched), "preprocessing": prep})
    return EXIT_OK


def diagnose_frames(data, matched: pd.DataFrame) -> dict:
    """Balance of a matched table (as written by ``fit``/``match``) against its source data."""
    needed = {"pseudo_exposure", "match_id"}
    if not needed <= set(matched.columns):
        raise InputError(f"matched file lacks columns {sorted(needed - set(matched.columns))}")
    position = {str(uid): i for i, uid in enumerate(data.unit_id)}
    ids = matched["match_id"].astype(str).to_numpy()
    missing = sorted({uid for uid in ids if uid not in position})
    if missing:
        raise InputError(f"matched units absent from the original data: {missing[:10]}")
    idx = np.array([position[uid] for uid in ids], dtype=np.int64)
    px = pd.to_numeric(matched["pseudo_exposure"], errors="coerce").to_numpy(dtype=float)
    if not np.all(np.isfinite(px)):
        raise InputError("matched file has non-finite pseudo_exposure values")
    ac, ks = {}, {}
    for name, values in data.variables().items():
        ac[name] = pearson_abs(px, values[idx])
        ks[name] = ks_statistic(values, values[idx])
    counts = np.bincount(idx, minlength=len(data))
    return {"ac": ac, "ks": ks, "mean_ac": float(np.mean(list(ac.values()))),
            "mean_ks": float(np.mean(list(ks.values()))), "ess": effective_sample_size(counts),
            "n_units": len(data), "n_rows": int(len(idx))}


def cmd_diagnose(cfg: dict, out: Path) -> int:
    data = _load(cfg)
    if not cfg.get("matched"):
        raise UsageError("diagnose needs --matched")
    path = Path(cfg["matched"])
    if not path.exists():
        raise InputError(f"no such file: {path}")
    matched = pd.read_csv(path, dtype={"match_id": str, "target_id": str})
    _write_json(out / "balance.json", diagnose_frames(data, matched))
    return EXIT_OK


def cmd_truncate(cfg: dict, out: Path) -> int:
    data = _load(cfg)
    if cfg.get("k") is None:
        raise UsageError("truncate needs --k")
    kept, report = truncate_by_cluster_support(data, int(cfg["k"]))
    _write_csv(out / "truncated.csv", kept.to_frame(Schema.from_mapping(cfg["schema"])))
    _write_json(out / "truncation.json", report.to_dict())
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "tune": cmd_tune, "match": cmd_match,
            "diagnose": cmd_diagnose, "truncate": cmd_truncate}


def _jsonable(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    logging.basicConfig(level=logging.INFO if given.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        file_values = {}
        if getattr(args, "config", None):
            try:
                file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from None
            if not isinstance(file_values, dict):
                raise UsageError("config file must hold a JSON object")
        cfg = resolve_config(args.command, given, file_values)
        if args.command == "simulate" and int(cfg["scenario"]) not in (1, 2, 3, 4):
            raise UsageError(f"scenario must be one of {{1, 2, 3, 4}}, got {cfg['scenario']}")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        try:
            return COMMANDS[args.command](cfg, out)
        finally:
            _write_json(out / "resolved-config.json", {"command": args.command, **_jsonable(cfg)})
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"medmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"medmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MedMatchError as exc:
        print(f"medmatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
