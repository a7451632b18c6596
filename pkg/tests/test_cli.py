import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from medmatch.cli import main, resolve_config

from conftest import make_dataset

FIXTURE = Path(__file__).parent / "fixtures" / "scenario1_n300.csv"
QUICK = ["--n-rounds", "20", "--threads", "1"]


def fit(tmp_path, *extra, name="out"):
    out = tmp_path / name
    code = main(["fit", "--input", str(FIXTURE), "--out", str(out), "--seed", "3",
                 "--bootstrap", "10", *QUICK, *extra])
    return code, out


def read(path):
    return json.loads(Path(path).read_text())


class TestFit:
    def test_outputs(self, tmp_path):
        code, out = fit(tmp_path, "--method", "medmatch", "--tune")
        assert code in (0, 4)
        for name in ("erf.csv", "balance.json", "matched.csv", "tuning.json",
                     "resolved-config.json", "bootstrap.json"):
            assert (out / name).exists(), name
        erf = pd.read_csv(out / "erf.csv")
        assert list(erf.columns) == ["w", "mu_hat", "hazard_ratio", "ci_lower", "ci_upper"]
        assert erf["hazard_ratio"].iloc[0] == 1.0
        assert np.all(erf["ci_lower"] <= erf["mu_hat"]) and np.all(erf["mu_hat"] <= erf["ci_upper"])
        balance = read(out / "balance.json")
        assert balance["passed"] == (balance["mean_ac"] < 0.1)
        assert code == (0 if balance["passed"] else 4)
        assert read(out / "resolved-config.json")["method"] == "medmatch"

    def test_fixed_hyperparameters(self, tmp_path):
        code, out = fit(tmp_path, "--delta", "0.38", "--tau", "0.6", "--no-tune")
        assert code in (0, 4)
        tuning = read(out / "tuning.json")
        assert tuning["selected"] == {"delta": 0.38, "weight": 0.6}
        assert tuning["fixed"] is True

    def test_no_tune_needs_delta(self, tmp_path):
        code, _ = fit(tmp_path, "--no-tune")
        assert code == 2

    def test_deterministic(self, tmp_path):
        args = ("--deltas", "0.3,0.6", "--weights", "0,0.5,1")
        _, a = fit(tmp_path, *args, name="a")
        _, b = fit(tmp_path, *args, name="b")
        for name in ("erf.csv", "balance.json", "matched.csv", "tuning.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_gate_failure_still_writes_report(self, tmp_path):
        code, out = fit(tmp_path, "--delta", "0.5", "--no-tune", "--threshold", "0.0",
                        "--bootstrap", "0", "--no-matched")
        assert code == 4
        assert read(out / "balance.json")["passed"] is False
        assert not (out / "matched.csv").exists()
        assert pd.read_csv(out / "erf.csv")["ci_lower"].isna().all()

    def test_within_single_cluster(self, tmp_path):
        data = make_dataset(seed=1, n=60, n_clusters=1)
        path = tmp_path / "one.csv"
        data.to_frame().to_csv(path, index=False)
        outs = {}
        for method in ("within", "adjusted"):
            out = tmp_path / method
            code = main(["fit", "--input", str(path), "--out", str(out), "--method", method,
                         "--delta", "0.8", "--no-tune", "--bootstrap", "0", *QUICK])
            assert code in (0, 4)
            outs[method] = pd.read_csv(out / "matched.csv")
        pd.testing.assert_series_equal(outs["within"]["match_id"], outs["adjusted"]["match_id"])

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"method": "fixed", "delta": 0.5, "tune": False,
                                   "bootstrap": 0, "n_rounds": 20, "threads": 1}))
        out = tmp_path / "o"
        code = main(["fit", "--config", str(cfg), "--input", str(FIXTURE), "--out", str(out),
                     "--method", "adjusted"])
        assert code in (0, 4)
        resolved = read(out / "resolved-config.json")
        assert resolved["method"] == "adjusted" and resolved["delta"] == 0.5

    def test_diagnose_reproduces_fit_balance(self, tmp_path):
        _, out = fit(tmp_path, "--delta", "0.5", "--no-tune", "--bootstrap", "0")
        diag = tmp_path / "diag"
        assert main(["diagnose", "--input", str(FIXTURE), "--matched", str(out / "matched.csv"),
                     "--out", str(diag)]) == 0
        a, b = read(out / "balance.json"), read(diag / "balance.json")
        assert a["ac"] == pytest.approx(b["ac"], abs=1e-12)
        assert a["ks"] == pytest.approx(b["ks"], abs=1e-12)
        assert a["ess"] == pytest.approx(b["ess"])


class TestOtherCommands:
    def test_simulate_shape_and_determinism(self, tmp_path):
        args = ["simulate", "--scenario", "3", "--replicates", "2", "--methods", "medmatch,adjusted",
                "--seed", "7", "--no-tune", "--delta", "0.4", *QUICK]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        doc = read(tmp_path / "a" / "simulation.json")
        assert set(doc["methods"]) == {"medmatch", "adjusted"}
        assert all(m["replicates"] == 2 for m in doc["methods"].values())
        for name in ("simulation.json", "simulation.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_scenario(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--scenario", "9", "--out", str(tmp_path)])
        assert exc.value.code == 2
        assert "1, 2, 3, 4" in capsys.readouterr().err

    def test_tune_and_match(self, tmp_path):
        assert main(["tune", "--input", str(FIXTURE), "--out", str(tmp_path / "t"),
                     "--deltas", "0.4,0.8", "--weights", "0.5", *QUICK]) == 0
        assert read(tmp_path / "t" / "tuning.json")["selected"]["weight"] == 0.5
        assert main(["match", "--input", str(FIXTURE), "--out", str(tmp_path / "m"),
                     "--delta", "0.5", *QUICK]) == 0
        report = read(tmp_path / "m" / "match-report.json")
        assert report["rows"] == len(pd.read_csv(tmp_path / "m" / "matched.csv"))

    def test_truncate(self, tmp_path):
        assert main(["truncate", "--input", str(FIXTURE), "--k", "10",
                     "--out", str(tmp_path)]) == 0
        report = read(tmp_path / "truncation.json")
        kept = pd.read_csv(tmp_path / "truncated.csv")
        assert len(kept) == report["kept"] == 300 - report["dropped"]
        lo, hi = report["retained_interval"]
        assert kept["W"].between(lo, hi).all()


class TestExitCodes:
    def test_missing_input_file(self, tmp_path):
        assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 3

    def test_missing_input_flag(self, tmp_path):
        assert main(["match", "--out", str(tmp_path), "--delta", "1"]) == 2

    def test_bad_data(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("unit_id,cluster_id,W,Y,C1,Zstar,U\na,A,1,2,0,0.5,1\nb,A,x,3,1,0.6,1\n")
        assert main(["match", "--input", str(bad), "--delta", "1", "--out", str(tmp_path)]) == 3

    def test_bad_parameter(self, tmp_path):
        assert main(["match", "--input", str(FIXTURE), "--delta", "-1",
                     "--out", str(tmp_path), *QUICK]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"colour": "red"}')
        assert main(["truncate", "--config", str(cfg), "--input", str(FIXTURE), "--k", "2",
                     "--out", str(tmp_path)]) == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "medmatch", "truncate", "--input",
                               str(FIXTURE), "--k", "3", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


def test_resolve_precedence():
    cfg = resolve_config("match", {"delta": 2.0}, {"delta": 1.0, "weight": 0.2,
                                                     "schema": {"exposure": "pm"}})
    assert cfg["delta"] == 2.0 and cfg["weight"] == 0.2
    assert cfg["schema"] == {"exposure": "pm"}
    assert cfg["threads"] >= 1
