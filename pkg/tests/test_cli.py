import csv
import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from crossed_eb.cli import main
from crossed_eb.model import ObservationTable, write_observation_table


@pytest.fixture(autouse=True)
def _reset_logging():
    # main() calls basicConfig; keep handlers from leaking between tests
    yield
    for h in list(logging.root.handlers):
        logging.root.removeHandler(h)


@pytest.fixture
def data_csv(tmp_path):
    assert main(["generate", "--seed", "5", "--out", str(tmp_path / "gen"),
                 "--config", _cfg(tmp_path, {"gen": {"m": 30, "t": 10, "n": 3}})]) == 0
    return tmp_path / "gen" / "data.csv"


def _cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_writes_outputs_and_converges(tmp_path, data_csv):
    out = tmp_path / "fit"
    assert main(["fit", str(data_csv), "--out", str(out)]) == 0
    vc = json.loads((out / "vc.json").read_text())
    assert vc["converged"] and vc["sigma_eps_sq"] > 0
    trace = _rows(out / "trace.csv")
    assert len(trace) == vc["iterations"] + 1
    post = _rows(out / "posterior.csv")
    assert len(post) == 2 + 30 * 2 + 10 * 2


def test_fit_engines_agree(tmp_path, data_csv):
    res = {}
    for e in ("naive", "streamlined"):
        assert main(["fit", str(data_csv), "--engine", e, "--out", str(tmp_path / e)]) == 0
        res[e] = json.loads((tmp_path / e / "vc.json").read_text())
    for k, v in res["naive"].items():
        if isinstance(v, float):
            assert res["streamlined"][k] == pytest.approx(v, rel=1e-7, abs=1e-12)


def test_fit_max_iter_exit_code(tmp_path, data_csv):
    cfg = _cfg(tmp_path, {"max_iter": 2, "tol": 1e-12})
    assert main(["fit", str(data_csv), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_fit_missing_reward_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("user,time,replicate,action,x1\n1,1,1,0,0.5\n")
    assert main(["fit", str(p), "--out", str(tmp_path / "o")]) == 1


def test_fit_bad_row_reports_input_error(tmp_path, caplog):
    p = tmp_path / "bad.csv"
    p.write_text("user,time,replicate,action,reward,x1\n1,1,1,0,0.1,0.5\n0,1,1,0,0.2,0.5\n")
    with caplog.at_level(logging.ERROR):
        assert main(["fit", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "row" in caplog.text


def test_fit_prior_only(tmp_path):
    p = tmp_path / "empty.csv"
    write_observation_table(p, ObservationTable(np.zeros(0, int), np.zeros(0, int),
                                                np.zeros(0, int), np.zeros(0, int),
                                                np.zeros(0), np.zeros((0, 1))))
    out = tmp_path / "o"
    assert main(["fit", str(p), "--out", str(out)]) == 0
    vc = json.loads((out / "vc.json").read_text())
    assert vc["sigma_eps_sq"] == 1.0 and vc["Sigma_u"] == [[1.0, 0.0], [0.0, 1.0]]
    assert len(_rows(out / "trace.csv")) == 1


def test_unknown_config_key(tmp_path, data_csv):
    cfg = _cfg(tmp_path, {"nonsense": 1})
    assert main(["fit", str(data_csv), "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_config_round_trip(tmp_path, data_csv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", str(data_csv), "--engine", "naive", "--out", str(a)]) == 0
    assert main(["fit", "--config", str(a / "config.json"), "--out", str(b)]) == 0
    assert (a / "vc.json").read_text() == (b / "vc.json").read_text()
    assert json.loads((b / "config.json").read_text())["engine"] == "naive"


def test_bench_row_counts(tmp_path):
    cfg = _cfg(tmp_path, {"sizes": [5], "reps": 3, "gen": {"t": 5, "n": 2}})
    out = tmp_path / "b"
    assert main(["bench", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
    assert len(_rows(out / "timings.csv")) == 3 * 2
    assert len(_rows(out / "timing_summary.csv")) == 2


def test_bench_default_reps(tmp_path):
    cfg = _cfg(tmp_path, {"sizes": [3], "gen": {"t": 3, "n": 1}, "max_iter": 3})
    out = tmp_path / "b"
    assert main(["bench", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
    assert len(_rows(out / "timings.csv")) == 50 * 2


def test_compare_passes(tmp_path):
    out = tmp_path / "c"
    assert main(["compare", "--out", str(out), "--seed", "1"]) == 0
    rows = _rows(out / "compare.csv")
    assert len(rows) == 20 and all(r["ok"] == "1" for r in rows)


def test_simulate_is_reproducible(tmp_path):
    cfg = _cfg(tmp_path, {"reps": 2, "trial": {"n_users": 4, "n_weeks": 2, "days_per_week": 2,
                                              "decisions_per_day": 2, "cohort_size": 2}})
    for d in ("s1", "s2"):
        assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / d),
                     "--workers", "1"]) == 0
    a = (tmp_path / "s1" / "regret.csv").read_bytes()
    assert a == (tmp_path / "s2" / "regret.csv").read_bytes()
    assert len(_rows(tmp_path / "s1" / "regret.csv")) == 2 * 2


def test_workers_must_be_positive(tmp_path):
    assert main(["compare", "--workers", "0", "--out", str(tmp_path)]) == 1


def test_module_entry_point_and_debug_env(tmp_path, data_csv):
    env = {"CROSSED_EB_DEBUG": "1", "PATH": "/usr/bin:/bin"}
    r = subprocess.run([sys.executable, "-m", "crossed_eb", "fit", str(data_csv), "--out",
                        str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert r.returncode == 0
    assert "DEBUG" in r.stderr
