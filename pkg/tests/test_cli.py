import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fslaw import __version__
from fslaw.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_RESOURCE, config_hash, run
from fslaw.curve_fit import AnsatzParams, LossCurve, ansatz_eval, save_loss_curve
from fslaw.schedules import MultiStep

TASK = {"s": 1, "beta": 2, "M": 32, "N": 32, "sigma": 1}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sidecar(path):
    return json.loads(path.with_name(path.name + ".meta.json").read_text())


def test_simulate_outputs_and_determinism(tmp_path):
    cfg = write(tmp_path / "c.json", {"task": TASK, "schedule": {"kind": "constant", "eta": 0.05, "K": 1000},
                                      "runs": 1, "record_every": 100})
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "trajectory.csv")
    assert len(rows) == 10 and list(rows[0]) == ["step", "lr", "mean_risk", "stderr"]
    meta = sidecar(tmp_path / "a" / "trajectory.csv")
    assert meta["config_hash"] == config_hash(json.loads(cfg.read_text()))
    assert meta["version"] == __version__ and meta["diverged"] == 0 and meta["wall_time_s"] >= 0


def test_seed_flag_overrides(tmp_path):
    cfg = write(tmp_path / "c.json", {"task": TASK, "schedule": {"kind": "constant", "eta": 0.05, "K": 50},
                                      "runs": 2})
    run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1", "--threads", "1"])
    run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert sidecar(tmp_path / "a" / "trajectory.csv")["seed"] == 1


def test_config_errors(tmp_path, capsys):
    bad = write(tmp_path / "bad.json", {"task": {**TASK, "colour": 1}, "schedule": {"kind": "constant", "eta": 1}})
    assert run(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "task.colour" in capsys.readouterr().err
    bad = write(tmp_path / "bad2.json", {"task": {**TASK, "M": 64}, "schedule": {"kind": "constant", "eta": 1, "K": 5}})
    assert run(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_resource_and_numeric_exit_codes(tmp_path):
    big = write(tmp_path / "big.json", {"task": TASK, "schedule": {"kind": "constant", "eta": 0.1, "K": 10},
                                        "max_work": 1})
    assert run(["simulate", "--config", str(big), "--out", str(tmp_path)]) == EXIT_RESOURCE
    div = write(tmp_path / "div.json", {"task": TASK, "schedule": {"kind": "constant", "eta": 5, "K": 100},
                                        "runs": 2})
    assert run(["simulate", "--config", str(div), "--out", str(tmp_path / "d")]) == EXIT_NUMERIC
    assert sidecar(tmp_path / "d" / "trajectory.csv")["diverged"] == 2


def test_predict_fsl_and_zero_rate(tmp_path):
    cfg = write(tmp_path / "p.json", {"task": TASK, "schedule": {"kind": "cosine", "eta_max": 0.1, "K": 200},
                                      "record_every": 20})
    assert run(["predict", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "prediction.csv")
    assert len(rows) == 10
    for r in rows:
        parts = float(r["full_batch"]) + float(r["noise"]) + float(r["approx"])
        assert float(r["pred_risk"]) == pytest.approx(parts, rel=1e-15)
    zero = write(tmp_path / "z.json", {"task": TASK, "schedule": {"kind": "tabulated", "values": [0.0] * 10,
                                                                  "initial": 0.0}})
    assert run(["predict", "--config", str(zero), "--out", str(tmp_path / "z")]) == EXIT_OK
    assert all(float(r["noise"]) == 0.0 for r in read_csv(tmp_path / "z" / "prediction.csv"))


def test_predict_sweep_slope(tmp_path):
    cfg = write(tmp_path / "s.json", {"task": {"s": 1, "beta": 2, "M": 128, "N": 128, "sigma": 3},
                                      "sweep": {"kind": "constant", "D": [2**p for p in range(10, 17)]}})
    assert run(["predict", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    slope = json.loads((tmp_path / "slope.json").read_text())
    assert slope["slope"] == pytest.approx(-0.5, abs=0.05)
    assert slope["theory_exponent"] == -0.5
    assert (tmp_path / "slope.json.meta.json").exists()


def make_curve(tmp_path):
    p = AnsatzParams(L0=2.0, c1=0.8, c2=0.0, c3=0.5, c4=0.3, c5=2.0, s=0.6, beta_eff=1.5, gamma_exp=0.7)
    sch = MultiStep.eight_one_one(0.1, 1000)
    k = np.arange(1, 1001)
    noise = np.exp(0.002 * np.random.default_rng(0).standard_normal(1000))
    save_loss_curve(LossCurve(k, sch.rates(), ansatz_eval(p, sch, k) * noise), tmp_path / "curve.csv")
    return tmp_path / "curve.csv"


def test_fit_then_optimize_round_trip(tmp_path):
    curve = make_curve(tmp_path)
    cfg = write(tmp_path / "f.json", {"curve": str(curve), "options": {"steps": 1500}})
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "fit.json").read_text())
    assert rep["r2_log"] >= 0.99
    overlay = read_csv(tmp_path / "overlay.csv")
    assert len(overlay) == 1000 and set(overlay[0]) == {"step", "lr", "loss", "predicted"}

    opt = write(tmp_path / "o.json", {"fit": str(tmp_path / "fit.json"), "K": 100, "eta0": 0.1,
                                      "iterations": 300, "rates": [1e-5]})
    assert run(["optimize", "--config", str(opt), "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "optimize.json").read_text())
    rows = read_csv(tmp_path / "schedule.csv")
    assert rows[0]["step"] == "0" and float(rows[0]["lr"]) == 0.1 and len(rows) == 101
    lrs = np.array([float(r["lr"]) for r in rows])
    assert np.all(np.diff(lrs) <= 0) and np.all(lrs >= 0)
    trace = read_csv(tmp_path / "trace.csv")
    assert len(trace) == 301

    pred = write(tmp_path / "pa.json", {"mode": "ansatz", "fit": str(tmp_path / "fit.json"),
                                        "schedule": {"kind": "tabulated", "path": str(tmp_path / "schedule.csv")}})
    assert run(["predict", "--config", str(pred), "--out", str(tmp_path / "pa")]) == EXIT_OK
    last = read_csv(tmp_path / "pa" / "prediction.csv")[-1]
    assert float(last["loss"]) == pytest.approx(summary["objective"], rel=1e-10)


def test_fit_consumes_simulator_output(tmp_path):
    sim = write(tmp_path / "s.json", {"task": TASK, "schedule": {"kind": "eight_one_one", "eta_max": 0.1,
                                                                 "K": 400}, "runs": 10})
    assert run(["simulate", "--config", str(sim), "--out", str(tmp_path)]) == EXIT_OK
    cfg = write(tmp_path / "f.json", {"curve": str(tmp_path / "trajectory.csv"), "warmup_trim": 20,
                                      "options": {"steps": 300}})
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert np.isfinite(json.loads((tmp_path / "fit.json").read_text())["r2_log"])


def test_fit_missing_column(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("step,loss\n1,2.0\n")
    cfg = write(tmp_path / "f.json", {"curve": str(tmp_path / "bad.csv")})
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "lr" in capsys.readouterr().err


def test_table1_command(tmp_path):
    cfg = write(tmp_path / "t.json", {"s_values": [1.0, 0.3], "beta_values": [2.0, 5.0]})
    assert run(["table1", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    rows = {(r["s"], r["beta"]): r for r in read_csv(tmp_path / "table1.csv")}
    assert float(rows[("1.0", "2.0")]["constant_data_exp"]) == -0.5
    hard = rows[("0.3", "5.0")]
    assert hard["regime"] == "Hard"
    assert float(hard["exp_decay_data_exp"]) == pytest.approx(-0.3)
    assert float(hard["exp_decay_data_log"]) == pytest.approx(0.3)
    assert sum(k.endswith("_exp") for k in hard) == 6


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path / "t.json", {"s_values": [1.0], "beta_values": [2.0]})
    out = subprocess.run(
        [sys.executable, "-m", "fslaw", "table1", "--config", str(cfg), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "table1.csv.meta.json").exists()
