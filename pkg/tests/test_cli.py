import json
import time

import numpy as np
import pytest

from contractify.certificates import LyapunovFn, load_json, save_json
from contractify.cli import main

QUICK_TRAIN = {"rho_c": 0.6, "eps": 0.05, "hidden": [8], "epochs": 3, "batch": 64,
               "max_rounds": 3, "pgd_steps": 5, "schedule": [0.5, 1.0]}


def write_config(tmp_path, name="run.json", **sections):
    cfg = {"system": {"name": "linear", "params": {"a": 0.5}},
           "metric": {"source": "identity"},
           "train": QUICK_TRAIN,
           "roa": {"metric": "identity", "tol_frac": 0.05, "samples": 20000},
           "grid": {"metric": "identity", "resolution": 16},
           "output_dir": "out"}
    cfg.update(sections)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_missing_config_is_usage_error(tmp_path, capsys):
    path = tmp_path / "nope.json"
    assert main(["verify", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(tmp_path):
    assert main(["frobnicate", "--config", "x.json"]) == 2
    assert main(["verify"]) == 2


def test_verify_before_synth_names_missing_file(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["verify", "--config", str(path)]) == 2
    assert "lyapunov.json" in capsys.readouterr().err


def test_unstable_map_synthesis_fails(tmp_path, capsys):
    path = write_config(tmp_path, system={"name": "linear", "params": {"a": 2.0}})
    assert main(["synth-lyap", "--config", str(path)]) == 1
    assert "not Schur stable" in capsys.readouterr().out


def test_half_map_pipeline(tmp_path):
    path = write_config(tmp_path)
    assert main(["synth-lyap", "--config", str(path), "--quiet"]) == 0
    t0 = time.perf_counter()
    assert main(["verify", "--config", str(path), "--quiet"]) == 0
    assert time.perf_counter() - t0 < 1.0
    cert = load_json(tmp_path / "out" / "contraction.json")
    assert cert["status"] == "Verified"
    assert cert["run_config"]["system"]["params"]["a"] == 0.5

    assert main(["roa", "--config", str(path), "--quiet"]) == 0
    roa = load_json(tmp_path / "out" / "roa_identity.json")
    assert roa["ratio"] == pytest.approx(1.0)

    assert main(["grid", "--config", str(path), "--quiet"]) == 0
    raw = (tmp_path / "out" / "grid.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    assert set(raw[len(b"P5\n16 16\n255\n"):]) == {255}
    rows = (tmp_path / "out" / "grid.csv").read_text().splitlines()
    assert rows[0] == "x1,x2,minG" and len(rows) == 257


def test_identity_map_is_falsified(tmp_path, capsys):
    path = write_config(tmp_path, system={"name": "linear", "params": {"a": 1.0, "name": "identity"}},
                        lyapunov={"none": True}, train={"rho_c": 0.9, "eps": 0.05})
    assert main(["synth-lyap", "--config", str(path)]) == 0
    capsys.readouterr()
    assert main(["verify", "--config", str(path)]) == 1
    assert "witness" in capsys.readouterr().out
    cert = load_json(tmp_path / "out" / "contraction.json")
    assert cert["status"] == "Falsified" and cert["witness"] is not None
    assert main(["grid", "--config", str(path), "--quiet"]) == 0
    raw = (tmp_path / "out" / "grid.pgm").read_bytes()
    assert set(raw[len(b"P5\n16 16\n255\n"):]) == {128}


def test_empty_region_of_attraction(tmp_path):
    lyap = tmp_path / "v.json"
    save_json(lyap, LyapunovFn.quadratic(np.eye(2), 0.0, 0.01).to_json())
    path = write_config(tmp_path, lyapunov={"file": "v.json"})
    assert main(["synth-lyap", "--config", str(path), "--quiet"]) == 1
    assert main(["roa", "--config", str(path), "--quiet"]) == 1
    rep = load_json(tmp_path / "out" / "roa_identity.json")
    assert rep["ratio"] is None


def test_training_is_byte_identical_under_a_seed(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        d.mkdir()
        path = write_config(d)
        assert main(["synth-lyap", "--config", str(path), "--quiet"]) == 0
        assert main(["train", "--config", str(path), "--seed", "4", "--threads", "1", "--quiet"]) == 0
        outs.append((d / "out" / "metric.json").read_bytes())
        assert (d / "out" / "train_log.csv").is_file()
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["header"]["train"]["seed"] == 4


def test_report_lists_pending_rows(tmp_path):
    path = write_config(tmp_path)
    assert main(["report", "--config", str(path), "--quiet"]) == 0
    text = (tmp_path / "out" / "report.md").read_text()
    assert "| linear | - | NN | pending | pending | - |" in text
    assert "| linear | - | constant | pending | pending | - |" in text
    assert main(["report", "--config", str(path), "--quiet"]) == 0
    assert (tmp_path / "out" / "report.md").read_text() == text


def test_overrides_reach_the_budget(tmp_path):
    from contractify.pipeline import RunConfig

    cfg = RunConfig.load(write_config(tmp_path), seed=7, threads=2, budget_boxes=10, time_limit=3.0)
    b = cfg.budget()
    assert (b.seed, b.threads, b.max_boxes, b.time_limit) == (7, 2, 10, 3.0)
    assert cfg.train_config().seed == 7


def test_tiny_budget_gives_unknown_exit(tmp_path):
    path = write_config(tmp_path, system={"name": "vdp"}, metric={"source": "constant"},
                        train={"rho_c": 0.99, "eps": 0.05}, lyapunov={"kappa_frac": 0.9})
    assert main(["synth-lyap", "--config", str(path), "--quiet"]) == 0
    code = main(["verify", "--config", str(path), "--quiet", "--budget-boxes", "4"])
    assert code == 3
    assert load_json(tmp_path / "out" / "contraction.json")["status"] == "Unknown"
