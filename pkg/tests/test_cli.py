import csv
import json

import pytest

from vvlab.cli import main

TRAIN = {"episodes": 2, "pretrain_steps": 60, "batch_size": 16, "buffer_size": 200, "hidden": [8, 8]}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"network": "bus5", "days": 4, "train": TRAIN, "conformal": {"lags": 6}}))
    data = root / "data"
    assert main(["generate-data", "--config", str(cfg), "--seed", "5", "--out", str(data)]) == 0
    assert main(["fit-conformal", "--config", str(cfg), "--seed", "5", "--data", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "5", "--data", str(data), "--out", str(root / "m")]) == 0
    return root, cfg, data


def test_pipeline_artifacts(pipeline):
    root, cfg, data = pipeline
    for name in ("truth.csv", "forecast.csv", "manifest.json", "intervals.csv", "resolved_config.json"):
        assert (data / name).exists()
    for name in ("actor.vvnn", "critic.vvnn", "model.json", "train_log.csv", "resolved_config.json"):
        assert (root / "m" / name).exists()
    resolved = json.loads((root / "m" / "resolved_config.json").read_text())
    assert resolved["seed"] == 5 and resolved["train"]["episodes"] == 2


def test_evaluate_report(pipeline):
    root, cfg, data = pipeline
    out = root / "rep"
    assert main(["evaluate", "--config", str(cfg), "--data", str(data), "--model", str(root / "m"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    with open(out / "eval_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert report["steps"] == len(rows) == 96  # 4 days, floor(0.7 * 4) = 2 train days
    assert report["vvr"] == sum(int(r["violations"]) for r in rows) / (len(rows) * report["n_bus"])


def test_oracle_compare(pipeline):
    root, cfg, data = pipeline
    out = root / "cmp.csv"
    assert main(["oracle-compare", "--config", str(cfg), "--data", str(data), "--model", str(root / "m"),
                 "--out", str(out), "--taps=-1:1", "--q-levels", "3", "--max-steps", "4"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["timestep", "oracle_objective", "agent_objective", "gap", "robust_oracle_objective"]
    assert len(rows) == 4
    for r in rows:
        assert float(r["gap"]) == pytest.approx(float(r["agent_objective"]) - float(r["oracle_objective"]))


def test_train_byte_identical(pipeline):
    root, cfg, data = pipeline
    assert main(["train", "--config", str(cfg), "--seed", "5", "--data", str(data), "--out", str(root / "m2")]) == 0
    for name in ("actor.vvnn", "critic.vvnn", "model.json", "train_log.csv"):
        assert (root / "m" / name).read_bytes() == (root / "m2" / name).read_bytes()


def test_seed_from_environment(pipeline, monkeypatch):
    root, cfg, data = pipeline
    monkeypatch.setenv("VVLAB_SEED", "5")
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "m3")]) == 0
    assert (root / "m" / "actor.vvnn").read_bytes() == (root / "m3" / "actor.vvnn").read_bytes()
    # explicit flag wins over the environment
    assert main(["train", "--config", str(cfg), "--seed", "6", "--data", str(data), "--out", str(root / "m4")]) == 0
    assert json.loads((root / "m4" / "resolved_config.json").read_text())["seed"] == 6


def test_model_layout_mismatch(pipeline, tmp_path):
    root, cfg, data = pipeline
    assert main(["evaluate", "--config", str(cfg), "--zero-width", "--data", str(data), "--model",
                 str(root / "m"), "--out", str(tmp_path)]) == 0  # same layout, just collapsed bounds
    other = tmp_path / "d13"
    assert main(["generate-data", "--network", "bus13", "--days", "3", "--seed", "1", "--out", str(other)]) == 0
    assert main(["fit-conformal", "--network", "bus13", "--seed", "1", "--data", str(other)]) == 0
    assert main(["evaluate", "--network", "bus13", "--data", str(other), "--model", str(root / "m"),
                 "--out", str(tmp_path / "x")]) == 1


def test_powerflow_zero_injection(tmp_path, capsys):
    inj = tmp_path / "zero.csv"
    inj.write_text("bus_id,p_kw,q_kvar\n")
    assert main(["powerflow", "--network", "fixtures/bus5.json", "--injections", str(inj)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "bus_id,vm_pu,va_deg"
    assert [line.split(",")[1] for line in out[1:]] == ["1.0"] * 5


def test_powerflow_to_file_with_tap(tmp_path):
    inj = tmp_path / "inj.csv"
    inj.write_text("bus_id,p_kw,q_kvar\n3,-200,-50\n")
    out = tmp_path / "o" / "v.csv"
    assert main(["powerflow", "--network", "bus5", "--injections", str(inj), "--tap", "16", "--caps", "1,0",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert float(rows[0]["vm_pu"]) == pytest.approx(1.1)
    assert (out.parent / "resolved_config.json").exists()


def test_powerflow_divergence_is_runtime_failure(tmp_path):
    inj = tmp_path / "inj.csv"
    inj.write_text("bus_id,p_kw,q_kvar\n4,-90000,0\n")
    assert main(["powerflow", "--network", "bus5", "--injections", str(inj)]) == 2


@pytest.mark.parametrize("argv,flag", [
    (["train", "--network", "bus5", "--seed", "1", "--out", "x"], "--data"),
    (["generate-data", "--network", "bus5", "--out", "x"], "--seed"),
    (["generate-data", "--seed", "1", "--out", "x"], "--network"),
    (["powerflow", "--network", "bus5"], "--injections"),
])
def test_missing_required_flag(argv, flag, capsys, monkeypatch):
    monkeypatch.delenv("VVLAB_SEED", raising=False)
    assert main(argv) == 1
    assert flag in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope"], [], ["powerflow", "--tap", "x"]])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_help_exits_zero():
    assert main(["train", "--help"]) == 0


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"network": "bus5", "colour": 1}')
    assert main(["generate-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path)]) == 1
    cfg.write_text('{"network": "bus5",\n "days": }')
    assert main(["generate-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path)]) == 1
    cfg.write_text('{"network": "bus5", "train": {"gamma": 2}}')
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", str(tmp_path), "--out", "m"]) == 1
    assert "gamma" in capsys.readouterr().err


def test_bad_network(tmp_path):
    assert main(["generate-data", "--network", str(tmp_path / "none.json"), "--seed", "1",
                 "--out", str(tmp_path)]) == 1
