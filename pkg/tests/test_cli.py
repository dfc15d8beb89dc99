import json

import pytest

from helpers import random_scenario
from tracegnn.cli import run
from tracegnn.model import predict
from tracegnn.nn import ModelConfig, init_params, save_checkpoint
from tracegnn.traces import fit_normalization, save_scenario, write_manifest

TINY_DATA = {
    "parts": [{"split": "train", "count": 2, "min_devices": 3, "max_devices": 3},
              {"split": "validation", "count": 1, "min_devices": 3, "max_devices": 3},
              {"split": "test", "count": 1, "min_devices": 4, "max_devices": 4}],
    "duration_s": 3.0,
    "capture_window_s": 1.0,
}


@pytest.fixture
def perfect(tmp_path):
    """Dataset whose labels are the model's own predictions, plus that model."""
    sc = random_scenario(4, n_devices=4)
    stats = fit_normalization([sc])
    p = init_params(1, ModelConfig(8, 8, 4))
    sc = sc.with_labels(predict(sc, p, stats, t_max=4))
    save_scenario(sc, tmp_path / "s0.json")
    write_manifest(tmp_path, {"test": ["s0.json"]})
    save_checkpoint(tmp_path / "m.ckpt", p, {"norm_stats": stats.to_dict(), "train_config": {"t_max": 4}})
    return tmp_path


def test_unknown_subcommand(capsys):
    assert run(["bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag():
    assert run(["evaluate", "--model", "x"]) == 2


def test_help_exits_zero():
    assert run(["--help"]) == 0


def test_bad_jobs():
    assert run(["generate", "--config", "c", "--out", "o", "--jobs", "0"]) == 2


def test_evaluate_perfect_fixture(perfect, capsys):
    assert run(["evaluate", "--model", str(perfect / "m.ckpt"), "--data", str(perfect)]) == 0
    out = capsys.readouterr().out
    assert "MAPE 0.00%" in out and "baseline" in out


def test_evaluate_jsonl(perfect, capsys):
    assert run(["evaluate", "--model", str(perfect / "m.ckpt"), "--data", str(perfect), "--jsonl"]) == 0
    records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert records[0] == {"scenario": "s0.json", "mape": 0.0}
    assert records[-1]["mape"] == 0.0 and records[-1]["scenarios"] == 1


def test_predict_unlabeled(perfect, tmp_path, capsys):
    sc = random_scenario(9, labeled=False)
    save_scenario(sc, tmp_path / "u.json")
    assert run(["predict", "--model", str(perfect / "m.ckpt"), "--scenario", str(tmp_path / "u.json"),
                "--jsonl"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["flow"] for r in rows] == [f.id for f in sc.flows]
    assert all(r["delay_s"] > 0 for r in rows)


def test_data_errors_exit_one(tmp_path, capsys):
    assert run(["predict", "--model", str(tmp_path / "none.ckpt"), "--scenario", "x.json"]) == 1
    assert "tracegnn:" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"parts": [], "nonsense": 1}')
    assert run(["generate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1


def test_gradcheck(capsys):
    assert run(["gradcheck", "--jsonl"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["passed"] and rec["max_rel_error"] < 1e-4


def test_pipeline_round_trip(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps(TINY_DATA))
    data, model = tmp_path / "data", tmp_path / "model"
    assert run(["generate", "--config", str(cfg), "--out", str(data), "--seed", "5"]) == 0
    assert "train      2 scenarios" in capsys.readouterr().out
    argv = ["train", "--data", str(data), "--out", str(model), "--epochs", "2", "--t-max", "4", "--jsonl"]
    assert run(argv) == 0
    first = capsys.readouterr().out
    assert run(argv) == 0
    assert capsys.readouterr().out == first  # byte-identical across invocations
    epochs = [json.loads(line) for line in first.splitlines()]
    assert [e["epoch"] for e in epochs[:2]] == [0, 1]
    assert run(["evaluate", "--model", str(model / "best.ckpt"), "--data", str(data), "--split", "all"]) == 0
    assert "no-queuing baseline MAPE" in capsys.readouterr().out
    scenario = next(p for p in sorted(data.glob("*.json")) if p.name != "manifest.json")
    assert run(["predict", "--model", str(model / "best.ckpt"), "--scenario", str(scenario)]) == 0
    assert capsys.readouterr().out.count("\n") >= 1
