import json
import subprocess
import sys

import pytest

from rpdro.cli import main
from rpdro.data import load_jsonl


@pytest.fixture
def data(tmp_path):
    train, valid = tmp_path / "train.jsonl", tmp_path / "valid.jsonl"
    assert main(["gen", "--kind", "spurious", "--n", "96", "--seed", "1", "--out", str(train)]) == 0
    assert main(["gen", "--kind", "spurious", "--n", "48", "--bias-rate", "0.5", "--seed", "2",
                 "--out", str(valid)]) == 0
    return train, valid


def train_args(train, valid, out, *extra):
    return ["train", "--train", str(train), "--valid", str(valid), "--epochs", "2", "--batch-size", "16",
            "--ckpt-interval", "4", "--out", str(out), *extra]


def test_gen_and_noise(tmp_path):
    toy = tmp_path / "toy.jsonl"
    assert main(["gen", "--kind", "toy2domain", "--n", "500", "--minority-frac", "0.1", "--out", str(toy)]) == 0
    ds = load_jsonl(toy)
    assert len(ds) == 500 and ds.metadata["minority_frac"] == 0.1
    noisy = tmp_path / "noisy.jsonl"
    assert main(["noise", "--in", str(toy), "--p", "0.5", "--seed", "3", "--out", str(noisy)]) == 0
    assert load_jsonl(noisy).metadata["p_noise"] == 0.5


def test_train_select_eval(tmp_path, data):
    train, valid = data
    out = tmp_path / "run"
    assert main(train_args(train, valid, out, "--method", "rpdro", "--adversary", "mlp-4")) == 0
    ckpts = sorted((out / "checkpoints").glob("step_*.json"))
    assert [p.name for p in ckpts] == [f"step_{s:08d}.json" for s in (4, 8, 12)]
    assert (out / "steps.csv").read_text().startswith("step,epoch,strategy,")
    assert json.loads((out / "config.json").read_text())["epochs"] == 2

    report = tmp_path / "sel.json"
    assert main(["select", "--ckpt-dir", str(out / "checkpoints"), "--valid", str(valid),
                 "--out", str(report)]) == 0
    sel = json.loads(report.read_text())
    assert sel["criterion"] == "minmax" and sel["threshold"] == pytest.approx(2.302585, abs=1e-6)
    assert sel["selected_checkpoint"].endswith(f"step_{sel['selected_step']:08d}.json")

    metrics = tmp_path / "m.json"
    assert main(["eval", "--model", sel["selected_checkpoint"], "--data", str(valid), "--out", str(metrics)]) == 0
    m = json.loads(metrics.read_text())
    assert m["robust_accuracy"] == min(m["per_group_accuracy"].values())


def test_train_is_byte_deterministic(tmp_path, data):
    train, valid = data
    for name in ("a", "b"):
        assert main(train_args(train, valid, tmp_path / name, "--method", "np-kl")) == 0
    for f in ("steps.csv", "checkpoints.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_toy_data_gets_toy_epochs(tmp_path):
    toy = tmp_path / "toy.jsonl"
    main(["gen", "--kind", "toy2domain", "--n", "400", "--out", str(toy)])
    out = tmp_path / "run"
    assert main(["train", "--train", str(toy), "--valid", str(toy), "--method", "erm", "--batch-size", "400",
                 "--ckpt-interval", "1000", "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["epochs"] == 300


def test_sweep_and_report(tmp_path):
    grid = {"base": {"n_train": 80, "n_valid": 40, "n_test": 40, "epochs": 1, "batch_size": 16,
                     "ckpt_interval": 2},
            "axes": {"p_noise": [0.0, 0.2]}, "seeds": [0, 1]}
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps(grid))
    assert main(["sweep", "--grid", str(grid_path), "--out", str(tmp_path / "sw")]) == 0
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 1 + 4 + 2
    assert main(["report", "--runs", str(tmp_path / "sw" / "runs"), "--figure", "noise",
                 "--out", str(tmp_path / "fig.csv")]) == 0
    lines = (tmp_path / "fig.csv").read_text().splitlines()
    assert lines[0] == "p_noise,method,seed,metric,value" and len(lines) == 1 + 4 * 2


def test_exit_codes(tmp_path, data, capsys):
    train, valid = data
    assert main([]) == 1
    assert main(["train", "--train", str(train)]) == 1
    assert main(["eval", "--model", str(tmp_path / "nope.json"), "--data", str(valid), "--out", "x"]) == 1
    assert main(train_args(train, valid, tmp_path / "r", "--batch-size", "0")) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("")
    assert main(train_args(bad, valid, tmp_path / "r")) == 1
    assert "no metadata header" in capsys.readouterr().err
    assert main(["report", "--runs", str(tmp_path), "--figure", "noise", "--out", "x"]) == 1


def test_runtime_failure_exit_code(tmp_path, data, monkeypatch):
    import rpdro.cli as cli
    from rpdro.training import TrainingError

    def fail(*a, **k):
        raise TrainingError("adversary objective is not finite", 7)

    monkeypatch.setattr(cli, "train_run", fail)
    train, valid = data
    assert main(train_args(train, valid, tmp_path / "r")) == 2


def test_console_entry_point(tmp_path):
    out = tmp_path / "d.jsonl"
    res = subprocess.run([sys.executable, "-m", "rpdro.cli", "gen", "--kind", "spurious", "--n", "10",
                          "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0 and out.exists()
    res = subprocess.run([sys.executable, "-m", "rpdro.cli", "gen", "--kind", "mnist", "--n", "10",
                          "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 1 and "invalid choice" in res.stderr
