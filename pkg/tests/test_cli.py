import json
import subprocess
import sys

import pytest

from noisylang.cli import main
from noisylang.lang import Language, FeatureSpace, format_language

TRAIN = {
    "train": {"sizes": [3, 3], "d_s": 3, "d_r": 3, "hidden": 16, "lr": 1e-3, "batch": 16,
              "steps": 20, "eval_every": 10, "eval_window": 2, "eval_samples": 100, "epsilon": 0.1},
}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def config(tmp_path):
    def write(data, name="c.json"):
        p = tmp_path / name
        p.write_text(json.dumps(data))
        return str(p)

    return write


def test_verify_optimality_passes(capsys):
    code, out, _ = run(capsys, "verify-optimality", "--K", "2", "--m", "2", "--eps", "0.1")
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and rep["languages_scored"] == 24


def test_verify_optimality_precondition_is_usage_error(capsys):
    code, _, err = run(capsys, "verify-optimality", "--K", "2", "--m", "2", "--eps", "0.7")
    assert code == 2 and "eps <" in err


def test_verify_all_failure_exit_code(capsys, monkeypatch):
    from noisylang import experiments as ex

    monkeypatch.setattr(ex, "verify_all", lambda w, t: [ex.Check("x", False, {}, 0.0)])
    code, out, _ = run(capsys, "verify-all")
    assert code == 1 and json.loads(out)["passed"] is False


def test_verify_all(capsys):
    code, out, _ = run(capsys, "verify-all", "--trials", "5000")
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and len(rep["checks"]) == 6


def test_expected_topo_text_and_json(capsys):
    code, out, _ = run(capsys, "expected-topo", "--n", "5", "--ranks", "avg")
    assert code == 0 and "n=5" in out
    code, out, _ = run(capsys, "expected-topo", "--n", "5", "--ranks", "avg", "--json")
    data = json.loads(out)
    assert data["expected_topo"] <= 0.2
    code, out, _ = run(capsys, "expected-topo", "--n", "3", "--mc", "2000", "--json")
    assert code == 0 and json.loads(out)["trials"] == 2000


def test_expected_topo_bad_n(capsys):
    assert run(capsys, "expected-topo", "--n", "1")[0] == 2
    assert run(capsys, "expected-topo", "--n", "5", "--ranks", "dense")[0] == 2


def test_usage_errors(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "train", "--config", "missing.json", "--seed", "1", "--out", "x.csv")[0] == 2
    assert run(capsys, "--help")[0] == 0


def test_metrics_command(capsys, tmp_path):
    lang = Language.from_codes(FeatureSpace.uniform(2, 2), 2, 2, [0, 3, 1, 2])
    log = tmp_path / "log.txt"
    log.write_text(format_language(lang))
    code, out, _ = run(capsys, "metrics", "--log", str(log))
    assert code == 0
    data = json.loads(out)
    assert data["topo"] == pytest.approx(-0.5) and data["conf"] == 2 and "acc" not in data
    assert run(capsys, "metrics", "--log", str(tmp_path / "nope"))[0] == 2


def test_train_is_byte_identical(capsys, tmp_path, config):
    cfg = config(TRAIN)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, "train", "--config", cfg, "--seed", "7", "--out", str(a))[0] == 0
    assert run(capsys, "train", "--config", cfg, "--seed", "7", "--out", str(b), "--json")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "seed,eps,eps0,T,step,topo,conf,cont,pos,acc"
    assert len(lines) == 4 and all(l.startswith("7,") for l in lines[1:])


def test_train_checkpoint_and_siblings(capsys, tmp_path, config):
    cfg = config({**TRAIN, "holdout_diagonal": True, "finetune_steps": 5, "scramble_labels": True})
    out = tmp_path / "run.csv"
    ck = tmp_path / "ck.json"
    code, text, _ = run(capsys, "train", "--config", cfg, "--seed", "1", "--out", str(out), "--checkpoint", str(ck), "--json")
    assert code == 0
    files = json.loads(text)["files"]
    for name in ("run.csv", "run.original.csv", "run.finetune-full.csv", "run.finetune-train.csv"):
        assert str(tmp_path / name) in files
    assert json.loads(ck.read_text())["step"] == 20


def test_train_rejects_several_cells(capsys, tmp_path, config):
    cfg = config({**TRAIN, "epsilons": [0.0, 0.1]})
    assert run(capsys, "train", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "x.csv"))[0] == 2


def test_train_unknown_key_is_usage_error(capsys, tmp_path, config):
    cfg = config({**TRAIN, "epsilon": 0.1})
    code, _, err = run(capsys, "train", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "x.csv"))
    assert code == 2 and "epsilon" in err


def test_sweep_command(capsys, tmp_path, config, monkeypatch):
    monkeypatch.setenv("NOISYLANG_WORKERS", "2")
    cfg = config({**TRAIN, "epsilons": [0.0, 0.1], "seeds": 2})
    out = tmp_path / "sweep"
    code, text, _ = run(capsys, "sweep", "--config", cfg, "--out", str(out), "--json")
    assert code == 0
    assert "trajectories.csv" in json.loads(text)["files"]
    assert (out / "summary.csv").exists() and (out / "topo.dat").exists()


def test_bad_worker_env_is_usage_error(capsys, tmp_path, config, monkeypatch):
    monkeypatch.setenv("NOISYLANG_WORKERS", "zero")
    cfg = config({**TRAIN, "seeds": 1})
    assert run(capsys, "sweep", "--config", cfg, "--out", str(tmp_path / "s"))[0] == 2


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "noisylang.cli", "expected-topo", "--n", "2", "--json"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["expected_topo"] == pytest.approx(2 / 3)
