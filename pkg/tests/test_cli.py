import io

import pandas as pd
import pytest

from app import cli
from app.services.selfcheck_service import SelfcheckReport

CONFIG = "hidden=8,8\nepochs=2\nbatch_size=32\nsynthetic_samples=128\nsynthetic_dim=4\nseed=3\n"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG)
    return path


@pytest.fixture
def trained(tmp_path, config_file, capsys):
    ckpt = tmp_path / "model.ckpt"
    assert cli.run(["train", "--config", str(config_file), "--checkpoint", str(ckpt), "--out", str(tmp_path / "m.csv")]) == 0
    capsys.readouterr()
    return ckpt


def _csv(text: str) -> pd.DataFrame:
    return pd.read_csv(io.StringIO(text))


def test_train_prints_metrics(tmp_path, config_file, capsys):
    ckpt = tmp_path / "out" / "model.ckpt"
    assert cli.run(["train", "--config", str(config_file), "--checkpoint", str(ckpt), "--epochs", "1"]) == 0
    frame = _csv(capsys.readouterr().out)
    assert list(frame.columns) == ["epoch", "train_loss", "eval_acc"]
    assert frame["epoch"].tolist() == [1]
    assert ckpt.exists()


def test_eval_and_packed_paths_agree(tmp_path, trained, capsys):
    packed = tmp_path / "model.n2uq"
    assert cli.run(["export", "--checkpoint", str(trained), "--out", str(packed)]) == 0
    assert packed.exists()
    assert cli.run(["eval", "--checkpoint", str(trained), "--packed", str(packed)]) == 0
    frame = _csv(capsys.readouterr().out)
    assert frame["path"].tolist() == ["training", "packed"]
    assert (frame["samples"] == 128).all()
    assert abs(frame["accuracy"].iloc[0] - frame["accuracy"].iloc[1]) <= 1e-6


@pytest.mark.parametrize("extra, columns", [([], "segment"), (["--weights"], "level")])
def test_inspect_emits_csv(trained, capsys, extra, columns):
    assert cli.run(["inspect", "--checkpoint", str(trained), *extra]) == 0
    frame = _csv(capsys.readouterr().out)
    assert columns in frame.columns and len(frame) > 0


def test_selfcheck_quick(capsys):
    assert cli.run(["selfcheck", "--quick"]) == 0
    assert _csv(capsys.readouterr().out)["passed"].all()


def test_failed_selfcheck_exits_2(monkeypatch, capsys):
    frame = pd.DataFrame([{"suite": "bitwise_dot", "config": "n=2", "cases": 1, "max_deviation": 1.0, "tolerance": 0.0, "passed": False}])
    monkeypatch.setattr(cli, "run_selfcheck", lambda quick, seed: SelfcheckReport(frame))
    assert cli.run(["selfcheck"]) == 2
    assert "bitwise_dot" in capsys.readouterr().out


def test_missing_config(tmp_path, capsys):
    assert cli.run(["train", "--config", str(tmp_path / "missing.cfg"), "--checkpoint", str(tmp_path / "x.ckpt")]) == 1
    assert "file not found" in capsys.readouterr().err


def test_usage_errors(tmp_path, trained, capsys):
    assert cli.run(["train", "--bogus"]) == 1
    assert cli.run(["eval"]) == 1
    assert cli.run(["export", "--checkpoint", str(trained)]) == 1
    assert cli.run(["train", "--bits-w", "9", "--checkpoint", str(tmp_path / "x.ckpt")]) == 1


def test_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.run(["inspect", "--checkpoint", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err
