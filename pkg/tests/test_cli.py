import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from swinchex import cli
from swinchex.config import DataConfig, OutputConfig, desk_run_config
from swinchex.data import write_synthetic
from swinchex.train import NumericError, read_best, read_metrics_csv, read_report_csv

SMALL = ["model.patch_size=4", "model.depths=2, 2", "model.num_heads=2, 4",
         "model.head_variant=mlp1", "model.head_widths=8", "train.batch_size=16"]


def make_root(root, n=40, seed=0):
    write_synthetic(root, n, 32, seed=seed)
    cfg = desk_run_config()
    cfg.data = DataConfig(labels="Data_Entry_2017.csv", images="images")
    cfg.output = OutputConfig(dir="run")
    cfg.save(root / "run.ini")
    return root / "run.ini"


@pytest.fixture
def run_ini(tmp_path):
    return make_root(tmp_path)


def run(ini, cmd, *extra, overrides=SMALL):
    argv = [cmd, "--config", str(ini)]
    for o in overrides:
        argv += ["--set", o]
    return cli.main(argv + list(extra))


def test_split_is_byte_identical(run_ini, tmp_path):
    assert run(run_ini, "split") == 0
    first = (tmp_path / "run" / "split.txt").read_bytes()
    assert run(run_ini, "split") == 0
    assert (tmp_path / "run" / "split.txt").read_bytes() == first
    assert first.startswith(b"seed=0\ntrain_frac=0.8\n")


def test_train_eval_gradcam(run_ini, tmp_path, capsys):
    assert run(run_ini, "train", overrides=SMALL + ["train.epochs=2"]) == 0
    out = tmp_path / "run"
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_000.swcx", "epoch_001.swcx"]
    hist = read_metrics_csv(out / "metrics.csv")
    assert [r.epoch for r in hist] == [0, 1]
    best = read_best(out / "best.txt")
    assert (out / "best.swcx").read_bytes() == (out / best["checkpoint"]).read_bytes()
    assert (out / "config.ini").is_file() and (out / "split.txt").is_file()

    assert run(run_ini, "eval") == 0
    assert "mean AUC" in capsys.readouterr().out
    assert list(read_report_csv(out / "eval_val.csv")) == ["mlp1"]

    img = tmp_path / "images" / "syn_00000.png"
    assert run(run_ini, "gradcam", "--image", str(img), "--class", "Effusion") == 0
    with Image.open(out / "gradcam_syn_00000.png") as im:
        assert im.size == (64, 32)
    assert run(run_ini, "gradcam", "--image", str(img), "--class", "Efusion") == cli.EXIT_CONFIG
    assert run(run_ini, "gradcam", "--image", str(tmp_path / "none.png")) == cli.EXIT_DATA


def test_epochs_zero_is_config_error(run_ini, capsys):
    assert run(run_ini, "train", overrides=SMALL + ["train.epochs=0"]) == cli.EXIT_CONFIG
    assert "nothing to train" in capsys.readouterr().err


def test_bad_values_exit_config(run_ini, capsys):
    assert run(run_ini, "train", overrides=["train.lr=-1"]) == cli.EXIT_CONFIG
    assert "[train] lr" in capsys.readouterr().err
    assert run(run_ini, "split", overrides=["train.bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["split", "--config", "/nonexistent.ini"]) == cli.EXIT_CONFIG


def test_missing_image_is_data_error(run_ini, tmp_path):
    (tmp_path / "images" / "syn_00003.png").unlink()
    assert run(run_ini, "train", overrides=SMALL + ["train.epochs=1"]) == cli.EXIT_DATA


def test_bad_checkpoint(run_ini, tmp_path):
    (tmp_path / "bad.swcx").write_bytes(b"garbage")
    assert run(run_ini, "eval", "--checkpoint", str(tmp_path / "bad.swcx")) == cli.EXIT_DATA
    assert run(run_ini, "eval", "--checkpoint", str(tmp_path / "gone.swcx")) == cli.EXIT_DATA


def test_checkpoint_config_mismatch(run_ini, tmp_path):
    assert run(run_ini, "train", overrides=SMALL + ["train.epochs=1"]) == 0
    assert run(run_ini, "eval", overrides=SMALL[:-2]) == cli.EXIT_CONFIG


def test_numeric_failure_exit(run_ini, monkeypatch):
    def boom(cfg):
        raise NumericError("non-finite loss nan at epoch 0, batch 0")
    monkeypatch.setattr(cli, "cmd_train", boom)
    assert run(run_ini, "train") == cli.EXIT_NUMERIC


def test_complexity_command(tmp_path):
    out = tmp_path / "c.csv"
    assert cli.main(["complexity", "--sizes", "8,4", "--channels", "4", "--windows", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert row["omega_wmsa"] == row["measured_windowed"] == str(4 * 64 * 16 + 2 * 16 * 64 * 4)


def test_check_exit_code(monkeypatch, capsys):
    from swinchex.checks import CheckResult
    monkeypatch.setattr(cli.checks, "run_all", lambda cfg, seed: [CheckResult("a", 0.0, 1.0)])
    assert cli.main(["check"]) == 0
    assert capsys.readouterr().out.startswith("PASS a")
    monkeypatch.setattr(cli.checks, "run_all", lambda cfg, seed: [CheckResult("a", 2.0, 1.0)])
    assert cli.main(["check"]) == cli.EXIT_CHECK


def test_console_script_help():
    exe = shutil.which("swinchex")
    cmd = [exe] if exe else [sys.executable, "-m", "swinchex.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcam" in res.stdout


def test_pipeline_is_bit_reproducible(tmp_path):
    blobs = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        ini = make_root(root)
        assert run(ini, "train", overrides=SMALL + ["train.epochs=2"]) == 0
        assert run(ini, "eval") == 0
        blobs.append([(root / "run" / f).read_bytes()
                      for f in ("split.txt", "best.swcx", "metrics.csv", "eval_val.csv")])
    assert blobs[0] == blobs[1]


@pytest.mark.slow
def test_overfit_checkpoint_scores_high(tmp_path, capsys):
    ini = make_root(tmp_path, n=64)
    extra = SMALL + ["train.epochs=40", "train.batch_size=8", "train.lr=0.001"]
    assert run(ini, "train", overrides=extra) == 0
    last = tmp_path / "run" / "checkpoints" / "epoch_039.swcx"
    assert run(ini, "eval", "--split", "train", "--checkpoint", str(last), overrides=extra) == 0
    report = read_report_csv(tmp_path / "run" / "eval_train.csv")["mlp1"]
    assert report[-1] >= 0.95
    assert np.isfinite(report[-1])
