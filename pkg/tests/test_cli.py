import subprocess
import sys

import numpy as np
import pytest

from cdflow.cli import cli_main
from cdflow.io import load_grid, save_image


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli_main(["gen-synth", "--n", "12", "--size", "8", "--seed", "4", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(synth_dir, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck") / "model.cdflow"
    argv = ["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(ck)]
    argv += ["--scales", "2", "--steps", "1", "--hidden", "4", "--epochs", "2", "--seed", "1"]
    assert cli_main(argv) == 0
    return ck


def test_gen_synth_layout(synth_dir):
    lines = (synth_dir / "manifest.csv").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 13
    assert lines[1].startswith("pair00000_a.png,pair00000_b.png,")
    assert (synth_dir / "pair00011_b.png").is_file()


def test_gen_synth_is_byte_identical(synth_dir, tmp_path):
    assert cli_main(["gen-synth", "--n", "12", "--size", "8x8", "--seed", "4", "--out-dir", str(tmp_path)]) == 0
    for f in synth_dir.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_baseline_e2000_closes_the_loop(synth_dir, tmp_path, capsys):
    rep = tmp_path / "r.txt"
    assert cli_main(["baseline", "--formula", "E2000", "--manifest", str(synth_dir / "manifest.csv"), "--report", str(rep)]) == 0
    kv = dict(line.split("=") for line in rep.read_text().splitlines())
    # labels are stored with 6 decimals, so only rounding separates them from the predictions
    assert float(kv["stress"]) <= 1e-3
    assert float(kv["srcc"]) == pytest.approx(1.0, abs=1e-6)
    assert "STRESS" in capsys.readouterr().out


def test_train_is_reproducible(synth_dir, checkpoint, tmp_path):
    ck = tmp_path / "again.cdflow"
    log = tmp_path / "log.csv"
    argv = ["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(ck), "--log", str(log)]
    argv += ["--scales", "2", "--steps", "1", "--hidden", "4", "--epochs", "2", "--seed", "1"]
    assert cli_main(argv) == 0
    assert ck.read_bytes() == checkpoint.read_bytes()
    assert log.read_text().splitlines()[0] == "epoch,batch,loss_ms,loss_nl,total"


def test_eval_and_distort_eval(synth_dir, checkpoint, tmp_path):
    m = str(synth_dir / "manifest.csv")
    assert cli_main(["eval", "--checkpoint", str(checkpoint), "--manifest", m, "--report", str(tmp_path / "a")]) == 0
    argv = ["distort-eval", "--checkpoint", str(checkpoint), "--manifest", m, "--kind", "translate", "--seed", "3"]
    assert cli_main(argv + ["--report", str(tmp_path / "b")]) == 0
    assert cli_main(argv + ["--report", str(tmp_path / "c")]) == 0
    assert (tmp_path / "b").read_bytes() == (tmp_path / "c").read_bytes()
    assert "n=12" in (tmp_path / "a").read_text()


def test_compare_identical_paths(synth_dir, checkpoint, tmp_path, capsys):
    img = str(synth_dir / "pair00000_a.png")
    maps = tmp_path / "maps"
    assert cli_main(["compare", "--checkpoint", str(checkpoint), img, img, "--maps-dir", str(maps)]) == 0
    out = capsys.readouterr().out
    assert "delta_e=0.000000" in out and "delta_e_2=0.000000" in out
    assert np.all(load_grid(maps / "map_scale_1.txt") == 0)
    assert len(list(maps.iterdir())) == 4


def test_compare_different_images(synth_dir, checkpoint, capsys):
    a, b = str(synth_dir / "pair00003_a.png"), str(synth_dir / "pair00003_b.png")
    assert cli_main(["compare", "--checkpoint", str(checkpoint), a, b]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("delta_e=") and float(first.split("=")[1]) > 0


def test_center_crop_opt_in(checkpoint, tmp_path, rng):
    for name in ("a.png", "b.png"):
        save_image(rng.uniform(size=(10, 9, 3)), tmp_path / name)
    argv = ["compare", "--checkpoint", str(checkpoint), str(tmp_path / "a.png"), str(tmp_path / "b.png")]
    assert cli_main(argv) == 1
    # 10×9 crops to 8×8, which matches the trained input size
    assert cli_main(argv + ["--center-crop"]) == 0


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["baseline", "--formula", "CMC", "--manifest", "m.csv"], ["train", "--manifest", "m.csv"], ["gen-synth", "--n", "x", "--out-dir", "d"]],
)
def test_usage_errors_exit_2(argv):
    assert cli_main(argv) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert cli_main(["baseline", "--formula", "E76", "--manifest", str(tmp_path / "none.csv")]) == 1
    assert "none.csv" in capsys.readouterr().err
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    assert cli_main(["compare", "--checkpoint", str(tmp_path / "bad.ckpt"), "a.png", "b.png"]) == 1


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "cdflow.cli", "frobnicate"], capture_output=True, text=True)
    assert out.returncode == 2
    out = subprocess.run([sys.executable, "-m", "cdflow.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-synth" in out.stdout
