import csv
import json

import numpy as np
import pytest

from addunet.checkpoint import load_checkpoint, save_checkpoint
from addunet.cli import main
from addunet.data import load_pgm, quantize, save_pgm, synth_patterns
from addunet.model import AddUNetConfig, build, predict, set_alpha
from addunet.objectives import psnr

TRAIN = ["--depth", "2", "--kernels", "3,3", "--channels", "4", "--batch-size", "8", "--classifier-hidden", "8"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", "synth:40,16,0", "--out", str(out), "--epochs", "2", *TRAIN]) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "config.txt").exists()
    assert "epochs = 2" in (trained / "config.txt").read_text()
    assert (trained / "best.ckpt").exists() and (trained / "final.ckpt").exists()
    rows = read_csv(trained / "trainlog.csv")
    assert sorted({r["epoch"] for r in rows}) == ["1", "2"]
    assert {r["split"] for r in rows} == {"train", "val"}
    assert json.loads((trained / "summary.json").read_text())["epochs"] == 2
    assert (trained / "alpha_trajectory.csv").exists()


def test_train_lambda_zero_empty_accuracy(tmp_path):
    code = main(["train", "--data", "synth:40,16,0", "--out", str(tmp_path), "--epochs", "1",
                 "--lambda-max", "0", *TRAIN])
    assert code == 0
    assert all(r["accuracy"] == "" for r in read_csv(tmp_path / "trainlog.csv"))


def test_train_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["train", "--data", "synth:40,16,1", "--out", str(d), "--epochs", "2", "--seed", "3", *TRAIN]) == 0
        outs.append(d)
    for f in ("trainlog.csv", "summary.json", "config.txt", "best.ckpt", "final.ckpt", "alpha_trajectory.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# toy\nepochs = 3\nchannels=4\nseed = 5\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--data", "synth:24,16,0", "--out", str(out),
                 "--epochs", "1", "--set", "depth=1", "--kernels", "3"]) == 0
    echo = (out / "config.txt").read_text()
    assert "epochs = 1" in echo and "seed = 5" in echo and "depth = 1" in echo


def test_usage_errors(tmp_path):
    assert main(["train", "--data", f"idx:{tmp_path}/missing", "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", "synth:8,16,0", "--out", str(tmp_path / "o"), "--set", "bogus=1"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("lerning_rate = 0.1\n")
    assert main(["train", "--config", str(bad), "--data", "synth:8,16,0", "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(tmp_path):
    code = main(["train", "--data", "synth:16,16,0", "--out", str(tmp_path), "--epochs", "2",
                 "--learning-rate", "1e30", *TRAIN])
    assert code == 3


def test_denoise_matches_in_process(trained, tmp_path):
    model, _ = load_checkpoint(trained / "best.ckpt")
    clean = synth_patterns(3, 16, 9).images
    noisy = np.clip(clean + np.random.default_rng(0).normal(0, 0.1, clean.shape), 0, 1).astype(np.float32)
    src, ref = tmp_path / "noisy", tmp_path / "clean"
    src.mkdir(), ref.mkdir()
    for i in range(3):
        save_pgm(noisy[i], src / f"im{i}.pgm")
        save_pgm(clean[i], ref / f"im{i}.pgm")
    before = {p.name: p.read_bytes() for p in src.iterdir()}

    out = tmp_path / "single.pgm"
    assert main(["denoise", "--checkpoint", str(trained / "best.ckpt"), "--input", str(src / "im0.pgm"),
                 "--out", str(out), "--clean", str(ref / "im0.pgm")]) == 0
    x = load_pgm(src / "im0.pgm")
    expected = predict(model, x)
    assert out.read_bytes().endswith(quantize(expected[0, 0]).tobytes())
    row = read_csv(out.with_suffix(".metrics.csv"))[0]
    assert float(row["psnr_db"]) == psnr(np.clip(expected, 0, 1), load_pgm(ref / "im0.pgm"))

    outdir = tmp_path / "batch"
    assert main(["denoise", "--checkpoint", str(trained / "best.ckpt"), "--input", str(src), "--out", str(outdir),
                 "--clean", str(ref)]) == 0
    assert sorted(p.name for p in outdir.glob("*.pgm")) == ["im0.pgm", "im1.pgm", "im2.pgm"]
    assert len(read_csv(outdir / "metrics.csv")) == 3
    assert {p.name: p.read_bytes() for p in src.iterdir()} == before


def test_denoise_incompatible_input(trained, tmp_path):
    assert main(["denoise", "--checkpoint", str(trained / "best.ckpt"), "--input", str(tmp_path / "none.pgm"),
                 "--out", str(tmp_path / "o.pgm")]) == 2
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    save_pgm(np.zeros((16, 16)), tmp_path / "z.pgm")
    assert main(["denoise", "--checkpoint", str(garbage), "--input", str(tmp_path / "z.pgm"),
                 "--out", str(tmp_path / "o.pgm")]) == 2


def identity_checkpoint(path):
    m = build(AddUNetConfig(1, [3], 2), seed=0)
    for p in m.params.values():
        p.value = np.zeros_like(p.value)
    m["stem.weight"].value[0, 0, 1, 1] = 1.0
    m["enc1.weight"].value[0, 0, 1, 1] = 1.0
    m["dec1.weight"].value[0, 0, 1, 1] = 1.0
    m["out.weight"].value[0, 0, 0, 0] = 1.0
    set_alpha(m, 1, 1.0)
    save_checkpoint(m, path)


def test_eval_identity_checkpoint_infinite_psnr(tmp_path):
    ck = tmp_path / "id.ckpt"
    identity_checkpoint(ck)
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--checkpoint", str(ck), "--data", "synth:6,16,0", "--noise", "awgn:0", "--out", str(out)]) == 0
    metrics = {r["metric"]: r["value"] for r in read_csv(out)}
    assert metrics["psnr_db"] == "inf"


def test_sweep_alpha_cli(trained, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep-alpha", "--checkpoint", str(trained / "best.ckpt"), "--data", "synth:4,16,2",
                 "--grid-points", "7", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 7 and rows[0]["alpha"] == "0.0" and rows[-1]["alpha"] == "1.0"
    assert (tmp_path / "sweep.csv.invocation.txt").exists()


def test_analyze_filters_cli(trained, tmp_path):
    assert main(["analyze-filters", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path)]) == 0
    files = sorted(tmp_path.glob("level_*.json"))
    assert [f.name for f in files] == ["level_1.json", "level_2.json"]
    prof = json.loads(files[0].read_text())
    assert len(prof["energy"]) == 32 and prof["level"] == 1


def test_dump_collage_cli(trained, tmp_path):
    save_pgm(synth_patterns(1, 16, 0).images[0], tmp_path / "in.pgm")
    out = tmp_path / "collage"
    assert main(["dump-collage", "--checkpoint", str(trained / "best.ckpt"), "--input", str(tmp_path / "in.pgm"),
                 "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 2 + 3 * 2 + 1
