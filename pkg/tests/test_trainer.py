import struct

import numpy as np
import pytest

from addunet import autograd as ag
from addunet.autograd import Variable
from addunet.checkpoint import (
    CorruptCheckpointError, ManifestMismatchError, load_checkpoint, read_manifest, save_checkpoint,
)
from addunet.data import NoiseSpec, synth_patterns
from addunet.model import AddUNetConfig, alpha, build, predict, set_alpha
from addunet.trainer import (
    AdamState, NumericalAbort, RampSchedule, TrainConfig, adam_step, sgd_step, train,
)


def small_cfg(**kw):
    base = dict(depth=2, kernels=[3, 3], channels=4, with_classifier=True, num_classes=4, classifier_hidden=8)
    base.update(kw)
    return AddUNetConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    return synth_patterns(40, 16, 3)


def test_ramp_schedule():
    r = RampSchedule(0.1, 2, 4)
    assert [r.value(e) for e in range(6)] == pytest.approx([0, 0, 0, 0.05, 0.1, 0.1])
    d = RampSchedule.default(10)
    assert (d.start, d.end, d.lambda_max) == (2.0, 5.0, 0.1)
    vals = [d.value(e / 4) for e in range(60)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        RampSchedule(0.1, 3, 2)
    assert RampSchedule(0.3, 2, 2).value(2) == 0.3


def test_sgd_step_exact():
    p = Variable(np.array([1.0, -2.0]))
    sgd_step([p], [np.array([0.5, 0.25])], 0.1)
    assert p.value.tolist() == [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]


def test_adam_first_step():
    p = Variable(np.array([3.0]))
    st = AdamState.zeros([p])
    adam_step([p], [np.array([1.0])], st, lr=0.01, eps=1e-8)
    assert p.value[0] - 3.0 == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_no_change():
    p = Variable(np.array([3.0, 4.0], dtype=np.float32))
    st = AdamState.zeros([p])
    adam_step([p], [np.zeros(2, dtype=np.float32)], st, lr=0.1)
    assert p.value.tolist() == [3.0, 4.0]


def test_lr_zero_keeps_parameters(tiny):
    m = build(small_cfg(), seed=0)
    before = m.snapshot()
    train(m, tiny, TrainConfig(epochs=1, batch_size=8, learning_rate=0.0, ramp=RampSchedule(0.1, 0, 0)))
    for k, v in before.items():
        assert m.params[k].value.tobytes() == v.tobytes()


def test_lambda_zero_is_denoise_only(tiny, monkeypatch):
    calls = []
    orig = ag.softmax_cross_entropy
    monkeypatch.setattr(ag, "softmax_cross_entropy", lambda *a: calls.append(1) or orig(*a))
    m = build(small_cfg(), seed=0)
    log = train(m, tiny, TrainConfig(epochs=2, batch_size=8, ramp=RampSchedule(0.0, 0, 1)))
    assert not calls
    assert all(r.accuracy is None and r.train_cls is None for r in log.records)
    assert m["cls1.weight"].grad is None


def test_mtl_trains_classifier(tiny):
    m = build(small_cfg(), seed=0)
    before = m["cls2.weight"].value.copy()
    log = train(m, tiny, TrainConfig(epochs=2, batch_size=8, ramp=RampSchedule(0.5, 0, 0)))
    assert not np.array_equal(before, m["cls2.weight"].value)
    assert log.records[-1].accuracy is not None


def test_training_is_deterministic(tiny):
    logs = []
    for _ in range(2):
        m = build(small_cfg(), seed=4)
        logs.append(train(m, tiny, TrainConfig(epochs=2, batch_size=8, seed=4)).to_csv())
    assert logs[0] == logs[1]


def test_log_alpha_nonnegative_and_columns(tiny):
    m = build(small_cfg(), seed=1)
    log = train(m, tiny, TrainConfig(epochs=2, batch_size=8, learning_rate=0.05))
    rows = log.csv_rows()
    assert rows[0][-2:] == ["alpha_1", "alpha_2"]
    assert [r[:2] for r in rows[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]
    for r in log.records:
        assert min(r.alpha) >= 0


def test_denoise_loss_decreases_over_five_epochs():
    data = synth_patterns(240, 16, 0)
    m = build(AddUNetConfig(2, [3, 3], 8), seed=0)
    log = train(m, data, TrainConfig(epochs=5, batch_size=8, ramp=RampSchedule(0, 0, 0)))
    assert log.records[-1].train_den < log.records[0].train_den


def test_nan_loss_aborts(tiny):
    m = build(small_cfg(), seed=0)
    m["out.bias"].value = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericalAbort) as ei:
        train(m, tiny, TrainConfig(epochs=1, batch_size=8))
    d = ei.value.diagnostics
    assert d["epoch"] == 1 and d["batch"] == 0 and "grad_norms" in d and "lambda" in d


def test_crops_for_large_images():
    big = synth_patterns(12, 48, 0)
    m = build(AddUNetConfig(2, [3, 3], 4), seed=0)
    log = train(m, big, TrainConfig(epochs=1, batch_size=4, crop_size=16))
    assert log.records[0].psnr_db is not None


def test_best_checkpoint_written(tiny, tmp_path):
    m = build(small_cfg(), seed=0)
    log = train(m, tiny, TrainConfig(epochs=3, batch_size=8, checkpoint_every=1), out_dir=tmp_path)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "epoch_0003.ckpt").exists()
    manifest, _ = read_manifest(tmp_path / "best.ckpt")
    assert manifest["epoch"] == log.best_epoch
    assert manifest["alpha"] == log.best_alpha
    assert alpha(m) == log.best_alpha  # restore_best


# -------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_roundtrip_bit_exact(tmp_path, dtype):
    m = build(small_cfg(), seed=9, dtype=dtype)
    m["gate2.rho"].value = np.asarray(-1.7, dtype=dtype)
    set_alpha(m, 1, 0.25)
    save_checkpoint(m, tmp_path / "m.ckpt", {"epoch": 3, "seed": 9, "note": "x"})
    m2, manifest = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(dtype)
    assert predict(m2, x).tobytes() == predict(m, x).tobytes()
    assert manifest["alpha"] == alpha(m) == alpha(m2)
    assert manifest["epoch"] == 3 and manifest["meta"] == {"note": "x"}
    for k in m.params:
        assert m.params[k].value.tobytes() == m2.params[k].value.tobytes()


def test_checkpoint_errors(tmp_path):
    m = build(small_cfg(), seed=0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    raw = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-7])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    bad = bytearray(raw)
    bad[0:4] = b"XXXX"
    (tmp_path / "magic.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(p, expected=small_cfg(channels=8))
    # a depth-3 manifest over depth-2 tensors
    text = raw.replace(b'"depth": 2', b'"depth": 3').replace(b'"kernels": [3, 3]', b'"kernels": [3, 3, 3]')
    mlen = struct.unpack("<Q", raw[-12:-4])[0] + (len(text) - len(raw))
    (tmp_path / "cfg.ckpt").write_bytes(text[:-12] + struct.pack("<Q", mlen) + b"AUCK")
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(tmp_path / "cfg.ckpt")


def test_noise_spec_in_config_is_respected(tiny):
    a = build(small_cfg(), seed=0)
    b = build(small_cfg(), seed=0)
    train(a, tiny, TrainConfig(epochs=1, batch_size=8, noise=NoiseSpec("awgn", 0.1)))
    train(b, tiny, TrainConfig(epochs=1, batch_size=8, noise=NoiseSpec("awgn", 0.3)))
    assert not np.array_equal(a["out.weight"].value, b["out.weight"].value)
