"""Seeded training loop with a classification-weight ramp and per-epoch logging."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import save_checkpoint
from .data import Dataset, NoiseSpec, corrupt, crop, pad_to_multiple
from .model import ModelState, alpha, forward
from .objectives import accuracy, charbonnier, format_metric, joint_loss, psnr, ssim, DEFAULT_EPSILON

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class RampSchedule:
    """Zero before ``start``, linear up to ``lambda_max`` at ``end``, flat after.

    Epochs are counted from 0, so ``value(e)`` is the weight used during the
    (e+1)-th epoch.
    """

    lambda_max: float = 0.1
    start: float = 0.0
    end: float = 0.0

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if self.start > self.end:
            raise ValueError(f"ramp start {self.start} after end {self.end}")

    @classmethod
    def default(cls, epochs: int, lambda_max: float = 0.1) -> "RampSchedule":
        return cls(lambda_max, 0.2 * epochs, 0.5 * epochs)

    def value(self, epoch: float) -> float:
        if epoch < self.start:
            return 0.0
        if epoch >= self.end:
            return self.lambda_max
        return self.lambda_max * (epoch - self.start) / (self.end - self.start)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    crop_size: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    ramp: RampSchedule | None = None
    epsilon: float = DEFAULT_EPSILON
    checkpoint_every: int = 0
    eval_every: int = 1
    val_fraction: float = 0.1
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.ramp is None:
            self.ramp = RampSchedule.default(self.epochs)


# ------------------------------------------------------------------ optimizers


def sgd_step(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        if g is not None:
            p.value = p.value - p.dtype.type(lr) * g


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        dt = p.dtype.type
        state.m[i] = dt(beta1) * state.m[i] + dt(1 - beta1) * g
        state.v[i] = dt(beta2) * state.v[i] + dt(1 - beta2) * g * g
        mhat = state.m[i] / dt(c1)
        vhat = state.v[i] / dt(c2)
        p.value = (p.value - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------- log


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    train_den: float
    train_cls: float | None
    alpha: list[float] | None
    psnr_db: float | None = None
    ssim: float | None = None
    accuracy: float | None = None
    val_den: float | None = None
    val_cls: float | None = None
    noisy_psnr_db: float | None = None


@dataclass
class TrainLog:
    depth: int
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_psnr_db: float | None = None
    best_alpha: list[float] | None = None

    CSV_HEAD = ["epoch", "split", "psnr_db", "ssim", "accuracy", "loss_den", "loss_cls", "lambda"]

    def csv_rows(self) -> list[list[str]]:
        head = self.CSV_HEAD + [f"alpha_{i}" for i in range(1, self.depth + 1)]
        rows = [head]
        for r in self.records:
            al = [format_metric(a) for a in r.alpha] if r.alpha else [""] * self.depth
            lam = format_metric(r.lam)
            rows.append([str(r.epoch), "train", "", "", "", format_metric(r.train_den),
                         format_metric(r.train_cls), lam, *al])
            if r.psnr_db is not None:
                rows.append([str(r.epoch), "val", format_metric(r.psnr_db), format_metric(r.ssim),
                             format_metric(r.accuracy), format_metric(r.val_den),
                             format_metric(r.val_cls), lam, *al])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            # json cannot carry inf, so that one case uses the CSV sentinel
            "best_psnr_db": "inf" if self.best_psnr_db == math.inf else self.best_psnr_db,
            "best_alpha": self.best_alpha,
            "final_alpha": last.alpha if last else None,
            "final_accuracy": last.accuracy if last else None,
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ helpers


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _prepare_batch(images: np.ndarray, crop_size: int, mult: int, rng: np.random.Generator) -> np.ndarray:
    H, W = images.shape[-2:]
    if crop_size and (H > crop_size or W > crop_size):
        cs = crop_size
        out = np.empty((len(images), 1, cs, cs), dtype=images.dtype)
        for n in range(len(images)):
            y = int(rng.integers(0, H - cs + 1))
            x = int(rng.integers(0, W - cs + 1))
            out[n] = images[n, :, y : y + cs, x : x + cs]
        images = out
    padded, _ = pad_to_multiple(images, mult)
    return padded


@dataclass
class EvalResult:
    psnr_db: float
    ssim: float | None
    accuracy: float | None
    loss_den: float
    loss_cls: float | None
    noisy_psnr_db: float
    per_image_psnr: list[float]
    outputs: np.ndarray


def evaluate(model: ModelState, data: Dataset, noise: NoiseSpec, batch_size: int = 32,
             epsilon: float = DEFAULT_EPSILON, with_accuracy: bool = True) -> EvalResult:
    """Corrupt ``data`` with ``noise`` (fixed seed), denoise, and score on clamped outputs."""
    mult = 2 ** model.config.depth
    dt = model.dtype
    clean_all = data.images.astype(dt)
    noisy_all = corrupt(clean_all, noise)
    outs, logits_all, den_losses, cls_losses = [], [], [], []
    with ag.use_tape(ag.Tape()), ag.no_grad():
        for s in range(0, len(data), batch_size):
            clean = clean_all[s : s + batch_size]
            noisy, rec = pad_to_multiple(noisy_all[s : s + batch_size], mult)
            art = forward(model, noisy)
            out = crop(art.denoised.value, rec)
            outs.append(out)
            den_losses.append(float(charbonnier(out, clean, epsilon).value) * len(clean))
            if art.logits is not None and data.labels is not None and with_accuracy:
                logits_all.append(art.logits.value)
                cls_losses.append(float(ag.softmax_cross_entropy(art.logits, data.labels[s : s + batch_size]).value) * len(clean))
    outputs = np.concatenate(outs)
    clamped = np.clip(outputs, 0.0, 1.0)
    per = [psnr(clamped[n], clean_all[n]) for n in range(len(data))]
    noisy_per = [psnr(np.clip(noisy_all[n], 0, 1), clean_all[n]) for n in range(len(data))]
    H, W = clean_all.shape[-2:]
    ssim_v = float(np.mean([ssim(clamped[n], clean_all[n]) for n in range(len(data))])) if min(H, W) >= 11 else None
    acc = cls = None
    if logits_all:
        acc = accuracy(np.concatenate(logits_all), data.labels)
        cls = sum(cls_losses) / len(data)
    return EvalResult(float(np.mean(per)), ssim_v, acc, sum(den_losses) / len(data), cls,
                      float(np.mean(noisy_per)), per, outputs)


def _grad_norms(model: ModelState) -> dict[str, float]:
    return {k: (float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0) for k, p in model.params.items()}


# -------------------------------------------------------------------- train


def train(model: ModelState, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          out_dir=None) -> TrainLog:
    """Optimise ``model`` in place on ``charbonnier + lambda(e) * cross_entropy``.

    Fresh noise is drawn for every batch from a seed derived from
    ``(cfg.seed, epoch, batch)``, so a run is fully determined by its inputs.
    Validation uses one fixed noise draw. The weights with the best validation
    PSNR are written to ``out_dir/best.ckpt`` and, with ``restore_best``,
    loaded back into ``model`` at the end.
    """
    if val is None:
        data, val = data.split(cfg.val_fraction)
    cfgm = model.config
    mult = 2 ** cfgm.depth
    dt = model.dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    use_cls = cfgm.with_classifier and data.labels is not None and cfg.ramp.lambda_max > 0
    params = model.parameters()
    opt_state = AdamState.zeros(params)
    val_noise = cfg.noise.with_seed(derive_seed(cfg.seed, cfg.noise.seed, 0x5EED))
    tlog = TrainLog(cfgm.depth)
    best_snapshot = None

    for epoch in range(cfg.epochs):
        lam = cfg.ramp.value(epoch)
        rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
        order = rng.permutation(len(data))
        den_sum = cls_sum = 0.0
        seen = 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[s : s + cfg.batch_size])
            clean = _prepare_batch(data.images[idx].astype(dt), cfg.crop_size, mult, rng)
            noisy = corrupt(clean, cfg.noise.with_seed(derive_seed(cfg.seed, cfg.noise.seed, epoch, b)))
            tape = ag.Tape()
            with ag.use_tape(tape):
                model.zero_grad()
                art = forward(model, noisy)
                den = charbonnier(art.denoised, clean, cfg.epsilon)
                cls = None
                if use_cls and lam > 0:
                    cls = ag.softmax_cross_entropy(art.logits, data.labels[idx])
                loss = joint_loss(den, cls, lam)
                ag.backward(loss)
            tape.reset()
            lv = float(loss.value)
            if not math.isfinite(lv):
                diag = {"epoch": epoch + 1, "batch": b, "lambda": lam, "loss": lv, "grad_norms": _grad_norms(model)}
                raise NumericalAbort(f"non-finite loss at epoch {epoch + 1}, batch {b}", diag)
            grads = [p.grad for p in params]
            if cfg.optimizer == "adam":
                adam_step(params, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            else:
                sgd_step(params, grads, cfg.learning_rate)
            n = len(idx)
            den_sum += float(den.value) * n
            if cls is not None:
                cls_sum += float(cls.value) * n
            seen += n
        model.zero_grad()

        rec = EpochRecord(
            epoch + 1, lam, den_sum / seen, (cls_sum / seen) if use_cls else None,
            alpha(model) if cfgm.has_gates else None,
        )
        if rec.alpha is not None and min(rec.alpha) < 0:
            raise AssertionError(f"negative gate value {rec.alpha}")
        last = epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.eval_every == 0 or last:
            ev = evaluate(model, val, val_noise, epsilon=cfg.epsilon, with_accuracy=use_cls)
            rec.psnr_db, rec.ssim, rec.accuracy = ev.psnr_db, ev.ssim, ev.accuracy
            rec.val_den, rec.val_cls, rec.noisy_psnr_db = ev.loss_den, ev.loss_cls, ev.noisy_psnr_db
            if tlog.best_psnr_db is None or ev.psnr_db > tlog.best_psnr_db:
                tlog.best_epoch, tlog.best_psnr_db, tlog.best_alpha = rec.epoch, ev.psnr_db, rec.alpha
                best_snapshot = model.snapshot()
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "best.ckpt", {"epoch": rec.epoch, "seed": cfg.seed})
            log.info("epoch %d lambda=%.4g train_den=%.5f val_psnr=%.3f acc=%s alpha=%s",
                     rec.epoch, lam, rec.train_den, ev.psnr_db, ev.accuracy, rec.alpha)
        tlog.records.append(rec)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch + 1:04d}.ckpt", {"epoch": epoch + 1, "seed": cfg.seed})

    if cfg.restore_best and best_snapshot is not None:
        model.restore(best_snapshot)
    if out_dir is not None:
        tlog.write_csv(out_dir / "trainlog.csv")
        tlog.write_summary(out_dir / "summary.json")
    return tlog


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["noise"] = cfg.noise.describe()
    return d
