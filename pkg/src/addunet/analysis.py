"""Post-training analyses: gate sweeps, encoder filter spectra, intermediate-state dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import crop, pad_to_multiple, save_pgm
from .model import ModelState, alpha, forward, set_alpha
from .objectives import format_metric, psnr, ssim
from .trainer import TrainLog

FFT_SIZE = 64
DEFAULT_BINS = 32


@dataclass
class SweepResult:
    gate_index: int
    grid: list[float]
    psnr_db: list[float]
    ssim: list[float | None]
    learned_alpha: float
    learned_psnr_db: float
    learned_ssim: float | None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gate_index", "alpha", "psnr_db", "ssim"])
            for a, p, s in zip(self.grid, self.psnr_db, self.ssim):
                w.writerow([self.gate_index, format_metric(a), format_metric(p), format_metric(s)])


def _score(model: ModelState, noisy: np.ndarray, clean: np.ndarray) -> tuple[float, float | None]:
    padded, rec = pad_to_multiple(noisy, 2 ** model.config.depth)
    with ag.use_tape(ag.Tape()), ag.no_grad():
        out = crop(forward(model, padded).denoised.value, rec)
    out = np.clip(out, 0.0, 1.0)
    s = ssim(out[0], clean[0]) if min(clean.shape[-2:]) >= 11 else None
    return psnr(out, clean), s


def sweep_alpha(model: ModelState, noisy: np.ndarray, clean: np.ndarray, gate_index: int,
                grid_points: int = 21, grid_max: float = 1.0) -> SweepResult:
    """Evaluate one image with gate ``gate_index`` forced across ``[0, grid_max]``.

    The model's gate overrides are restored on exit, so the sweep leaves the
    model exactly as it found it.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    noisy = np.asarray(noisy, dtype=model.dtype).reshape((1, 1) + np.shape(noisy)[-2:])
    clean = np.asarray(clean, dtype=np.float64).reshape(noisy.shape)
    learned = alpha(model)[gate_index - 1]
    saved = dict(model.gate_overrides)
    grid = [float(v) for v in np.linspace(0.0, grid_max, grid_points)]
    ps, ss = [], []
    try:
        lp, ls = _score(model, noisy, clean)
        for a in grid:
            set_alpha(model, gate_index, a)
            p, s = _score(model, noisy, clean)
            ps.append(p)
            ss.append(s)
    finally:
        model.gate_overrides = saved
    return SweepResult(gate_index, grid, ps, ss, learned, lp, ls)


# ------------------------------------------------------------ spectra


@dataclass
class RadialProfile:
    level: int
    bin_centers: np.ndarray
    energy: np.ndarray
    centroid: float
    top_k: list[int] = field(default_factory=list)
    top_k_spectra: list[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "bin_centers": self.bin_centers.tolist(),
            "energy": self.energy.tolist(),
            "spectral_centroid": self.centroid,
            "top_k_filters": self.top_k,
            "top_k_spectra": [s.tolist() for s in self.top_k_spectra],
        }


def radial_grid(n: int = FFT_SIZE) -> np.ndarray:
    """Radial normalized frequency of every DFT coefficient (unshifted layout)."""
    u = np.fft.fftfreq(n)
    return np.sqrt(u[:, None] ** 2 + u[None, :] ** 2)


def bin_index(r: np.ndarray, bins: int) -> np.ndarray:
    """Bin of each radius over [0, 0.5]; radii beyond 0.5 map to -1."""
    idx = np.minimum(np.floor(r / 0.5 * bins).astype(int), bins - 1)
    return np.where(r <= 0.5, idx, -1)


def kernel_power(kernels: np.ndarray, n: int = FFT_SIZE) -> np.ndarray:
    """|DFT|^2 of each (..., k, k) kernel zero-padded to n x n."""
    k = kernels.shape[-1]
    padded = np.zeros(kernels.shape[:-2] + (n, n), dtype=np.float64)
    padded[..., :k, :k] = kernels
    return np.abs(np.fft.fft2(padded)) ** 2


def radial_profile(power: np.ndarray, bins: int) -> np.ndarray:
    """Mean of a 2-D power spectrum within each radial bin."""
    idx = bin_index(radial_grid(power.shape[-1]), bins)
    sums = np.bincount(idx[idx >= 0], weights=power[idx >= 0], minlength=bins)
    counts = np.bincount(idx[idx >= 0], minlength=bins)
    return sums / counts


def spectral_centroid(power: np.ndarray) -> float:
    """Energy-weighted mean radial frequency over the disk r <= 0.5."""
    r = radial_grid(power.shape[-1])
    inside = r <= 0.5
    total = power[inside].sum()
    return float((power[inside] * r[inside]).sum() / total) if total > 0 else 0.0


def level_profile(weight: np.ndarray, level: int, bins: int = DEFAULT_BINS, top_k: int = 4) -> RadialProfile:
    """Profile of one conv layer with weights (Cout, Cin, k, k).

    Each output channel's spectrum sums the power over its input channels;
    the level profile averages those spectra across output channels.
    """
    per_out = kernel_power(np.asarray(weight, dtype=np.float64)).sum(axis=1)
    mean_power = per_out.mean(axis=0)
    energies = per_out.sum(axis=(1, 2))
    order = [int(i) for i in np.argsort(-energies, kind="stable")[:top_k]]
    centers = (np.arange(bins) + 0.5) * (0.5 / bins)
    return RadialProfile(level, centers, radial_profile(mean_power, bins), spectral_centroid(mean_power),
                         order, [np.fft.fftshift(per_out[i]) for i in order])


def fft_radial_profiles(model: ModelState, bins: int = DEFAULT_BINS, top_k: int = 4) -> list[RadialProfile]:
    if bins < 4:
        raise ValueError("bins must be at least 4")
    return [level_profile(model.params[f"enc{i}.weight"].value, i, bins, top_k)
            for i in range(1, model.config.depth + 1)]


# ------------------------------------------------------------- collage


def rescale(img: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Affine map to [0, 1]; a constant image maps to 0.5."""
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.full_like(img, 0.5, dtype=np.float64), lo, hi
    return (img - lo) / (hi - lo), lo, hi


def unscale(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full_like(img, lo, dtype=np.float64)
    return lo + np.asarray(img, dtype=np.float64) * (hi - lo)


def dump_collage(model: ModelState, noisy: np.ndarray, out_dir) -> list[Path]:
    """Write the intermediate states of one forward pass as PGM images.

    Multichannel states are shown as their channel mean. Every image except
    the noisy input and the final output is rescaled to [0, 1]; the affine
    parameters go to ``collage.json`` so raw values can be recovered.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    noisy = np.asarray(noisy, dtype=model.dtype)
    noisy = noisy.reshape((1, 1) + noisy.shape[-2:])
    with ag.use_tape(ag.Tape()), ag.no_grad():
        art = forward(model, noisy)
    images: list[tuple[str, np.ndarray, bool]] = [("input_noisy", noisy[0, 0], False)]
    for i, st in enumerate(art.encoder_states, 1):
        images.append((f"encoder_state_{i}", st.value[0].mean(axis=0), True))
    for i, r in enumerate(art.residuals, 1):
        images.append((f"residual_{i}", r.value[0].mean(axis=0), True))
    for i, d in enumerate(art.decoder_states, 1):
        images.append((f"decoder_state_{i}", d.value[0].mean(axis=0), True))
    images.append(("output", art.denoised.value[0, 0], False))
    sidecar, written = {}, []
    for name, img, scaled in images:
        path = out_dir / f"{name}.pgm"
        if scaled:
            img, lo, hi = rescale(img)
            sidecar[name] = {"min": lo, "max": hi}
        save_pgm(img, path)
        written.append(path)
    (out_dir / "collage.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return written


# ---------------------------------------------------------- trajectory


def export_alpha_trajectory(log: TrainLog, path) -> None:
    """One row per epoch (epoch, alpha_1..alpha_D, lambda), then a ``best`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"alpha_{i}" for i in range(1, log.depth + 1)] + ["lambda"])
        for r in log.records:
            al = r.alpha or [None] * log.depth
            w.writerow([r.epoch] + [format_metric(a) for a in al] + [format_metric(r.lam)])
        if log.best_epoch is not None:
            best = next(r for r in log.records if r.epoch == log.best_epoch)
            al = log.best_alpha or [None] * log.depth
            w.writerow(["best"] + [format_metric(a) for a in al] + [format_metric(best.lam)])
