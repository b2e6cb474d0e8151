"""Training losses and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Variable

DEFAULT_EPSILON = 1e-3


def charbonnier(yhat, y, epsilon: float = DEFAULT_EPSILON) -> Variable:
    """Mean of sqrt((y - yhat)^2 + eps^2) over every element."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = ag.sub(y, yhat)
    return ag.mean_all(ag.sqrt(ag.add_const(ag.mul(d, d), epsilon * epsilon)))


def joint_loss(den: Variable, cls: Variable | None, lam: float) -> Variable:
    """den + lam * cls; with lam == 0 the classification term is dropped."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if cls is None or lam == 0:
        return den
    return ag.add(den, ag.scale(cls, Variable(np.asarray(lam, dtype=den.dtype))))


def psnr(yhat, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs agree."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ag.ShapeError(f"psnr: shape mismatch {yhat.shape} vs {y.shape}")
    mse = float(np.mean((yhat - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def format_metric(v: float | None) -> str:
    """CSV/JSON text for a metric; infinity becomes ``"inf"``, missing becomes empty."""
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, w.shape)
    return np.einsum("ijkl,kl->ij", win, w)


def ssim(yhat, y, peak: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    a = np.asarray(yhat, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ag.ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 else a
    b = b.reshape(b.shape[-2:]) if b.ndim > 2 else b
    if a.ndim != 2:
        raise ag.ShapeError("ssim: expects a single-channel image (1, 1, H, W) or (H, W)")
    if min(a.shape) < SSIM_WINDOW:
        raise ag.ShapeError(f"ssim: image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches; ties resolve to the lowest index."""
    z = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    if z.shape[0] != labels.size:
        raise ag.ShapeError(f"accuracy: {z.shape[0]} rows but {labels.size} labels")
    return float(np.mean(np.argmax(z, axis=1) == labels))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    accuracy: float | None = None
    loss_den: float | None = None
    loss_cls: float | None = None
    loss_total: float | None = None
