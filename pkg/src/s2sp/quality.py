"""AWGN synthesis, PSNR/SSIM metrics, and a Gaussian low-pass baseline.

Noise levels are stated on the 8-bit [0, 255] scale and applied as
sigma/255 to unit-range images. Synthesized noise is deliberately left
unclamped so it stays exactly zero-mean; clamping happens at PNG export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import RngStream
from .validation import check_image

PSNR_CAP_DB = 99.0
_MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class NoiseSpec:
    """AWGN with standard deviation sigma on the 8-bit scale."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float

    def as_text(self) -> str:
        return f"PSNR={self.psnr_db:.4f} dB SSIM={self.ssim:.6f}"

    def as_record(self) -> str:
        return f"psnr_db={self.psnr_db:.6f} ssim={self.ssim:.8f}"


def add_awgn(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """y = x + N(0, (sigma/255)^2), i.i.d. per element, unclamped."""
    img = check_image(x, "clean image")
    gen = RngStream(spec.seed).generator()
    noise = gen.normal(0.0, spec.sigma / 255.0, size=img.shape)
    return (img + noise).astype(np.float32)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for unit dynamic range, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel1d(SSIM_SIGMA, (SSIM_WINDOW - 1) // 2)


def _window_mean(x: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean over fully interior 11x11 windows."""
    r = (SSIM_WINDOW - 1) // 2
    out = correlate1d(x, _SSIM_KERNEL, axis=0, mode="nearest")
    out = correlate1d(out, _SSIM_KERNEL, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    var_a = _window_mean(a * a) - mu_a * mu_a
    var_b = _window_mean(b * b) - mu_b * mu_b
    cov = _window_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, Gaussian 11x11 window (sigma 1.5), per-channel average."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected (H, W) or (H, W, C) images, got shape {a.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"ssim: image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))


def evaluate(test: np.ndarray, ref: np.ndarray) -> MetricReport:
    return MetricReport(psnr_db=psnr(test, ref), ssim=ssim(test, ref))


def gaussian_lpf(y: np.ndarray, sigma_blur: float = 1.0) -> np.ndarray:
    """Blur with a normalized truncated Gaussian (radius ceil(3*sigma)).

    Boundary handling reflects about the edge sample, which preserves the
    image mean exactly.
    """
    if sigma_blur <= 0:
        raise ValueError(f"sigma_blur must be positive, got {sigma_blur}")
    img = np.asarray(y, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    kernel = _gaussian_kernel1d(sigma_blur, math.ceil(3.0 * sigma_blur))
    out = correlate1d(img, kernel, axis=0, mode="reflect")
    out = correlate1d(out, kernel, axis=1, mode="reflect")
    out = out.astype(np.float32)
    return out[:, :, 0] if squeeze else out
