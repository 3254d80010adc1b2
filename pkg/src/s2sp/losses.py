"""Self-supervised training objectives.

The residual loss only sees pixels the mask dropped (b=0); everything else
contributes nothing, which is what prevents the identity mapping. An
optional no-reference quality term pushes predictions toward a perfect
score of 100 through any differentiable scorer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Union

import numpy as np

from . import ops
from .sampling import BernoulliMask
from .tensor import RngStream, Tensor, as_tensor

MaskLike = Union[BernoulliMask, np.ndarray]

PERFECT_SCORE = 100.0
DEFAULT_LAMBDA_IQA = 2e-8


class QualityScorer(Protocol):
    """Differentiable no-reference image quality score in [0, 100]."""

    name: str

    def score(self, image: Tensor) -> Tensor: ...


class NullScorer:
    """Constant perfect score; the quality term and its gradient vanish."""

    name = "null"

    def score(self, image: Tensor) -> Tensor:
        return as_tensor(np.asarray(PERFECT_SCORE, dtype=image.dtype))


class SmoothTVScorer:
    """Quality as smooth total variation: 100 * exp(-beta * TV / pixels).

    TV uses the smooth magnitude sqrt(d^2 + eps^2) - eps of horizontal and
    vertical neighbor differences, so the score is differentiable
    everywhere, monotone decreasing in total variation, and bounded by
    (0, 100].
    """

    name = "smoothtv"

    def __init__(self, beta: float = 10.0, eps: float = 1e-3):
        if beta <= 0 or eps <= 0:
            raise ValueError("beta and eps must be positive")
        self.beta = beta
        self.eps = eps

    def score(self, image: Tensor) -> Tensor:
        tv = (ops.spatial_diff(image, 1).smooth_abs(self.eps).sum()
              + ops.spatial_diff(image, 2).smooth_abs(self.eps).sum())
        mean_tv = tv * (1.0 / image.size)
        return PERFECT_SCORE * (mean_tv * (-self.beta)).exp()


_SCORERS = {"null": NullScorer, "smoothtv": SmoothTVScorer}


def make_scorer(name: str, **kwargs) -> QualityScorer:
    try:
        return _SCORERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown scorer '{name}'; choose from {sorted(_SCORERS)}") from None


def smooth_tv_score(image: np.ndarray, beta: float = 10.0, eps: float = 1e-3) -> float:
    """Score a plain (H, W[, C]) image with :class:`SmoothTVScorer`."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    chw = as_tensor(img.transpose(2, 0, 1))
    return SmoothTVScorer(beta, eps).score(chw).item()


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the combined objective."""

    variant: str = "l1"
    lambda_iqa: float = DEFAULT_LAMBDA_IQA
    normalize: bool = False
    smooth_eps: float = 0.0  # residual |.| smoothing; only gradient checks set this

    def __post_init__(self):
        if self.variant not in ("l1", "l2"):
            raise ValueError(f"loss variant must be 'l1' or 'l2', got '{self.variant}'")
        if self.lambda_iqa < 0:
            raise ValueError(f"lambda_iqa must be non-negative, got {self.lambda_iqa}")


def _mask_array(mask: MaskLike) -> np.ndarray:
    return mask.data if isinstance(mask, BernoulliMask) else np.asarray(mask)


def _as_chw_constant(image: np.ndarray, dtype) -> np.ndarray:
    img = np.asarray(image, dtype=dtype)
    if img.ndim == 2:
        img = img[:, :, None]
    return img.transpose(2, 0, 1)


def masked_residual_loss(pred: Tensor, y: np.ndarray, mask: MaskLike,
                         variant: str = "l1", normalize: bool = False,
                         smooth_eps: float = 0.0) -> Tensor:
    """Sum of residuals |pred - y| (or squared) over dropped (b=0) pixels.

    ``pred`` is a (C, H, W) tensor; ``y`` the (H, W[, C]) reference image.
    With ``normalize`` the sum becomes a mean over masked elements.
    """
    if variant not in ("l1", "l2"):
        raise ValueError(f"loss variant must be 'l1' or 'l2', got '{variant}'")
    b = _mask_array(mask)
    c, h, w = pred.shape
    if b.shape != (h, w):
        raise ValueError(f"mask shape {b.shape} does not match prediction {h}x{w}")
    y_chw = _as_chw_constant(y, pred.dtype)
    if y_chw.shape != pred.shape:
        raise ValueError(f"reference image shape {y_chw.shape} does not match prediction {pred.shape}")

    weights = (1.0 - b.astype(pred.dtype))[None, :, :]
    masked = (pred - y_chw) * weights
    if variant == "l1":
        loss = masked.smooth_abs(smooth_eps).sum()
    else:
        loss = (masked * masked).sum()
    if normalize:
        count = c * int(round(float(weights.sum())))
        if count == 0:
            raise ValueError("normalize=True requires at least one masked (b=0) element")
        loss = loss * (1.0 / count)
    return loss


def iqa_loss(scorer: QualityScorer, pred: Tensor) -> Tensor:
    """Squared distance of the scorer output from the perfect score."""
    s = scorer.score(pred)
    if not np.isfinite(s.data).all():
        raise FloatingPointError(f"scorer '{scorer.name}' returned a non-finite score")
    d = PERFECT_SCORE - s
    return d * d


def total_loss(pred: Tensor, y: np.ndarray, mask: MaskLike,
               scorer: QualityScorer, cfg: LossConfig) -> Tensor:
    """Masked residual loss plus lambda_iqa times the quality loss."""
    loss = masked_residual_loss(pred, y, mask, cfg.variant, cfg.normalize, cfg.smooth_eps)
    if cfg.lambda_iqa != 0.0:
        loss = loss + cfg.lambda_iqa * iqa_loss(scorer, pred)
    return loss


@dataclass(frozen=True)
class ExpectationReport:
    """Monte Carlo comparison of the masked-L1 loss against its noise-free value."""

    empirical_mean: float
    expected: float
    std_error: float
    z: float
    draws: int
    case: str  # "above" (prediction > any noisy value) or "below"

    @property
    def passed(self) -> bool:
        return self.z < 3.0


def expectation_property_check(f_value: float, x: float, noise_bound: float,
                               p: float, draws: int, rng: RngStream,
                               height: int = 32, width: int = 32) -> ExpectationReport:
    """Check that zero-mean noise leaves the expected masked L1 loss unchanged.

    With a constant prediction f and pixels y = x + n (noise bounded so the
    residual sign is fixed across realizations), the mean per-masked-pixel
    L1 loss against y must converge to |f - x| at the Monte Carlo rate.
    """
    if noise_bound < 0:
        raise ValueError("noise_bound must be non-negative")
    if draws < 2:
        raise ValueError("need at least two draws")
    if f_value > x + noise_bound:
        case, expected = "above", f_value - x
    elif f_value < x - noise_bound:
        case, expected = "below", x - f_value
    else:
        raise ValueError(
            "prediction must stay on one side of all noisy values: "
            f"need |f - x| > noise_bound, got f={f_value}, x={x}, bound={noise_bound}")

    mask_gen = rng.generator(0)
    keep = mask_gen.random((height, width)) >= p
    n_masked = int((~keep).sum())
    if n_masked == 0:
        raise ValueError("mask dropped no pixels; increase p or the mask size")

    noise_gen = rng.generator(1)
    noise = noise_gen.uniform(-noise_bound, noise_bound, size=(draws, n_masked))
    per_draw = np.abs(f_value - (x + noise)).mean(axis=1)
    mean = float(per_draw.mean())
    se = float(per_draw.std(ddof=1) / np.sqrt(draws))
    z = abs(mean - expected) / se if se > 0 else 0.0
    return ExpectationReport(mean, expected, se, z, draws, case)
