"""Bernoulli pixel masks and masked training-pair construction.

A mask value of 1 keeps the pixel in the network input; 0 hides it, and
hidden pixels become the regression targets. The same mask applies to all
channels of an image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngStream


@dataclass(frozen=True)
class BernoulliMask:
    """Binary (H, W) array b with P(b=0) = drop_probability."""

    data: np.ndarray
    drop_probability: float

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dropped_count(self) -> int:
        return int(self.data.size - self.data.sum())


@dataclass(frozen=True)
class TrainingPair:
    """Complementary views of one image: input = b*y, target = (1-b)*y."""

    input: np.ndarray
    target: np.ndarray
    mask: BernoulliMask


def sample_mask(height: int, width: int, drop_probability: float,
                rng: RngStream, draw_index: int = 0) -> BernoulliMask:
    """Draw an independent per-pixel mask; same (rng, draw_index) -> same mask.

    p = 0 (all pixels kept) is permitted for testing only.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"mask dims must be positive, got {height}x{width}")
    if not 0.0 <= drop_probability < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {drop_probability}")
    gen = rng.generator(draw_index)
    keep = gen.random((height, width)) >= drop_probability
    return BernoulliMask(keep.astype(np.float32), drop_probability)


def make_pair(y: np.ndarray, mask: BernoulliMask) -> TrainingPair:
    """Split y into the masked input and its complement (exactly input+target == y)."""
    y = np.asarray(y)
    spatial = y.shape[:2]
    if mask.shape != spatial:
        raise ValueError(f"mask shape {mask.shape} does not match image spatial dims {spatial}")
    b = mask.data if y.ndim == 2 else mask.data[:, :, None]
    b = b.astype(y.dtype)
    return TrainingPair(input=y * b, target=y * (1.0 - b), mask=mask)
