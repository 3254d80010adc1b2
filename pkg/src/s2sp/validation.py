"""Input validation helpers shared by the pipeline, estimator and CLI."""

from __future__ import annotations

import numpy as np

VALID_CHANNELS = (1, 3)
_RANGE_SLACK = 1e-6  # tolerate float round-off at the [0, 1] boundaries


def check_image(x, name: str = "image", allow_outside_range: bool = False) -> np.ndarray:
    """Coerce to a float32 (H, W, C) array with C in {1, 3}.

    Grayscale (H, W) input gains a channel axis. Values must be finite and,
    unless ``allow_outside_range``, inside [0, 1] up to round-off (then
    clipped exactly).
    """
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected a (H, W) or (H, W, C) array, got shape {np.asarray(x).shape}")
    if arr.shape[2] not in VALID_CHANNELS:
        raise ValueError(f"{name}: channel count must be one of {VALID_CHANNELS}, got {arr.shape[2]}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: spatial dims must be positive, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf values")
    if not allow_outside_range:
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
            raise ValueError(f"{name}: values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def check_probability(p: float, name: str = "p", allow_zero: bool = False) -> float:
    p = float(p)
    low_ok = p >= 0.0 if allow_zero else p > 0.0
    if not (low_ok and p < 1.0):
        bounds = "[0, 1)" if allow_zero else "(0, 1)"
        raise ValueError(f"{name} must be in {bounds}, got {p}")
    return p
