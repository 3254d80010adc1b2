"""8-bit PNG image I/O and plain-text run manifests."""

from __future__ import annotations

import os
from datetime import datetime, timezone
from typing import Mapping

import numpy as np
from PIL import Image

_SUPPORTED_MODES = {"L", "RGB"}


class UnsupportedImageError(ValueError):
    """Raised for anything other than an 8-bit grayscale or RGB PNG."""


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit gray or RGB PNG to float32 (H, W, C) in [0, 1]."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such image file: {path}")
    with Image.open(path) as im:
        if im.format != "PNG":
            raise UnsupportedImageError(f"{path}: expected a PNG file, got {im.format}")
        if im.mode not in _SUPPORTED_MODES:
            raise UnsupportedImageError(
                f"{path}: unsupported PNG mode '{im.mode}'; only 8-bit grayscale (L) and RGB are handled")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32) / 255.0


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Clamp to [0, 1], scale by 255, round half-to-even, write 8-bit PNG."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"write_png: expected (H, W) or (H, W, {{1,3}}) array, got shape {np.asarray(img).shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("write_png: image contains NaN or Inf")
    quantized = np.rint(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if quantized.shape[2] == 1:
        Image.fromarray(quantized[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def write_run_manifest(path: str | os.PathLike, entries: Mapping[str, object]) -> None:
    """Append one key=value record block; records are never rewritten."""
    lines = [f"timestamp={datetime.now(timezone.utc).isoformat()}"]
    lines.extend(f"{key}={value}" for key, value in entries.items())
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n\n")
