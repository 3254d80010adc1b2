"""Training loop, dropout-ensemble inference, and checkpointing.

One optimization step: draw a fresh Bernoulli mask, feed the masked image
(with the mask) through the network with dropout active, penalize the
prediction on the dropped pixels, and take an Adam step. Inference keeps
dropout active and averages many masked predictions, each realized with
its own random sub-network.
"""

from __future__ import annotations

import io
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .losses import LossConfig, QualityScorer, make_scorer, total_loss
from .network import SCALE_FACTOR, DenoiserNetwork, assemble_input, build_network
from .sampling import sample_mask
from .tensor import RngStream, Tape, Tensor, backward
from .validation import check_image

# Stream ids; inference draws must never collide with training draws.
STREAM_INIT = 0
STREAM_TRAIN_MASK = 1
STREAM_TRAIN_DROPOUT = 2
STREAM_ENSEMBLE_MASK = 3
STREAM_ENSEMBLE_DROPOUT = 4

DEFAULT_ENSEMBLE_SIZE = 500

CHECKPOINT_MAGIC = b"S2SP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss_value: float):
        super().__init__(f"non-finite loss {loss_value} at step {step}")
        self.step = step
        self.loss_value = loss_value


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the stock synthetic-noise setup."""

    steps: int = 4000
    p: float = 0.4
    lr: float = 4e-4
    lambda_iqa: float = 2e-8
    loss_variant: str = "l1"
    normalize_loss: bool = False
    gconv_enabled: bool = True
    scorer: str = "smoothtv"
    seed: int = 0
    p_mask: Optional[float] = None  # override the shared probability
    p_drop: Optional[float] = None

    @property
    def mask_probability(self) -> float:
        return self.p if self.p_mask is None else self.p_mask

    @property
    def dropout_probability(self) -> float:
        return self.p if self.p_drop is None else self.p_drop

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.mask_probability < 1.0:
            raise ValueError(f"mask probability must be in (0, 1), got {self.mask_probability}")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.dropout_probability}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        LossConfig(self.loss_variant, self.lambda_iqa, self.normalize_loss)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss_variant, self.lambda_iqa, self.normalize_loss)


class Adam:
    """Standard bias-corrected Adam over named parameter tensors."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ValueError(f"parameter '{name}' has no gradient; run backward first")
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class CropRecord:
    """Original (height, width) before padding; empty when nothing was added."""

    height: int
    width: int

    @property
    def empty(self) -> bool:
        return self.height % SCALE_FACTOR == 0 and self.width % SCALE_FACTOR == 0


def pad_to_multiple32(img: np.ndarray) -> tuple[np.ndarray, CropRecord]:
    """Reflection-pad right/bottom so both spatial dims divide by 32."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"image dims must be >= 1, got {h}x{w}")
    record = CropRecord(h, w)
    pad_h = (-h) % SCALE_FACTOR
    pad_w = (-w) % SCALE_FACTOR
    if pad_h == 0 and pad_w == 0:
        return img.copy(), record
    out = img
    for axis, pad in ((0, pad_h), (1, pad_w)):
        remaining = pad
        while remaining > 0:
            size = out.shape[axis]
            if size == 1:  # nothing to mirror; replicate the single sample
                chunk = remaining
                mode = "edge"
            else:
                chunk = min(remaining, size - 1)
                mode = "reflect"
            spec = [(0, 0)] * out.ndim
            spec[axis] = (0, chunk)
            out = np.pad(out, spec, mode=mode)
            remaining -= chunk
    return out, record


def crop_to_record(img: np.ndarray, record: CropRecord) -> np.ndarray:
    """Exact inverse of :func:`pad_to_multiple32`."""
    return np.asarray(img)[:record.height, :record.width].copy()


@dataclass
class Checkpoint:
    """Named parameter tensors plus the config needed to rebuild the network."""

    channels: int
    gconv_enabled: bool
    p_drop: float
    seed: int
    steps: int
    parameters: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    def build_network(self) -> DenoiserNetwork:
        net = build_network(self.channels, self.p_drop, self.gconv_enabled,
                            RngStream(self.seed, STREAM_INIT))
        net.load_parameters(self.parameters)
        return net

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", self.version))
        buf.write(struct.pack("<IIfQQ", self.channels, int(self.gconv_enabled),
                              self.p_drop, self.seed, self.steps))
        buf.write(struct.pack("<I", len(self.parameters)))
        for name, arr in self.parameters.items():
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<I", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as f:
            data = f.read()
        return cls.from_bytes(data, source=str(path))

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:4]) != CHECKPOINT_MAGIC:
            raise ValueError(f"{source}: not a checkpoint file (bad magic)")
        off = 4

        def unpack(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            values = struct.unpack_from(fmt, view, off)
            off += size
            return values

        (version,) = unpack("<I")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{source}: unsupported checkpoint version {version}")
        channels, gconv, p_drop, seed, steps = unpack("<IIfQQ")
        (count,) = unpack("<I")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = unpack("<I")
            name = bytes(view[off:off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = unpack("<I")
            dims = unpack(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            params[name] = arr.astype(np.float32)
        if off != len(data):
            raise ValueError(f"{source}: {len(data) - off} trailing bytes after last tensor")
        ckpt = cls(channels, bool(gconv), float(p_drop), int(seed), int(steps), params, version)
        ckpt.build_network()  # shape/name validation against the declared config
        return ckpt


def train(y: np.ndarray, cfg: TrainConfig,
          scorer: Optional[QualityScorer] = None,
          progress: Optional[Callable[[int, float], None]] = None,
          ) -> tuple[Checkpoint, list[float]]:
    """Fit the denoiser to a single noisy image in [0, 1].

    Returns the trained checkpoint and the per-step loss trace. Identical
    (image, config) always produce bit-identical checkpoints.
    """
    cfg.validate()
    img = check_image(y)
    padded, _ = pad_to_multiple32(img)
    h, w, c = padded.shape

    rng = RngStream(cfg.seed)
    net = build_network(c, cfg.dropout_probability, cfg.gconv_enabled,
                        rng.substream(STREAM_INIT))
    if scorer is None:
        scorer = make_scorer(cfg.scorer)
    loss_cfg = cfg.loss_config()
    optimizer = Adam(net.parameters(), cfg.lr)
    mask_stream = rng.substream(STREAM_TRAIN_MASK)
    dropout_stream = rng.substream(STREAM_TRAIN_DROPOUT)
    padded_chw = np.ascontiguousarray(padded.transpose(2, 0, 1))

    trace: list[float] = []
    for step in range(cfg.steps):
        mask = sample_mask(h, w, cfg.mask_probability, mask_stream, step)
        masked_chw = padded_chw * mask.data[None, :, :]
        with Tape() as tape:
            pred = net.forward(assemble_input(masked_chw, mask.data),
                               dropout_active=True,
                               dropout_rng=dropout_stream.generator(step))
            loss = total_loss(pred, padded, mask, scorer, loss_cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        net.zero_grad()
        backward(loss, tape)
        optimizer.step()
        trace.append(value)
        if progress is not None:
            progress(step, value)

    params = {name: t.data.copy() for name, t in net.parameters()}
    ckpt = Checkpoint(c, cfg.gconv_enabled, cfg.dropout_probability,
                      cfg.seed, cfg.steps, params)
    return ckpt, trace


def denoise_ensemble(ckpt: Checkpoint, y: np.ndarray, n_instances: int = DEFAULT_ENSEMBLE_SIZE,
                     p_mask: Optional[float] = None, seed: int = 0,
                     threads: Optional[int] = None) -> np.ndarray:
    """Average n dropout-perturbed predictions over fresh Bernoulli masks.

    Every instance runs dropout-active with its own random sub-network and
    mask; partial results are summed in instance order so the output is
    identical regardless of thread count. The average is clamped to [0, 1].
    """
    if n_instances < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n_instances}")
    img = check_image(y, allow_outside_range=True)
    if img.shape[2] != ckpt.channels:
        raise ValueError(f"checkpoint expects {ckpt.channels} channels, image has {img.shape[2]}")
    padded, record = pad_to_multiple32(img)
    h, w, _ = padded.shape
    padded_chw = np.ascontiguousarray(padded.transpose(2, 0, 1))

    net = ckpt.build_network()
    rng = RngStream(seed)
    mask_stream = rng.substream(STREAM_ENSEMBLE_MASK)
    dropout_stream = rng.substream(STREAM_ENSEMBLE_DROPOUT)
    if p_mask is None:
        p_mask = ckpt.p_drop

    def predict(n: int) -> np.ndarray:
        mask_arr = sample_mask(h, w, p_mask, mask_stream, n).data
        masked = padded_chw * mask_arr[None, :, :]
        out = net.forward(assemble_input(masked, mask_arr),
                          dropout_active=True,
                          dropout_rng=dropout_stream.generator(n))
        return out.data

    if threads is None:
        threads = os.cpu_count() or 1
    threads = max(1, min(threads, n_instances))
    if threads == 1:
        predictions = map(predict, range(n_instances))
        total = np.zeros((ckpt.channels, h, w), dtype=np.float64)
        for p in predictions:
            total += p
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(predict, range(n_instances)))
        total = np.zeros((ckpt.channels, h, w), dtype=np.float64)
        for p in results:  # fixed instance order keeps the sum canonical
            total += p

    avg = (total / n_instances).astype(np.float32).transpose(1, 2, 0)
    return np.clip(crop_to_record(avg, record), 0.0, 1.0)
