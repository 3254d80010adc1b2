"""Central finite-difference verification of every differentiable primitive.

All checks run in float64 with h=1e-5 against a relative-error budget of
1e-4. Fixtures keep values away from non-smooth points (ReLU kinks, pool
ties, the |.| smoothing scale), otherwise finite differences themselves
are invalid. The end-to-end network check samples coordinates per
parameter tensor; exhaustive differencing over ~1M parameters is not a
desk-scale operation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .losses import (LossConfig, SmoothTVScorer, iqa_loss,
                     masked_residual_loss, total_loss)
from .network import build_network
from .tensor import RngStream, Tape, Tensor, backward

DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5
_REL_FLOOR = 1e-6  # treat tiny a~b~0 pairs as absolute comparisons


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    coords_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), _REL_FLOOR)


def _check(name: str, loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
           coords_per_tensor: Optional[int] = None, tol: float = DEFAULT_TOLERANCE,
           h: float = FD_STEP, seed: int = 0) -> CheckResult:
    """Compare tape gradients of loss_fn against central differences."""
    start = time.perf_counter()
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)

    picker = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for p in params:
        flat = p.data.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = picker.choice(flat.size, size=coords_per_tensor, replace=False)
        grads = p.grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lo_plus = loss_fn().item()
            flat[i] = orig - h
            lo_minus = loss_fn().item()
            flat[i] = orig
            fd = (lo_plus - lo_minus) / (2.0 * h)
            worst = max(worst, _rel_error(float(grads[i]), fd))
            checked += 1
    return CheckResult(name, worst, tol, checked, time.perf_counter() - start)


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _primitive_checks(tol: float) -> list[CheckResult]:
    rng = np.random.default_rng(12345)
    results = []

    x = _param(rng, (3, 8, 8))
    w = _param(rng, (4, 3, 3, 3), 0.4)
    b = _param(rng, (4,), 0.2)
    wt = rng.standard_normal((4, 8, 8))
    results.append(_check("conv2d", lambda: _weighted_sum(ops.conv2d(x, w, b), wt),
                          [x, w, b], tol=tol))

    wg = _param(rng, (4, 3, 3, 3), 0.4)
    bg = _param(rng, (4,), 0.2)
    results.append(_check("gated_conv", lambda: _weighted_sum(
        ops.gated_conv2d(x, w, b, wg, bg), wt), [x, w, b, wg, bg], tol=tol))

    xs = _param(rng, (2, 6, 6))
    ws = rng.standard_normal((2, 6, 6))
    results.append(_check("leaky_relu", lambda: _weighted_sum(ops.leaky_relu(xs, 0.2), ws),
                          [xs], tol=tol))
    results.append(_check("sigmoid", lambda: _weighted_sum(ops.sigmoid(xs), ws),
                          [xs], tol=tol))

    wp = rng.standard_normal((2, 3, 3))
    results.append(_check("max_pool", lambda: _weighted_sum(ops.max_pool2(xs), wp),
                          [xs], tol=tol))
    wu = rng.standard_normal((2, 12, 12))
    results.append(_check("upsample", lambda: _weighted_sum(ops.upsample_nearest2(xs), wu),
                          [xs], tol=tol))

    xc = _param(rng, (3, 6, 6))
    wc = rng.standard_normal((5, 6, 6))
    results.append(_check("concat", lambda: _weighted_sum(ops.concat_channels(xs, xc), wc),
                          [xs, xc], tol=tol))

    drop_stream = RngStream(7, 99)
    results.append(_check("dropout_fixed_mask", lambda: _weighted_sum(
        ops.dropout(xs, 0.4, drop_stream.generator(0), active=True), ws), [xs], tol=tol))

    # Masked residual losses: keep residual magnitudes comfortably above the
    # |.| smoothing scale so finite differences never straddle the kink.
    y_ref = rng.random((6, 6, 2))
    sign = np.where(rng.random((2, 6, 6)) < 0.5, -1.0, 1.0)
    resid = sign * rng.uniform(0.05, 0.5, size=(2, 6, 6))
    pred = Tensor(y_ref.transpose(2, 0, 1) + resid, requires_grad=True, dtype=np.float64)
    mask = (rng.random((6, 6)) < 0.6).astype(np.float64)
    results.append(_check("masked_l1_loss", lambda: masked_residual_loss(
        pred, y_ref, mask, "l1", smooth_eps=1e-8), [pred], tol=tol))
    results.append(_check("masked_l2_loss", lambda: masked_residual_loss(
        pred, y_ref, mask, "l2", normalize=True), [pred], tol=tol))

    # Quality scorer: moderate beta and a wide smoothing width keep the
    # exponential away from saturation and the TV kinks away from h.
    scorer = SmoothTVScorer(beta=3.0, eps=0.05)
    t = np.linspace(0.0, 3.0, 10)
    base = 0.5 + 0.3 * np.sin(t[None, :] + 2.0 * t[:, None])
    img = Tensor(base[None, :, :] + 0.05 * rng.standard_normal((1, 10, 10)),
                 requires_grad=True, dtype=np.float64)
    results.append(_check("smoothtv_scorer", lambda: iqa_loss(scorer, img), [img], tol=tol))
    return results


def _end_to_end_check(tol: float) -> CheckResult:
    rng = np.random.default_rng(2024)
    stream = RngStream(11)
    net = build_network(1, p_drop=0.3, gconv_enabled=True,
                        rng=stream.substream(0), dtype=np.float64)

    t = np.linspace(0.0, 4.0, 32)
    clean = 0.5 + 0.25 * np.sin(t[None, :]) * np.cos(1.5 * t[:, None])
    y = np.clip(clean + 0.08 * rng.standard_normal((32, 32)), 0.0, 1.0)[:, :, None]
    mask = (rng.random((32, 32)) >= 0.4).astype(np.float64)
    masked = Tensor((y[:, :, 0] * mask)[None, :, :], requires_grad=True, dtype=np.float64)

    cfg = LossConfig(variant="l1", lambda_iqa=1e-3, smooth_eps=1e-3)
    scorer = SmoothTVScorer(beta=3.0, eps=0.05)
    drop_stream = stream.substream(1)

    def loss_fn() -> Tensor:
        tiled = Tensor(np.broadcast_to(mask, (1, 32, 32)).copy())
        net_input = ops.concat_channels(masked, tiled)
        pred = net.forward(net_input, dropout_active=True, dropout_rng=drop_stream.generator(0))
        return total_loss(pred, y, mask, scorer, cfg)

    params = [t for _, t in net.parameters()] + [masked]
    return _check("end_to_end_network", loss_fn, params, coords_per_tensor=4, tol=tol)


def run_all(tol: float = DEFAULT_TOLERANCE, include_end_to_end: bool = True) -> list[CheckResult]:
    """Run every primitive check (and the full-network check) at ``tol``."""
    results = _primitive_checks(tol)
    if include_end_to_end:
        results.append(_end_to_end_check(tol))
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<20s} max_rel={r.max_rel_error:.3e} "
                     f"tol={r.tolerance:.0e} coords={r.coords_checked} ({r.seconds:.2f}s)")
    return "\n".join(lines)
