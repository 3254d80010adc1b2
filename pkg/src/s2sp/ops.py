"""Primitive layers over (C, H, W) feature maps.

Convolutions are stride-1 with odd kernels and mirror-reflection padding
of (k-1)/2, so spatial size is always preserved. The gated variant fuses
the feature and gating branches over one shared im2col buffer, which is
where most of the training time goes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, apply_op, as_tensor


def _require_chw(x: Tensor, name: str) -> None:
    if x.data.ndim != 3:
        raise ValueError(f"{name}: expected a (C, H, W) tensor, got shape {x.shape}")


def _reflect_index(n: int, pad: int) -> np.ndarray:
    """Source index for each padded position along one axis of length n.

    Mirror reflection about the edge samples (edge not repeated), extended
    as a triangular wave so degenerate sizes stay defined: a length-1 axis
    replicates its only sample.
    """
    if n == 1:
        return np.zeros(n + 2 * pad, dtype=np.intp)
    q = np.abs(np.arange(-pad, n + pad)) % (2 * (n - 1))
    return np.where(q >= n, 2 * (n - 1) - q, q)


def reflect_pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-reflect pad rows/cols of a (C, H, W) array (edge not repeated)."""
    if pad == 0:
        return x
    idx_h = _reflect_index(x.shape[1], pad)
    idx_w = _reflect_index(x.shape[2], pad)
    return x[:, idx_h][:, :, idx_w]


def _reflect_pad_backward(gp: np.ndarray, pad: int) -> np.ndarray:
    """Fold gradients from the reflected border back onto their sources."""
    if pad == 0:
        return gp
    c, hp, wp = gp.shape
    h, w = hp - 2 * pad, wp - 2 * pad
    idx_h = _reflect_index(h, pad)
    idx_w = _reflect_index(w, pad)
    g = gp[:, :, pad:pad + w].copy()
    for j in range(pad):
        g[:, :, idx_w[j]] += gp[:, :, j]
        g[:, :, idx_w[pad + w + j]] += gp[:, :, pad + w + j]
    out = g[:, pad:pad + h, :].copy()
    for i in range(pad):
        out[:, idx_h[i], :] += g[:, i, :]
        out[:, idx_h[pad + h + i], :] += g[:, pad + h + i, :]
    return out


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*k*k, H*W) patch matrix for stride-1 windows."""
    c = xp.shape[0]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    h, w = win.shape[1], win.shape[2]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(grad_cols: np.ndarray, c: int, hp: int, wp: int, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    h, w = hp - k + 1, wp - k + 1
    g = np.zeros((c, hp, wp), dtype=grad_cols.dtype)
    gc = grad_cols.reshape(c, k, k, h, w)
    for di in range(k):
        for dj in range(k):
            g[:, di:di + h, dj:dj + w] += gc[:, di, dj]
    return g


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor, pad, name: str = "conv2d") -> int:
    _require_chw(x, f"{name} input")
    if weight.data.ndim != 4:
        raise ValueError(f"{name}: weight must be (Cout, Cin, k, k), got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"{name}: kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"{name}: kernel size must be odd, got {kh}")
    if cin != x.shape[0]:
        raise ValueError(f"{name}: weight expects {cin} input channels, input has {x.shape[0]}")
    if bias.shape != (cout,):
        raise ValueError(f"{name}: bias must have shape ({cout},), got {bias.shape}")
    expected = (kh - 1) // 2
    if pad is None:
        pad = expected
    if pad != expected:
        raise ValueError(f"{name}: pad must be (k-1)/2 = {expected} to preserve shape, got {pad}")
    return pad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: int | None = None) -> Tensor:
    """Shape-preserving 2-D convolution with reflection padding.

    ``O[c] = bias[c] + sum_cin weight[c, cin] * padded_input[cin]`` with a
    stride-1 kernel; differentiable in input, weight and bias.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    pad = _check_conv_args(x, weight, bias, pad)
    cout, cin, k, _ = weight.shape
    _, h, w = x.shape

    xp = reflect_pad2d(x.data, pad)
    cols = _im2col(xp, k)
    w_mat = weight.data.reshape(cout, -1)
    out = w_mat @ cols
    out += bias.data[:, None]
    out = out.reshape(cout, h, w)

    need_x = x.requires_grad
    hp, wp = xp.shape[1], xp.shape[2]

    def backward(g):
        g_mat = g.reshape(cout, -1)
        grad_w = (g_mat @ cols.T).reshape(weight.shape)
        grad_b = g_mat.sum(axis=1)
        grad_x = None
        if need_x:
            grad_cols = w_mat.T @ g_mat
            grad_x = _reflect_pad_backward(_col2im(grad_cols, cin, hp, wp, k), pad)
        return (grad_x, grad_w, grad_b)

    return apply_op("conv2d", out, (x, weight, bias), backward)


def gated_conv2d(x: Tensor, weight_f: Tensor, bias_f: Tensor,
                 weight_g: Tensor, bias_g: Tensor, slope: float = 0.2) -> Tensor:
    """Gated convolution: ``lrelu(conv_f(x)) * sigmoid(conv_g(x))``.

    Both branches share one im2col buffer and a single fused GEMM, and the
    backward pass runs one col2im instead of two.
    """
    x = as_tensor(x)
    weight_f, bias_f = as_tensor(weight_f), as_tensor(bias_f)
    weight_g, bias_g = as_tensor(weight_g), as_tensor(bias_g)
    if weight_f.shape != weight_g.shape:
        raise ValueError(f"gated_conv2d: branch weights must match, got {weight_f.shape} vs {weight_g.shape}")
    pad = _check_conv_args(x, weight_f, bias_f, None, "gated_conv2d")
    _check_conv_args(x, weight_g, bias_g, None, "gated_conv2d")
    if not 0.0 < slope < 1.0:
        raise ValueError(f"gated_conv2d: slope must be in (0, 1), got {slope}")
    cout, cin, k, _ = weight_f.shape
    _, h, w = x.shape

    xp = reflect_pad2d(x.data, pad)
    cols = _im2col(xp, k)
    w_stack = np.concatenate(
        [weight_f.data.reshape(cout, -1), weight_g.data.reshape(cout, -1)], axis=0)
    pre = w_stack @ cols
    f = pre[:cout] + bias_f.data[:, None]
    g_pre = pre[cout:] + bias_g.data[:, None]
    s = _stable_sigmoid(g_pre)
    phi = np.where(f > 0, f, f * np.asarray(slope, dtype=f.dtype))
    out = (phi * s).reshape(cout, h, w)

    need_x = x.requires_grad
    hp, wp = xp.shape[1], xp.shape[2]

    def backward(g):
        g_mat = g.reshape(cout, -1)
        df = g_mat * s * np.where(f > 0, 1.0, slope).astype(f.dtype)
        dg = g_mat * phi * s * (1.0 - s)
        grad_wf = (df @ cols.T).reshape(weight_f.shape)
        grad_wg = (dg @ cols.T).reshape(weight_g.shape)
        grad_bf = df.sum(axis=1)
        grad_bg = dg.sum(axis=1)
        grad_x = None
        if need_x:
            grad_cols = w_stack.T @ np.concatenate([df, dg], axis=0)
            grad_x = _reflect_pad_backward(_col2im(grad_cols, cin, hp, wp, k), pad)
        return (grad_x, grad_wf, grad_bf, grad_wg, grad_bg)

    return apply_op("gated_conv2d", out, (x, weight_f, bias_f, weight_g, bias_g), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope*x)``; the multiplier at exactly 0 is slope."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, d * np.asarray(slope, dtype=d.dtype))

    def backward(g):
        return (g * np.where(d > 0, 1.0, slope).astype(d.dtype),)

    return apply_op("leaky_relu", out, (x,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; both branches rearrange to 1/(1+exp(-x))
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)

    def backward(g):
        return (g * (out * (1.0 - out)),)

    return apply_op("sigmoid", out, (x,), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; gradient goes to the first argmax per window."""
    x = as_tensor(x)
    _require_chw(x, "max_pool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = win.argmax(axis=3)  # first max in (0,0),(0,1),(1,0),(1,1) scan order
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def backward(g):
        g4 = np.zeros((c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=3)
        return (g4.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return apply_op("max_pool2", out, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling; backward sums each 2x2 block."""
    x = as_tensor(x)
    _require_chw(x, "upsample_nearest2")
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return apply_op("upsample_nearest2", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack the channels of ``a`` then ``b``; spatial dims must match."""
    a, b = as_tensor(a), as_tensor(b)
    _require_chw(a, "concat_channels")
    _require_chw(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial dims differ, {a.shape} vs {b.shape}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        return (g[:ca], g[ca:])

    return apply_op("concat_channels", out, (a, b), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, active: bool = True) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    The realized mask comes from ``rng`` in draw order, so recreating the
    generator replays the identical mask. Inactive mode is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not active or p == 0.0:
        out = x.data.copy()

        def backward_id(g):
            return (g,)

        return apply_op("dropout", out, (x,), backward_id)

    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = rng.random(x.shape, dtype=draw_dtype) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mult = keep.astype(x.dtype) * scale
    out = x.data * mult

    def backward(g):
        return (g * mult,)

    return apply_op("dropout", out, (x,), backward)


def spatial_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along a spatial axis (1=rows, 2=cols) of (C, H, W)."""
    x = as_tensor(x)
    _require_chw(x, "spatial_diff")
    if axis not in (1, 2):
        raise ValueError(f"spatial_diff: axis must be 1 or 2, got {axis}")
    out = np.diff(x.data, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        if axis == 1:
            gx[:, 1:, :] += g
            gx[:, :-1, :] -= g
        else:
            gx[:, :, 1:] += g
            gx[:, :, :-1] -= g
        return (gx,)

    return apply_op("spatial_diff", out, (x,), backward)
