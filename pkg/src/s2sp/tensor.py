"""Dense float tensors with a reverse-mode differentiation tape.

Feature maps live in channel-first ``(C, H, W)`` layout as float32 arrays;
a float64 mode exists for finite-difference checks. Every differentiable
operation appends one record to the active :class:`Tape`, so execution
order doubles as topological order and a single reverse sweep suffices.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]
ArrayLike = Union[np.ndarray, Scalar]

_tls = threading.local()

_finite_checks = False


def enable_finite_checks(enabled: bool = True) -> None:
    """Turn on NaN/Inf assertions on every op output (test builds)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Tape currently recording on this thread, or None (inference)."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float array plus gradient bookkeeping.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad``; repeated backward calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached copy of the data."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------
    # Tensor (+|-|*) Tensor requires identical shapes; the other operand may
    # also be a scalar or a constant ndarray broadcastable to self.shape.

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal constant")
        return self * (1.0 / float(other))

    def __neg__(self):
        return apply_op("neg", -self.data, (self,), lambda g: (-g,))

    def sum(self) -> "Tensor":
        """Full reduction to a scalar tensor."""
        out = np.asarray(self.data.sum(dtype=self.dtype))

        def backward(g):
            return (np.broadcast_to(g, self.data.shape),)

        return apply_op("sum", out, (self,), backward)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def backward(g):
            return (g * out,)

        return apply_op("exp", out, (self,), backward)

    def smooth_abs(self, eps: float = 0.0) -> "Tensor":
        """Elementwise ``sqrt(x^2 + eps^2) - eps`` (plain ``|x|`` when eps=0).

        The subgradient at exactly zero is 0 in both modes.
        """
        if eps < 0:
            raise ValueError("eps must be non-negative")
        x = self.data
        if eps == 0.0:
            out = np.abs(x)

            def backward(g):
                return (g * np.sign(x),)
        else:
            root = np.sqrt(x * x + eps * eps)
            out = root - np.asarray(eps, dtype=x.dtype)

            def backward(g):
                return (g * (x / root),)

        return apply_op("smooth_abs", out, (self,), backward)


def as_tensor(value: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    """Wrap a constant; existing tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of executed primitives for one reverse sweep.

    Use as a context manager; ops executed inside record themselves. The
    record order is the execution order, which is topological by
    construction.
    """

    def __init__(self):
        self._records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str, output: Tensor,
               inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self._records.append((name, output, tuple(inputs), backward_fn))
        self._output_ids.add(id(output))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._output_ids


def apply_op(name: str, out_data: np.ndarray, inputs: Sequence[Union[Tensor, ArrayLike]],
             backward_fn: Callable) -> Tensor:
    """Create the output tensor for a primitive and record it if taping.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, aligned with ``inputs``.
    """
    tensors = tuple(as_tensor(t) for t in inputs)
    requires = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=requires)
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(name, out, tensors, backward_fn)
    return out


def _binary(name: str, a: Tensor, b, fwd, bwd) -> Tensor:
    bt = as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        if bt.shape != a.shape:
            raise ValueError(f"{name}: tensor shapes must match, got {a.shape} vs {bt.shape}")
    else:
        try:
            np.broadcast_shapes(bt.shape, a.shape)
        except ValueError:
            raise ValueError(
                f"{name}: constant of shape {bt.shape} does not broadcast to {a.shape}"
            ) from None
    out_data = fwd(a.data, bt.data)
    if out_data.shape != a.shape:
        raise ValueError(f"{name}: operand of shape {bt.shape} would broadcast beyond {a.shape}")
    ad, bd = a.data, bt.data

    def backward(g):
        ga, gb = bwd(g, ad, bd)
        if gb is not None and gb.shape != bt.shape:
            gb = _sum_to_shape(gb, bt.shape)
        return (ga, gb)

    return apply_op(name, out_data, (a, bt), backward)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Repeated calls without zeroing accumulate. The sweep visits records in
    reverse execution order exactly once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise ValueError("loss tensor was not produced on this tape")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}

    for name, out, inputs, backward_fn in reversed(tape._records):
        g_out = flowing.get(id(out))
        if g_out is None:
            continue
        grads = backward_fn(g_out)
        if len(grads) != len(inputs):
            raise RuntimeError(f"op '{name}' returned {len(grads)} gradients for {len(inputs)} inputs")
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise RuntimeError(f"op '{name}' produced gradient of shape {g.shape} for input {t.data.shape}")
            key = id(t)
            if key in flowing:
                flowing[key] = flowing[key] + g
            else:
                flowing[key] = g
                touched[key] = t

    for key, t in touched.items():
        g = flowing[key]
        t.grad = g if t.grad is None else t.grad + g


class RngStream:
    """Counter-based deterministic random stream.

    Keyed by ``(seed, stream)``; :meth:`generator` at a given ``block``
    always yields the same Philox sequence on every platform, so draws are
    reproducible and independent across (stream, block) pairs.
    """

    __slots__ = ("seed", "stream")

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream id must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)

    def generator(self, block: int = 0) -> np.random.Generator:
        if block < 0:
            raise ValueError("block index must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, block))
        return np.random.Generator(np.random.Philox(seed=ss))

    def substream(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"
