"""Dense tensors with define-by-run reverse-mode differentiation.

Tensors are plain numpy arrays. A :class:`Variable` wraps one and, when an
operation touches a variable that requires gradients, the operation appends a
record to the active :class:`Tape`. :func:`backward` replays the tape in
reverse. Only the operator set needed by the AddUNet models is provided; there
is no broadcasting beyond multiplication by a scalar variable.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class DomainError(ValueError):
    """An operand lies outside the domain of an operation (e.g. sqrt of a negative)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


# finiteness hook: when enabled every op output is checked
CHECK_FINITE = False


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    global CHECK_FINITE
    old = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = old


class Variable:
    """A tensor value together with its gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value: Tensor = arr
        self.grad: Tensor | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Variable) and other.value.ndim == 0 and self.value.ndim != 0:
            return scale(self, other)
        return mul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[Tensor], Sequence[Tensor | None]]


@dataclass
class Tape:
    """Ordered operation records; inputs always precede outputs."""

    records: list[Record] = field(default_factory=list)
    enabled: bool = True

    def push(self, op: str, inputs: tuple[Variable, ...], output: Variable, backward) -> None:
        output._tape = self
        output.node_id = next(_ids)
        self.records.append(Record(op, inputs, output, backward))

    def reset(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape):
    """Route recording to ``tape`` for the duration of the block."""
    old = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = old


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    old = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = old


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _emit(op: str, inputs: tuple[Variable, ...], value: Tensor, backward) -> Variable:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(v.value)) for v in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    needs = any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs)
    tape = active_tape()
    if needs and tape.enabled:
        tape.push(op, inputs, out, backward)
    return out


def _same_shape(op: str, a: Variable, b: Variable) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Variable:
    """Elementwise product of two equally shaped tensors."""
    a, b = as_variable(a), as_variable(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a, s) -> Variable:
    """Multiply a tensor by a scalar variable; differentiable in both."""
    a, s = as_variable(a), as_variable(s)
    if s.value.size != 1:
        raise ShapeError(f"scale: expected a scalar factor, got shape {s.shape}")
    av, sv = a.value, s.value

    def backward(g):
        return g * sv.reshape(()), np.asarray(np.sum(g * av)).reshape(sv.shape)

    return _emit("scale", (a, s), av * sv.reshape(()), backward)


def add_const(a, c: float) -> Variable:
    a = as_variable(a)
    return _emit("add_const", (a,), a.value + a.value.dtype.type(c), lambda g: (g,))


def sqrt(a) -> Variable:
    a = as_variable(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.value)
    return _emit("sqrt", (a,), out, lambda g: (g / (2 * out),))


def relu(a) -> Variable:
    a = as_variable(a)
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0).astype(a.dtype), lambda g: (g * mask,))


def softplus(a) -> Variable:
    """ln(1 + e^x), evaluated without overflow."""
    a = as_variable(a)
    x = a.value
    out = np.logaddexp(x.dtype.type(0), x)
    sig = np.exp(-np.logaddexp(x.dtype.type(0), -x))
    return _emit("softplus", (a,), out, lambda g: (g * sig,))


def mean_all(a) -> Variable:
    a = as_variable(a)
    n = a.value.size
    shape, dt = a.shape, a.dtype
    return _emit(
        "mean_all", (a,), np.asarray(a.value.mean(), dtype=dt),
        lambda g: (np.full(shape, g / n, dtype=dt),),
    )


def sum_all(a) -> Variable:
    a = as_variable(a)
    shape, dt = a.shape, a.dtype
    return _emit(
        "sum_all", (a,), np.asarray(a.value.sum(), dtype=dt),
        lambda g: (np.full(shape, g, dtype=dt),),
    )


# ------------------------------------------------------------------- spatial


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: Tensor, k: int, stride: int, ho: int, wo: int) -> Tensor:
    # (B, C, Ho, Wo, k, k) view over the padded input
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Variable:
    """2-D cross-correlation (no kernel flip) of a B x Cin x H x W batch."""
    x, kernel, bias = as_variable(x), as_variable(kernel), as_variable(bias)
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, cin, H, W = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} (input shape {x.shape}) "
                         f"!= kernel channels {kcin} (kernel shape {kernel.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding nonnegative")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {H}x{W} (padding {padding})")
    ho, wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.value, pad) if padding else x.value
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, cin * k * k)
    wmat = kernel.value.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(B, ho, wo, cout).transpose(0, 3, 1, 2) + bias.value[None, :, None, None]
    out = np.ascontiguousarray(out)
    kshape, xpshape = kernel.shape, xp.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, cout)
        gk = (gm.T @ cols).reshape(kshape)
        gb = g.sum(axis=(0, 2, 3))
        dcols = (gm @ wmat).reshape(B, ho, wo, cin, k, k)
        gxp = np.zeros(xpshape, dtype=g.dtype)
        hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gk, gb

    return _emit("conv2d", (x, kernel, bias), out, backward)


def avg_pool2(x) -> Variable:
    """Mean over non-overlapping 2x2 windows."""
    x = as_variable(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial extent {H}x{W} must be even")
    v = x.value.reshape(B, C, H // 2, 2, W // 2, 2)
    out = v.mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25),)

    return _emit("avg_pool2", (x,), out, backward)


def upsample_nearest2(x) -> Variable:
    """Replicate every cell into a 2x2 block."""
    x = as_variable(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _emit("upsample_nearest2", (x,), out, backward)


def global_avg_pool(x) -> Variable:
    x = as_variable(x)
    B, C, H, W = x.shape
    n = H * W

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / g.dtype.type(n), (B, C, H, W)).copy(),)

    return _emit("global_avg_pool", (x,), x.value.mean(axis=(2, 3)), backward)


def dense(x, weight, bias) -> Variable:
    """Affine map ``x @ weight.T + bias`` for x of shape (B, F)."""
    x, weight, bias = as_variable(x), as_variable(weight), as_variable(bias)
    if x.value.ndim != 2 or weight.value.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: feature size {x.shape[1]} != weight input size {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    xv, wv = x.value, weight.value
    return _emit(
        "dense", (x, weight, bias), xv @ wv.T + bias.value,
        lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)),
    )


def softmax_cross_entropy(logits, labels) -> Variable:
    """Batch mean of -log softmax(logits)[label]."""
    logits = as_variable(logits)
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (B, K) logits, got {logits.shape}")
    B, K = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if K < 2:
        raise ShapeError("softmax_cross_entropy: need at least 2 classes")
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {labels.size} labels for batch of {B}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {K})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray(np.mean(logsum - shifted[rows, labels]), dtype=z.dtype)
    probs = np.exp(shifted - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / B),)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)


# ------------------------------------------------------------------ backward


def backward(loss: Variable) -> None:
    """Populate ``.grad`` on every gradient-requiring variable that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so fan-out sums
    naturally and repeated calls add up until the caller zeroes them.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: loss was not recorded on a tape")
    pending: dict[int, Tensor] = {loss.node_id: np.ones((), dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ------------------------------------------------------------------- checks


def finite_diff_check(f: Callable[[Variable], Variable], point, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``.

    The relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    Evaluate at float64; float32 differences are too noisy to be meaningful.
    """
    x0 = np.array(point, dtype=np.float64)
    with use_tape(Tape()):
        v = Variable(x0.copy(), requires_grad=True)
        backward(f(v))
        auto = v.grad if v.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with use_tape(Tape()), no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = float(f(Variable(xp.reshape(x0.shape))).value)
            fm = float(f(Variable(xm.reshape(x0.shape))).value)
            flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(auto - numeric) / denom))
