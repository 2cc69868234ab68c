"""Dense (batch, channel, height, width) tensors with a reverse-mode tape.

Every op here takes Tensors, returns a new Tensor, and, while gradient
recording is on, remembers its inputs together with a closure mapping the
output gradient to input gradients. ``backward`` walks that record in reverse
topological order and accumulates into leaf ``.grad`` arrays.

Values are float32. Ops never force a dtype on their outputs, so feeding
float64 leaves runs the same graph in float64 (used by the finite-difference
checks).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

DTYPE = np.float32

_grad_enabled = True

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A named leaf whose gradient buffer always exists and matches its shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> "Parameter":
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class ComplexGrid:
    """Half spectrum of a real (N, C, H, W) tensor: width is W // 2 + 1."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ContractError(f"real part {self.real.shape} and imaginary part {self.imag.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward) -> Tensor:
    """Wrap an op result, attaching it to the tape when any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record(x.data + x.data.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype, copy=False)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def log_sigmoid(x: Tensor, eps: float = 0.0) -> Tensor:
    """log(clamp(sigmoid(x), eps, 1 - eps)), evaluated in float64 so saturated scores keep their digits."""
    z = x.data.astype(np.float64)
    with np.errstate(invalid="ignore"):  # NaN scores pass through to the caller's finite check
        val = -np.logaddexp(0.0, -z)
    lo = np.log(eps) if eps > 0 else -np.inf
    hi = np.log1p(-eps)
    inside = (val >= lo) & (val <= hi)
    slope = np.where(inside, 0.5 * (1.0 - np.tanh(0.5 * z)), 0.0).astype(x.dtype)
    return record(np.clip(val, lo, hi).astype(x.dtype), (x,), lambda g: (g * slope,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi).astype(x.dtype, copy=False), (x,), lambda g: (g * inside,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (no gradient flows to it)."""
    c = np.asarray(c, dtype=x.dtype)
    out = x.data * c
    if out.shape != x.shape:
        raise ContractError(f"mul_const: constant {c.shape} does not broadcast to {x.shape}")
    return record(out, (x,), lambda g: (g * c,))


def mul_map(x: Tensor, m: Tensor) -> Tensor:
    """Multiply (N, C, H, W) features by an (N, 1, H, W) map, broadcast over channels."""
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:]:
        raise ContractError(f"mul_map: map {m.shape} does not match features {x.shape}")
    return record(
        x.data * m.data,
        (x, m),
        lambda g: (g * m.data, (g * x.data).sum(axis=1, keepdims=True)),
    )


def div_by_scalar(x: Tensor, s: Tensor) -> Tensor:
    """``x / s`` for a single-element tensor ``s``."""
    if s.data.size != 1:
        raise ContractError(f"div_by_scalar: divisor must have one element, got {s.shape}")
    sv = s.data.reshape(())
    out = x.data / sv

    def back(g):
        return g / sv, np.reshape(-(g * out).sum() / sv, s.shape)

    return record(out, (x, s), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return record(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    base = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ContractError(f"concat_channels: {t.shape} incompatible with {base}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    return record(np.concatenate([t.data for t in xs], axis=1), tuple(xs), lambda g: np.split(g, splits, axis=1))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record(x.data[:, start:stop].copy(), (x,), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of both spatial axes."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matrix product of (B, M, K) with (B, K, P), or with (B, P, K) when ``transpose_b``."""
    bd = np.swapaxes(b.data, 1, 2) if transpose_b else b.data
    if a.ndim != 3 or bd.ndim != 3 or a.shape[0] != bd.shape[0] or a.shape[2] != bd.shape[1]:
        raise ContractError(f"bmm: cannot multiply {a.shape} by {b.shape} (transpose_b={transpose_b})")
    out = a.data @ bd

    def back(g):
        ga = g @ np.swapaxes(bd, 1, 2)
        gb = np.swapaxes(a.data, 1, 2) @ g
        return ga, (np.swapaxes(gb, 1, 2) if transpose_b else gb)

    return record(out, (a, b), back)


# ---------------------------------------------------------------------------
# normalisation and attention helpers


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), back)


def l2_normalize_last(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    y = x.data / denom

    def back(g):
        proj = np.where(clamped, 0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return record(y, (x,), back)


def layer_norm_channels(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each pixel's channel vector to zero mean and unit variance, then apply per-channel affine."""
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ContractError(f"layer_norm_channels: gain {gain.shape}/shift {shift.shape} need ({c},) for input {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gv = gain.data.reshape(1, c, 1, 1)
    out = xhat * gv + shift.data.reshape(1, c, 1, 1)

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record(out, (x, gain, shift), back)


# ---------------------------------------------------------------------------
# convolution

CONV_MODES = ("pointwise_1x1", "depthwise_3x3", "full_3x3")


def _expected_kernel(mode: str, c_in: int, kshape: tuple[int, ...]) -> tuple[int, ...]:
    if mode == "pointwise_1x1":
        return (kshape[0], c_in, 1, 1)
    if mode == "depthwise_3x3":
        return (c_in, 1, 3, 3)
    if mode == "full_3x3":
        return (kshape[0], c_in, 3, 3)
    raise ContractError(f"unknown conv mode {mode!r}; expected one of {CONV_MODES}")


def _scatter_windows(dwin: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of sliding_window_view[..., ::stride, ::stride]; dwin is (N, C, Ho, Wo, k, k)."""
    out = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dwin[..., i, j]
    return out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    mode: str = "full_3x3",
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Kernels are (out, in, 1, 1) for ``pointwise_1x1``, (C, 1, 3, 3) for
    ``depthwise_3x3`` (one filter per channel) and (out, in, 3, 3) for
    ``full_3x3``. Bias, if given, has one value per output channel.
    """
    if x.ndim != 4:
        raise ContractError(f"conv2d expects (N, C, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    kshape = kernel.shape
    if len(kshape) != 4 or kshape != _expected_kernel(mode, c, kshape):
        raise ContractError(f"conv2d[{mode}]: kernel shape {kshape} does not fit input shape {x.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
    k = kshape[-1]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d[{mode}]: input {x.shape} too small for kernel {kshape} with padding {padding}")
    c_out = c if mode == "depthwise_3x3" else kshape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ContractError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")

    wd = kernel.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    if mode == "pointwise_1x1":
        xs = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,nchw->nohw", w2, xs, optimize=True)

        def back_core(g):
            gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            gxs = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gxp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride] = gxs
            return gxp, gw

    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        if mode == "depthwise_3x3":
            w3 = wd[:, 0]
            out = np.einsum("nchwij,cij->nchw", win, w3, optimize=True)

            def back_core(g):
                gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None]
                dwin = g[..., None, None] * w3[None, :, None, None]
                return _scatter_windows(dwin, xp.shape, k, stride, ho, wo), gw

        else:
            out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

            def back_core(g):
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
                dwin = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                return _scatter_windows(dwin, xp.shape, k, stride, ho, wo), gw

    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gxp, gw = back_core(g)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw.astype(wd.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, back)


# ---------------------------------------------------------------------------
# spectral


def _half_weights(width: int, dtype) -> np.ndarray:
    """Multiplicity of each half-spectrum column in the full spectrum."""
    m = np.full(width // 2 + 1, 2.0, dtype=dtype)
    m[0] = 1.0
    if width % 2 == 0:
        m[-1] = 1.0
    return m


def rfft2_stacked(x: Tensor) -> Tensor:
    """Unnormalised 2-D real FFT, returned as (N, 2C, H, W//2+1): real parts then imaginary parts."""
    if x.ndim != 4:
        raise ContractError(f"rfft2 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    spectrum = np.fft.rfft2(x.data, axes=(2, 3))
    out = np.concatenate([spectrum.real, spectrum.imag], axis=1).astype(x.dtype, copy=False)

    def back(g):
        gc = g[:, :c] + 1j * g[:, c:]
        full = np.zeros((n, c, h, w), dtype=np.complex128)
        full[..., : w // 2 + 1] = gc
        return (np.real(np.fft.ifft2(full, axes=(2, 3))).astype(x.dtype) * (h * w),)

    return record(out, (x,), back)


def irfft2_stacked(z: Tensor, width: int) -> Tensor:
    """Inverse of :func:`rfft2_stacked` (divides by H*W)."""
    if z.ndim != 4 or z.shape[1] % 2:
        raise ContractError(f"irfft2 expects (N, 2C, H, W//2+1), got {z.shape}")
    n, c2, h, wh = z.shape
    if width < 1 or width // 2 + 1 != wh:
        raise ContractError(f"irfft2: width {width} inconsistent with half-spectrum width {wh}")
    c = c2 // 2
    spectrum = z.data[:, :c] + 1j * z.data[:, c:]
    out = np.fft.irfft2(spectrum, s=(h, width), axes=(2, 3)).astype(z.dtype, copy=False)
    m = _half_weights(width, np.float64)

    def back(g):
        gs = np.fft.rfft2(g, axes=(2, 3)) * (m / (h * width))
        return (np.concatenate([gs.real, gs.imag], axis=1).astype(z.dtype, copy=False),)

    return record(out, (z,), back)


def rfft2(x: Tensor) -> ComplexGrid:
    stacked = rfft2_stacked(x)
    c = x.shape[1]
    return ComplexGrid(slice_channels(stacked, 0, c), slice_channels(stacked, c, 2 * c))


def irfft2(grid: ComplexGrid, width: int) -> Tensor:
    return irfft2_stacked(concat_channels([grid.real, grid.imag]), width)
