"""Dense float64 tensors with a reverse-mode differentiation tape.

Feature maps are rank-4 ``(n, c, h, w)`` arrays. Operations record a node on
the active :class:`Tape` whenever one of their inputs carries a ``var_id``;
outside a tape they are plain numpy computations.

Example::

    x = Tensor(np.random.rand(1, 3, 8, 8), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    grads = tape.backward(loss)
    grads[x.var_id]
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "cagnet_active_tape", default=None
)


class ShapeError(ValueError):
    """Rejected input: incompatible shapes or geometry."""


class Tensor:
    __slots__ = ("data", "var_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim == 0 or 0 in self.data.shape:
            raise ShapeError(f"tensor dimensions must be >= 1, got {self.data.shape}")
        self.var_id = next(_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.var_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, var_id={self.var_id})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


@dataclass
class _Node:
    out_id: int
    in_ids: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order; :meth:`backward` walks it in reverse once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def active_tape() -> Tape | None:
    return _active_tape.get()


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and, if needed, record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order. Custom differentiable ops (e.g. fused losses) use this.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.var_id = None
    tape = _active_tape.get()
    if tape is not None and any(t.var_id is not None for t in inputs):
        out.var_id = next(_ids)
        tape.nodes.append(_Node(out.var_id, tuple(t.var_id for t in inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every var reachable from it."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar (1x1x1x1), got shape {loss.shape}")
    if loss.var_id is None:
        return {}
    grads: dict[int, np.ndarray] = {loss.var_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None) if node.out_id != loss.var_id else grads.get(node.out_id)
        if g is None:
            continue
        in_grads = node.backward(g)
        for vid, ig in zip(node.in_ids, in_grads):
            if vid is None or ig is None:
                continue
            prev = grads.get(vid)
            grads[vid] = ig if prev is None else prev + ig
    # intermediate nodes were popped; what remains are leaves plus the loss itself
    return grads


# --------------------------------------------------------------------------- #
# validation helpers

def _rank4(x: Tensor, name: str = "x") -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")


def _needs(t: Tensor) -> bool:
    return t.var_id is not None


# --------------------------------------------------------------------------- #
# convolution

def _out_size(size: int, pad: int, k: int, stride: int, dilation: int) -> int:
    span = size + 2 * pad - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integer or empty conv output: size={size} pad={pad} k={k} "
            f"stride={stride} dilation={dilation}"
        )
    return span // stride + 1


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int) -> np.ndarray:
    """Valid cross-correlation of padded ``xp`` with ``w``; returns (n, cout, oh, ow)."""
    cout, cin, kh, kw = w.shape
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    n, _, hp, wp = xp.shape
    oh = (hp - ekh) // stride + 1
    ow = (wp - ekw) // stride + 1
    # bound the im2col buffer (~16M doubles) by chunking output rows
    per_row = n * cin * kh * kw * ow
    rows = max(1, min(oh, 16_000_000 // max(per_row, 1)))
    if rows >= oh:
        win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)
    out = np.empty((n, cout, oh, ow), dtype=DTYPE)
    for r0 in range(0, oh, rows):
        r1 = min(oh, r0 + rows)
        xs = xp[:, :, r0 * stride:(r1 - 1) * stride + ekh]
        win = sliding_window_view(xs, (ekh, ekw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
        out[:, :, r0:r1] = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: tuple[int, int] | int = (0, 0), dilation: int = 1) -> Tensor:
    """2-D cross-correlation with explicit zero padding.

    ``weight`` is (cout, cin, kh, kw); rectangular kernels are allowed.
    """
    _rank4(x)
    if weight.data.ndim != 4:
        raise ShapeError(f"weight must be (cout, cin, kh, kw), got {weight.shape}")
    if isinstance(pad, int):
        pad = (pad, pad)
    ph, pw = pad
    if stride < 1 or dilation < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride/dilation/pad: {stride}, {dilation}, {pad}")
    n, c, h, w_ = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    oh = _out_size(h, ph, kh, stride, dilation)
    ow = _out_size(w_, pw, kw, stride, dilation)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out = _correlate(xp, weight.data, stride, dilation)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def _backward(g):
        gx = gw = gb = None
        if bias is not None and _needs(bias):
            gb = g.sum(axis=(0, 2, 3))
        if _needs(weight):
            ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
            win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
            win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if _needs(x):
            gs = g
            if stride > 1:
                gs = np.zeros((n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=DTYPE)
                gs[:, :, ::stride, ::stride] = g
            eh, ew = dilation * (kh - 1), dilation * (kw - 1)
            gs = np.pad(gs, ((0, 0), (0, 0), (eh, eh), (ew, ew)))
            wt = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = _correlate(gs, wt, 1, dilation)
            gx = gxp[:, :, ph:ph + h, pw:pw + w_]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, _backward)


def dilated_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int,
                   pad: tuple[int, int] | int) -> Tensor:
    """Atrous convolution; ``pad = dilation*(k-1)//2`` keeps the spatial size."""
    return conv2d(x, weight, bias, stride=1, pad=pad, dilation=dilation)


# --------------------------------------------------------------------------- #
# resampling

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in).

    Output coordinate u samples input position u*(n_in-1)/(n_out-1).
    """
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=DTYPE) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _rank4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[2:]
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def _backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record(out, (x,), _backward)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    _rank4(x)
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    _rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return record(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _rank4(x)
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return record(out, (x,), _backward)


# --------------------------------------------------------------------------- #
# structural and elementwise ops

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _rank4(t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat inputs disagree on (n, h, w): {[t.shape for t in xs]}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record(out, tuple(xs), _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _rank4(x)
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] outside 0..{c}")
    out = x.data[:, start:stop].copy()

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record(out, (x,), _backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add needs equal shapes, got {x.shape} and {y.shape}")
    return record(x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if x.shape != y.shape:
        raise ShapeError(f"mul needs equal shapes, got {x.shape} and {y.shape}")
    return record(x.data * y.data, (x, y),
                  lambda g: (g * y.data if _needs(x) else None, g * x.data if _needs(y) else None))


def mul_broadcast(x: Tensor, w: Tensor) -> Tensor:
    """Multiply a feature map by channel weights (n,c,1,1) or spatial weights (n,1,h,w)."""
    _rank4(x)
    _rank4(w, "w")
    n, c, h, wd = x.shape
    if w.shape == (n, c, 1, 1):
        axes = (2, 3)
    elif w.shape == (n, 1, h, wd):
        axes = (1,)
    else:
        raise ShapeError(
            f"weight shape {w.shape} matches neither (n,c,1,1) nor (n,1,h,w) for x {x.shape}"
        )
    out = x.data * w.data

    def _backward(g):
        gx = g * w.data if _needs(x) else None
        gw = (g * x.data).sum(axis=axes, keepdims=True) if _needs(w) else None
        return gx, gw

    return record(out, (x, w), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    _rank4(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(out, (x,), _backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum(), dtype=DTYPE)
    return record(out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean(), dtype=DTYPE)
    return record(out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0] / size, dtype=DTYPE),))


def scale(x: Tensor, factor: float) -> Tensor:
    return record(x.data * factor, (x,), lambda g: (g * factor,))


# --------------------------------------------------------------------------- #
# per-channel normalization

def affine_channels(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    _rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    ga = gamma.data[None, :, None, None]
    out = x.data * ga + beta.data[None, :, None, None]

    def _backward(g):
        gx = g * ga if _needs(x) else None
        gg = (g * x.data).sum(axis=(0, 2, 3)) if _needs(gamma) else None
        gb = g.sum(axis=(0, 2, 3)) if _needs(beta) else None
        return gx, gg, gb

    return record(out, (x, gamma, beta), _backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
               ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize each channel over (n, h, w) with batch statistics, then scale and shift.

    Returns the output plus the batch mean and (biased) variance.
    """
    _rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    m = x.data.size // c
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def _backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if _needs(x):
            k = (gamma.data * inv / m)[None, :, None, None]
            gx = k * (m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        return gx, gg, gb

    return record(out, (x, gamma, beta), _backward), mu, var
