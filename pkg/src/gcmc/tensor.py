"""Dense float64 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor`; when gradients are enabled and an input
requires grad, the result remembers its parents and a closure that maps the
output gradient to input gradients.  :func:`backward` walks that record in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return crop(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> "Graph":
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered record of the nodes that fed a loss."""

    nodes: list = field(default_factory=list)

    def gradient(self, t: Tensor) -> np.ndarray | None:
        return t.grad


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    nodes = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return Graph(nodes)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log2(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log2(a.data), (a,), lambda g: (g / (a.data * np.log(2.0)),), "log2")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient flows only where the input is inside the range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def prelu(x, alpha, axis: int = 1) -> Tensor:
    """Per-channel parametric ReLU; ``alpha`` has one entry per slice along ``axis``."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    if alpha.ndim != 1 or alpha.shape[0] != x.shape[axis]:
        raise ShapeError(f"prelu: alpha {alpha.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    a = alpha.data.reshape(view)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def bw(g):
        gx = np.where(pos, g, g * a)
        ga = np.where(pos, 0.0, g * x.data)
        red = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
        return gx, ga.sum(axis=red)

    return _make(out, (x, alpha), bw, "prelu")


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(a) -> Tensor:
    a = as_tensor(a)
    return _make(ndtr(a.data), (a,),
                 lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),), "ncdf")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    shape = tuple(shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {src} into {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, src),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _make(out, tuple(ts), bw, "concat")


def crop(a, idx) -> Tensor:
    """Basic or advanced indexing (the tape scatters the gradient back)."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "crop")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def pad(a, pads: Sequence[tuple], mode: str = "constant") -> Tensor:
    """Pad with ``np.pad`` semantics; ``mode`` is 'constant' (zeros) or 'reflect'."""
    a = as_tensor(a)
    pads = [tuple(p) for p in pads]
    if mode == "constant":
        out = np.pad(a.data, pads)
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.shape))
        return _make(out, (a,), lambda g: (g[sl],), "pad")
    if mode == "reflect":
        # gradient by padding an index map the same way and scattering back
        idx = np.arange(a.size).reshape(a.shape)
        pidx = np.pad(idx, pads, mode="reflect")
        out = a.data.reshape(-1)[pidx]

        def bw(g):
            flat = np.zeros(a.size)
            np.add.at(flat, pidx.reshape(-1), g.reshape(-1))
            return (flat.reshape(a.shape),)

        return _make(out, (a,), bw, "pad_reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) / float(n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def avg_pool2d(a, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling over the last two axes (trailing rows/cols dropped)."""
    a = as_tensor(a)
    h, w = a.shape[-2] // k, a.shape[-1] // k
    lead = a.shape[:-2]
    x = a.data[..., : h * k, : w * k].reshape(*lead, h, k, w, k)
    out = x.mean(axis=(-3, -1))

    def bw(g):
        full = np.zeros_like(a.data)
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        full[..., : h * k, : w * k] = up
        return (full,)

    return _make(out, (a,), bw, "avgpool")


# ---------------------------------------------------------------------------
# Convolutions (shared N-d machinery, channel-major layout)
# ---------------------------------------------------------------------------

def _norm_pad(pad, nd: int) -> list:
    """int -> symmetric; length-nd tuple -> symmetric per axis; length 2*nd -> (lo, hi) pairs."""
    if isinstance(pad, int):
        return [(pad, pad)] * nd
    pad = tuple(pad)
    if len(pad) == nd and all(isinstance(p, int) for p in pad):
        return [(p, p) for p in pad]
    if len(pad) == 2 * nd:
        return [(pad[2 * i], pad[2 * i + 1]) for i in range(nd)]
    if len(pad) == nd:
        return [tuple(p) for p in pad]
    raise ShapeError(f"bad pad spec {pad!r} for {nd} spatial dims")


def _windows(xp: np.ndarray, ksize: tuple, stride: int) -> np.ndarray:
    nd = len(ksize)
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, ksize, axis=axes)
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    return win  # [N, C, *out, *k]


def _conv_fwd(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    nd = w.ndim - 2
    win = _windows(xp, w.shape[2:], stride)
    red_x = [1] + list(range(2 + nd, 2 + 2 * nd))
    out = np.tensordot(win, w, axes=(red_x, [1] + list(range(2, 2 + nd))))  # [N, *out, Co]
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, xp_shape: tuple) -> np.ndarray:
    """Adjoint of _conv_fwd w.r.t. its (padded) input."""
    nd = w.ndim - 2
    ksize = w.shape[2:]
    if stride == 1:
        # full correlation of the gradient with the flipped, transposed kernel
        pads = [(k - 1, xs - o) for k, o, xs in zip(ksize, g.shape[2:], xp_shape[2:])]
        gp = np.pad(g, [(0, 0), (0, 0)] + pads)
        wf = np.ascontiguousarray(np.flip(w, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1))
        return _conv_fwd(gp, wf, 1)
    cols = np.tensordot(g, w, axes=([1], [0]))  # [N, *out, Ci, *k]
    cols = np.moveaxis(cols, 1 + nd, 1)  # [N, Ci, *out, *k]
    gx = np.zeros(xp_shape)
    out_sp = g.shape[2:]
    for tap in np.ndindex(*ksize):
        sl = tuple(slice(t, t + stride * (o - 1) + 1, stride) for t, o in zip(tap, out_sp))
        gx[(slice(None), slice(None)) + sl] += cols[(Ellipsis,) + tap]
    return gx


def _conv_grad_weight(g: np.ndarray, xp: np.ndarray, ksize: tuple, stride: int) -> np.ndarray:
    nd = len(ksize)
    win = _windows(xp, ksize, stride)
    sp = list(range(2, 2 + nd))
    return np.tensordot(g, win, axes=([0] + sp, [0] + sp))  # [Co, Ci, *k]


def _batched(x: Tensor, nd: int) -> tuple[Tensor, bool]:
    if x.ndim == nd + 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != nd + 2:
        raise ShapeError(f"expected {nd + 1}-d or {nd + 2}-d input, got shape {x.shape}")
    return x, False


def _convnd(x, w, b, stride: int, pad, nd: int, op: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if w.ndim != nd + 2:
        raise ShapeError(f"{op}: kernel must be {nd + 2}-d, got {w.shape}")
    xb, squeeze = _batched(x, nd)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: input {x.shape} has {xb.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}")
    pads = _norm_pad(pad, nd)
    for n, (lo, hi), k in zip(xb.shape[2:], pads, w.shape[2:]):
        if n + lo + hi < k:
            raise ShapeError(f"{op}: kernel {w.shape} larger than padded input {xb.shape} (pad {pads})")
    if stride == 1 and all(k == 1 for k in w.shape[2:]) and not any(lo or hi for lo, hi in pads):
        return _pointwise_nd(x, xb, w, b, squeeze, nd, op)
    xp = np.pad(xb.data, [(0, 0), (0, 0)] + pads) if any(lo or hi for lo, hi in pads) else xb.data
    out = _conv_fwd(xp, w.data, stride)
    parents = [xb, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape((1, -1) + (1,) * nd)
        parents.append(b)
    sl = (slice(None), slice(None)) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, xb.shape[2:]))

    def bw(g):
        gx = _conv_grad_input(g, w.data, stride, xp.shape)[sl] if xb.requires_grad else None
        gw = _conv_grad_weight(g, xp, w.shape[2:], stride) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return tuple(grads)

    res = _make(out, tuple(parents), bw, op)
    return reshape(res, res.shape[1:]) if squeeze else res


def _pointwise_nd(x, xb, w, b, squeeze, nd, op) -> Tensor:
    """1x1 convolution as a single tensordot over the channel axis."""
    w2 = w.data.reshape(w.shape[:2])
    parents = [xb, w]
    if b is not None:
        b = as_tensor(b)
        parents.append(b)
    out = pointwise_forward(xb.data, w2, None if b is None else b.data)
    sp = tuple(range(2, 2 + nd))

    def bw(g):
        gx = np.moveaxis(np.tensordot(g, w2, axes=([1], [0])), -1, 1) if xb.requires_grad else None
        gw = np.tensordot(g, xb.data, axes=([0] + list(sp), [0] + list(sp))).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0,) + sp))
        return tuple(grads)

    res = _make(out, tuple(parents), bw, op)
    return reshape(res, res.shape[1:]) if squeeze else res


def conv2d(x, w, b=None, stride: int = 1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` [N,Ci,H,W] (or [Ci,H,W]) with ``w`` [Co,Ci,kh,kw].

    ``pad`` is an int, a (ph, pw) pair or a (top, bottom, left, right) tuple of zero padding.
    """
    return _convnd(x, w, b, stride, pad, 2, "conv2d")


def conv3d(x, w, b=None, stride: int = 1, pad=0) -> Tensor:
    return _convnd(x, w, b, stride, pad, 3, "conv3d")


def _tap_index(spatial: tuple, ksize: tuple, taps: np.ndarray) -> np.ndarray:
    """Flat indices into the 'same'-padded volume: [P, T] for every output position and tap."""
    padded = tuple(n + k - 1 for n, k in zip(spatial, ksize))
    base = np.ravel_multi_index(np.indices(spatial).reshape(len(spatial), -1), padded)
    offs = np.ravel_multi_index(taps.T, padded)
    return base[:, None] + offs[None, :]


_TAP_CACHE: dict = {}


def tap_index(spatial: tuple, ksize: tuple, taps: np.ndarray) -> np.ndarray:
    key = (tuple(spatial), tuple(ksize), taps.tobytes())
    idx = _TAP_CACHE.get(key)
    if idx is None:
        idx = _TAP_CACHE[key] = _tap_index(spatial, ksize, taps)
    return idx


def masked_conv_forward(x: np.ndarray, wt: np.ndarray, idx: np.ndarray, ksize: tuple, bias=None):
    """Gather-and-contract kernel behind :func:`conv3d_masked`; also used by no-tape inference.

    ``wt`` holds only the active taps, [Co, Ci, T]; ``idx`` comes from :func:`tap_index`.
    Returns (output, gathered columns, padded input shape).
    """
    n, ci = x.shape[:2]
    spatial = x.shape[2:]
    # a fixed memory layout keeps the BLAS summation order, hence the bits, reproducible
    wt = np.ascontiguousarray(wt)
    pads = [(k // 2, k - 1 - k // 2) for k in ksize]
    xp = np.zeros((n, ci) + tuple(s + k - 1 for s, k in zip(spatial, ksize)))
    xp[(slice(None), slice(None)) + tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))] = x
    cols = xp.reshape(n, ci, -1)[:, :, idx]  # [N, Ci, P, T]
    out = np.tensordot(cols, wt, axes=([1, 3], [1, 2]))  # [N, P, Co]
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1)).reshape((n, wt.shape[0]) + tuple(spatial))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out, cols, xp.shape


def pointwise_forward(x: np.ndarray, w2: np.ndarray, bias=None) -> np.ndarray:
    """1x1(x1) convolution over axis 1; kernel [Co, Ci]."""
    out = np.ascontiguousarray(np.moveaxis(np.tensordot(x, w2, axes=([1], [1])), -1, 1))
    if bias is not None:
        out = out + bias.reshape((1, -1) + (1,) * (x.ndim - 2))
    return out


def conv3d_masked(x, w, mask, b=None) -> Tensor:
    """'Same'-padded 3-d cross-correlation with ``w * mask`` (mask entries in {0, 1}).

    Only taps where the mask is 1 are gathered, so the output at a position never
    touches input values outside its mask, not even through a zero product.
    """
    x, w = as_tensor(x), as_tensor(w)
    mask = np.asarray(mask, dtype=DTYPE)
    if w.ndim != 5:
        raise ShapeError(f"conv3d_masked: kernel must be 5-d, got {w.shape}")
    if mask.shape != w.shape[2:]:
        if mask.shape != w.shape or not np.all(mask == mask[:1, :1]):
            raise ShapeError(f"conv3d_masked: mask {mask.shape} does not match kernel {w.shape}")
        mask = mask[0, 0]
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("conv3d_masked: mask entries must be 0 or 1")
    xb, squeeze = _batched(x, 3)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d_masked: input {x.shape} has {xb.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}")
    ksize = w.shape[2:]
    spatial = xb.shape[2:]
    taps = np.argwhere(mask > 0)
    n, ci = xb.shape[:2]
    co = w.shape[0]
    pads = [(k // 2, k - 1 - k // 2) for k in ksize]
    if len(taps) == 0:
        out = np.zeros((n, co) + spatial)
        if b is not None:
            b = as_tensor(b)
            out = out + b.data.reshape(1, -1, 1, 1, 1)
            return _finish_masked(_make(out, (b,), lambda g: (g.sum(axis=(0, 2, 3, 4)),), "conv3d_masked"), squeeze)
        return _finish_masked(Tensor(out), squeeze)
    idx = tap_index(spatial, ksize, taps)
    wt = w.data[(slice(None), slice(None)) + tuple(taps.T)]  # [Co, Ci, T]
    out, cols, padded_shape = masked_conv_forward(xb.data, wt, idx, ksize, None if b is None else as_tensor(b).data)
    parents = [xb, w]
    if b is not None:
        b = as_tensor(b)
        parents.append(b)

    def bw(g):
        g2 = g.reshape(n, co, -1)
        gx = gw = None
        if xb.requires_grad:
            gcols = np.tensordot(g2, wt, axes=([1], [0]))  # [N, P, Ci, T]
            gxp = np.zeros((n, ci, int(np.prod(padded_shape[2:]))))
            for t in range(len(taps)):
                _scatter_tap(gxp, idx[:, t], np.moveaxis(gcols[..., t], 1, 2))
            sl = (slice(None), slice(None)) + tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))
            gx = gxp.reshape(padded_shape)[sl]
        if w.requires_grad:
            gwt = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))  # [Co, Ci, T]
            gw = np.zeros(w.shape)
            gw[(slice(None), slice(None)) + tuple(taps.T)] = gwt
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _finish_masked(_make(out, tuple(parents), bw, "conv3d_masked"), squeeze)


def _scatter_tap(dst: np.ndarray, flat_idx: np.ndarray, vals: np.ndarray) -> None:
    # indices of one tap are distinct across positions, so fancy-index += is exact
    dst[:, :, flat_idx] += vals


def _finish_masked(res: Tensor, squeeze: bool) -> Tensor:
    return reshape(res, res.shape[1:]) if squeeze else res


def conv2d_transpose(x, w, b=None, stride: int = 1, pad=0) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input.

    ``w`` is laid out [Ci, Co, kh, kw] (the kernel of the forward conv that maps Co -> Ci).
    ``pad`` crops the full output; output extent = stride*(H-1) + k - pad_total.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ShapeError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: kernel must be 4-d, got {w.shape}")
    xb, squeeze = _batched(x, 2)
    if xb.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} has {xb.shape[1]} channels, kernel {w.shape} expects {w.shape[0]}")
    pads = _norm_pad(pad, 2)
    n, _, h, wd = xb.shape
    kh, kw = w.shape[2:]
    full_shape = (n, w.shape[1], stride * (h - 1) + kh, stride * (wd - 1) + kw)
    if any(lo + hi >= s for (lo, hi), s in zip(pads, full_shape[2:])):
        raise ShapeError(f"conv2d_transpose: crop {pads} removes the whole output {full_shape}")
    full = _conv_grad_input(xb.data, w.data, stride, full_shape)
    sl = (slice(None), slice(None)) + tuple(slice(lo, s - hi) for (lo, hi), s in zip(pads, full_shape[2:]))
    out = np.ascontiguousarray(full[sl])
    parents = [xb, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def bw(g):
        gfull = np.zeros(full_shape)
        gfull[sl] = g
        gx = _conv_fwd(gfull, w.data, stride) if xb.requires_grad else None
        gw = _conv_grad_weight(xb.data, gfull, (kh, kw), stride) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    res = _make(out, tuple(parents), bw, "conv2d_transpose")
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# LTNS container
# ---------------------------------------------------------------------------

LTNS_MAGIC = b"LTNS"
LTNS_VERSION = 1


def save_tensor(path: str | Path, t) -> None:
    # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
    arr = np.asarray(as_tensor(t).data, dtype="<f8", order="C")
    with open(path, "wb") as f:
        f.write(LTNS_MAGIC)
        f.write(struct.pack("<II", LTNS_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != LTNS_MAGIC:
        raise ValueError(f"{path}: not an LTNS container")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != LTNS_VERSION:
        raise ValueError(f"{path}: unsupported LTNS version {version}")
    off = 12 + 8 * rank
    if len(raw) < off:
        raise ValueError(f"{path}: truncated LTNS header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != off + 8 * count:
        raise ValueError(f"{path}: payload size {len(raw) - off} != {8 * count}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(shape)
    return Tensor(data)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
