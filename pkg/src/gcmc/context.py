"""Gated 3-d context model over the quantised latent.

The latent ``y_hat`` of shape [M, H, W] is read as a single-feature volume whose
depth axis is the latent channel.  Positions are ordered channel-first, then
raster (see :func:`precedes`).  Three masked stacks process the volume:

* the channel stack sees earlier channels only,
* the vertical stack sees earlier rows of the current channel (plus whatever
  the channel stack feeds it),
* the horizontal stack sees earlier columns of the current row (plus the
  vertical and channel stacks).

Layer 1 applies type-A masks directly to ``y_hat``.  Later layers convolve each
stack with its own previous output using type-B masks, which are defined
relative to what that stack is already allowed to see.  Because every stack's
output at ``p`` depends only on strict predecessors of ``p``, the three outputs
can be concatenated and fused at the same position, and the union of their
receptive fields is the full causal cube: no blind spot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, param
from .tensor import Tensor

STACKS = ("channel", "vertical", "horizontal")


def precedes(p, q) -> bool:
    """True when position ``p`` = (c, h, w) comes strictly before ``q``."""
    return tuple(p) < tuple(q)


def positions(shape) -> list:
    """All (c, h, w) positions of a [M, H, W] latent in decoding order."""
    return [tuple(int(v) for v in idx) for idx in np.ndindex(*shape)]


@dataclass
class ContextConfig:
    layers: int = 3
    k: int = 12
    n: int = 3
    hyper_features: int = 2
    sigma_bias: float = 0.54
    conditioned: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("context model needs at least one layer")
        if self.k % 2:
            raise ValueError(f"gate width k must be even, got {self.k}")
        if self.n % 2 == 0 or self.n < 3:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.n}")


def build_masks(n: int, kind: str = "A") -> dict:
    """Channel / vertical / horizontal masks of shape (n, n, n) indexed by (dc, dh, dw) + n//2.

    Type A (first layer, applied to the latent itself) - the three masks partition the
    strict causal predecessors inside the window:
      channel:    dc in [-r, -1], any dh, dw
      vertical:   dc = 0, dh in [-r, -1], any dw
      horizontal: dc = 0, dh = 0, dw in [-r, -1]
    Type B (later layers, applied to the stack's own features) additionally admits
    dc = 0 for the channel stack, dh = 0 for the vertical stack and dw = 0 for the
    horizontal stack.
    """
    if n % 2 == 0 or n < 1:
        raise ValueError(f"mask size must be odd, got {n}")
    if kind not in ("A", "B"):
        raise ValueError(f"mask type must be 'A' or 'B', got {kind!r}")
    r = n // 2
    hi = 0 if kind == "B" else -1
    d = np.arange(-r, r + 1)
    dc, dh, dw = np.meshgrid(d, d, d, indexing="ij")
    masks = {
        "channel": dc <= hi,
        "vertical": (dc == 0) & (dh <= hi),
        "horizontal": (dc == 0) & (dh == 0) & (dw <= hi),
    }
    return {k: v.astype(np.float64) for k, v in masks.items()}


def causal_window_mask(n: int, include_center: bool = False) -> np.ndarray:
    """Single dense mask of every strict predecessor in the n^3 window (optionally + centre)."""
    m = sum(build_masks(n, "A").values())
    if include_center:
        m[n // 2, n // 2, n // 2] = 1.0
    return m


def _gate(pre: Tensor, half: int) -> Tensor:
    return T.tanh(pre[:, :half]) * T.sigmoid(pre[:, half:])


def _pointwise(x: Tensor, w: Tensor) -> Tensor:
    """1x1x1 convolution; w is [Co, Ci]."""
    return T.conv3d(x, T.reshape(w, w.shape + (1, 1, 1)))


def _as_volume(y_hat) -> tuple:
    y = T.as_tensor(y_hat)
    squeeze = y.ndim == 3
    if squeeze:
        y = T.reshape(y, (1,) + y.shape)
    if y.ndim != 4:
        raise T.ShapeError(f"latent must be [M,H,W] or [N,M,H,W], got {y.shape}")
    return T.reshape(y, (y.shape[0], 1) + y.shape[1:]), squeeze


def _hyper_volume(z_p, latent_shape: tuple, features: int):
    if z_p is None:
        return None
    h = T.as_tensor(z_p)
    if h.ndim == 3:
        h = T.reshape(h, (1,) + h.shape)
    n, m, hh, ww = latent_shape
    if h.shape != (n, features * m, hh, ww):
        raise T.ShapeError(f"hyper features {h.shape} do not align with latent {(n, m, hh, ww)} "
                           f"(expected {features * m} channels)")
    return T.reshape(h, (n, features, m, hh, ww))


class _Head(Module):
    def __init__(self, cin: int, sigma_bias: float, rng):
        self.weight = param(rng.normal(0.0, 0.1 / np.sqrt(cin), size=(2, cin)))
        self.bias = param(np.array([0.0, sigma_bias]))

    def __call__(self, feats: Tensor):
        out = _pointwise(feats, self.weight) + T.reshape(self.bias, (1, 2, 1, 1, 1))
        mu = out[:, 0]
        sigma = T.softplus(out[:, 1])
        return mu, sigma


class GatedLayer(Module):
    """One layer of the three gated stacks with hyperprior conditioning."""

    def __init__(self, index: int, cfg: ContextConfig, rng):
        self.index = index
        self.half = cfg.k // 2
        cin = 1 if index == 0 else self.half
        self.masks = build_masks(cfg.n, "A" if index == 0 else "B")
        k = cfg.k
        self.w = []
        self.b = []
        self.v = []
        for s in STACKS:
            taps = int(self.masks[s].sum())
            self.w.append(param(rng.normal(0.0, 1.0 / np.sqrt(cin * taps), size=(k, cin) + (cfg.n,) * 3)))
            self.b.append(param(np.zeros(k)))
            self.v.append(param(rng.normal(0.0, 0.5 / np.sqrt(cfg.hyper_features), size=(k, cfg.hyper_features))))
        # cross-stack links on pre-activations: channel->vertical, channel->horizontal, vertical->horizontal
        link = lambda: param(rng.normal(0.0, 0.5 / np.sqrt(k), size=(k, k)))
        self.link_cv = link()
        self.link_ch = link()
        self.link_vh = link()

    def conditioning(self, h: Tensor) -> list:
        """V * h for the three stacks, computed in one 1x1x1 pass."""
        k = self.w[0].shape[0]
        cond = _pointwise(h, T.concat(self.v, axis=0))
        return [cond[:, i * k:(i + 1) * k] for i in range(3)]

    def _pre(self, i: int, x: Tensor, cond) -> Tensor:
        pre = T.conv3d_masked(x, self.w[i], self.masks[STACKS[i]], self.b[i])
        if cond is not None:
            pre = pre + cond[i]
        return pre

    def __call__(self, inputs: tuple, h: Tensor | None) -> tuple:
        xc, xv, xh = inputs
        cond = self.conditioning(h) if h is not None else None
        c_pre = self._pre(0, xc, cond)
        v_pre = self._pre(1, xv, cond) + _pointwise(c_pre, self.link_cv)
        h_pre = (self._pre(2, xh, cond) + _pointwise(c_pre, self.link_ch)
                 + _pointwise(v_pre, self.link_vh))
        c_out = _gate(c_pre, self.half)
        v_out = _gate(v_pre, self.half)
        h_out = _gate(h_pre, self.half)
        if self.index > 0:
            h_out = h_out + xh
        return c_out, v_out, h_out


class GatedContextModel(Module):
    """(mu, sigma) = P(y_hat, z_p)."""

    def __init__(self, cfg: ContextConfig | None = None, rng=None):
        self.cfg = cfg or ContextConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers_ = [GatedLayer(i, self.cfg, rng) for i in range(self.cfg.layers)]
        self.head = _Head(3 * (self.cfg.k // 2), self.cfg.sigma_bias, rng)

    def features(self, vol: Tensor, h: Tensor | None) -> Tensor:
        state = (vol, vol, vol)
        for layer in self.layers_:
            state = layer(state, h)
        return T.concat(state, axis=1)

    def __call__(self, y_hat, z_p=None):
        return self.predict_params(y_hat, z_p)

    def predict_params(self, y_hat, z_p=None):
        vol, squeeze = _as_volume(y_hat)
        n, _, m, hh, ww = vol.shape
        h = _hyper_volume(z_p, (n, m, hh, ww), self.cfg.hyper_features) if self.cfg.conditioned else None
        mu, sigma = self.head(self.features(vol, h))
        if squeeze:
            mu, sigma = mu[0], sigma[0]
        return mu, sigma

    def inference(self, z_p, shape) -> "ContextInference":
        """Tape-free evaluator for one [M, H, W] latent, with the hyperprior terms precomputed."""
        return ContextInference(self, z_p, shape)

    def zero_(self) -> None:
        """Zero every weight (biases of the head are kept); used by tests."""
        for name, p in self.named_parameters():
            if name != "head.bias":
                p.data[...] = 0.0


class NaiveMaskedContext(Module):
    """Single-stack baseline: stacked gated masked 3-d convs with the dense causal mask.

    Layer 1 uses every strict predecessor in the window, later layers add the
    centre tap.  Same depth and gate width as the gated model; stacking these
    masks leaves blind spots (e.g. one row up, two columns right).
    """

    def __init__(self, cfg: ContextConfig | None = None, rng=None):
        self.cfg = cfg or ContextConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        k, half = self.cfg.k, self.cfg.k // 2
        self.masks = [causal_window_mask(self.cfg.n, include_center=i > 0) for i in range(self.cfg.layers)]
        self.w, self.b, self.v = [], [], []
        for i in range(self.cfg.layers):
            cin = 1 if i == 0 else half
            taps = int(self.masks[i].sum())
            self.w.append(param(rng.normal(0.0, 1.0 / np.sqrt(cin * taps), size=(k, cin) + (self.cfg.n,) * 3)))
            self.b.append(param(np.zeros(k)))
            self.v.append(param(rng.normal(0.0, 0.5, size=(k, self.cfg.hyper_features))))
        self.head = _Head(half, self.cfg.sigma_bias, rng)

    def predict_params(self, y_hat, z_p=None):
        vol, squeeze = _as_volume(y_hat)
        n, _, m, hh, ww = vol.shape
        h = _hyper_volume(z_p, (n, m, hh, ww), self.cfg.hyper_features) if self.cfg.conditioned else None
        x = vol
        for i in range(self.cfg.layers):
            pre = T.conv3d_masked(x, self.w[i], self.masks[i], self.b[i])
            if h is not None:
                pre = pre + _pointwise(h, self.v[i])
            out = _gate(pre, self.cfg.k // 2)
            x = out + x if i > 0 else out
        mu, sigma = self.head(x)
        if squeeze:
            mu, sigma = mu[0], sigma[0]
        return mu, sigma

    __call__ = predict_params


class ContextInference:
    """Plain-numpy replica of :meth:`GatedContextModel.predict_params` for one latent.

    Every arithmetic step is the same numpy call, on the same shapes and in the same
    order, as the taped path, so both give bitwise identical (mu, sigma); this one
    skips graph bookkeeping and reuses the hyperprior conditioning across calls,
    which matters when the serial decoder re-runs the model once per symbol.
    Weights are snapshotted at construction.
    """

    def __init__(self, model: GatedContextModel, z_p, shape):
        self.shape = tuple(int(s) for s in shape)
        m, hh, ww = self.shape
        cfg = model.cfg
        spatial = (m, hh, ww)
        ksize = (cfg.n,) * 3
        self.ksize = ksize
        self.half = cfg.k // 2
        h = None
        if cfg.conditioned and z_p is not None:
            h = _hyper_volume(z_p, (1, m, hh, ww), cfg.hyper_features).data
        self.layers = []
        for layer in model.layers_:
            k = layer.w[0].shape[0]
            convs = []
            for i, s in enumerate(STACKS):
                taps = np.argwhere(layer.masks[s] > 0)
                wt = layer.w[i].data[(slice(None), slice(None)) + tuple(taps.T)].copy()
                convs.append((wt, T.tap_index(spatial, ksize, taps), layer.b[i].data.copy()))
            cond = None
            if h is not None:
                full = T.pointwise_forward(h, np.concatenate([v.data for v in layer.v], axis=0))
                cond = [np.array(full[:, i * k:(i + 1) * k], copy=True) for i in range(3)]
            links = tuple(l.data.copy() for l in (layer.link_cv, layer.link_ch, layer.link_vh))
            self.layers.append((layer.index, convs, cond, links))
        self.head_w = model.head.weight.data.copy()
        self.head_b = model.head.bias.data.copy()

    def _pre(self, conv, x, cond, i):
        wt, idx, b = conv
        pre, _, _ = T.masked_conv_forward(x, wt, idx, self.ksize, b)
        if cond is not None:
            pre = pre + cond[i]
        return pre

    def _gate(self, pre):
        # contiguous copies, like the taped slicing: vectorised tanh / expit may round
        # strided inputs differently in the last bit
        a = np.array(pre[:, :self.half], copy=True)
        b = np.array(pre[:, self.half:], copy=True)
        return np.tanh(a) * T._sigmoid_np(b)

    def __call__(self, y_hat) -> tuple:
        """(mu, sigma) as [M, H, W] arrays."""
        y = np.asarray(y_hat, dtype=np.float64)
        if y.shape != self.shape:
            raise T.ShapeError(f"latent {y.shape} does not match the prepared shape {self.shape}")
        vol = y.reshape((1, 1) + self.shape)
        xc = xv = xh = vol
        pw = T.pointwise_forward
        for index, convs, cond, (l_cv, l_ch, l_vh) in self.layers:
            c_pre = self._pre(convs[0], xc, cond, 0)
            v_pre = self._pre(convs[1], xv, cond, 1) + pw(c_pre, l_cv)
            h_pre = self._pre(convs[2], xh, cond, 2) + pw(c_pre, l_ch) + pw(v_pre, l_vh)
            c_out, v_out, h_out = self._gate(c_pre), self._gate(v_pre), self._gate(h_pre)
            if index > 0:
                h_out = h_out + xh
            xc, xv, xh = c_out, v_out, h_out
        feats = np.concatenate((xc, xv, xh), axis=1)
        out = pw(feats, self.head_w) + self.head_b.reshape(1, 2, 1, 1, 1)
        return np.array(out[0, 0], copy=True), np.logaddexp(0.0, np.array(out[0, 1], copy=True))


# ---------------------------------------------------------------------------
# Serial decoding
# ---------------------------------------------------------------------------

class OutOfOrderError(RuntimeError):
    pass


def decode_step(model, decoded_prefix, z_p, position, runner: ContextInference | None = None) -> tuple:
    """(mu, sigma) at ``position`` given a latent whose later positions hold 0.

    Runs the full parallel model on the partially filled latent and reads one
    position.  The masked convolutions never gather values at or after
    ``position``, so the result is bitwise the one :meth:`predict_params` gives on
    the finished latent.  ``runner`` (from :meth:`GatedContextModel.inference`)
    makes repeated calls cheaper without changing the numbers.
    """
    y = np.asarray(T.as_tensor(decoded_prefix).data)
    c, h, w = position
    if runner is not None:
        mu, sigma = runner(y)
        return float(mu[c, h, w]), float(sigma[c, h, w])
    with T.no_grad():
        mu, sigma = model.predict_params(Tensor(y), z_p)
    if mu.ndim == 4:
        return float(mu.data[0, c, h, w]), float(sigma.data[0, c, h, w])
    return float(mu.data[c, h, w]), float(sigma.data[c, h, w])


class SerialDecoder:
    """Stateful wrapper that enforces decoding order over one [M, H, W] latent."""

    def __init__(self, model, z_p, shape):
        self.model = model
        self.z_p = z_p
        self.shape = tuple(shape)
        self.latent = np.zeros(self.shape)
        self._order = positions(self.shape)
        self._cursor = 0
        self._pending = False
        self._runner = model.inference(z_p, self.shape) if isinstance(model, GatedContextModel) else None

    @property
    def next_position(self):
        return self._order[self._cursor] if self._cursor < len(self._order) else None

    def params_at(self, position) -> tuple:
        if self._pending:
            raise OutOfOrderError("commit the previous symbol before requesting the next position")
        if tuple(position) != self.next_position:
            raise OutOfOrderError(f"expected position {self.next_position}, got {tuple(position)}")
        self._pending = True
        return decode_step(self.model, self.latent, self.z_p, position, self._runner)

    def commit(self, value: float) -> None:
        if not self._pending:
            raise OutOfOrderError("commit() without a matching params_at()")
        self.latent[self.next_position] = value
        self._cursor += 1
        self._pending = False


# ---------------------------------------------------------------------------
# Receptive-field audit
# ---------------------------------------------------------------------------

def _mask_offsets(mask: np.ndarray) -> list:
    r = mask.shape[0] // 2
    return [tuple(int(v) - r for v in idx) for idx in zip(*np.nonzero(mask))]


def _shift_or(dep: np.ndarray, offsets: list) -> np.ndarray:
    """out[p] = OR over offsets o of dep[p + o] (out-of-range taps contribute nothing)."""
    out = np.zeros_like(dep)
    D, H, W = dep.shape[:3]
    for dc, dh, dw in offsets:
        src = dep[max(dc, 0):D + min(dc, 0), max(dh, 0):H + min(dh, 0), max(dw, 0):W + min(dw, 0)]
        out[max(-dc, 0):D + min(-dc, 0), max(-dh, 0):H + min(-dh, 0), max(-dw, 0):W + min(-dw, 0)] |= src
    return out


def structural_coverage(shape, cfg: ContextConfig | None = None, naive: bool = False) -> np.ndarray:
    """Boolean [P, P] matrix: entry (p, q) is True when y_hat[q] can reach (mu, sigma)[p].

    Derived purely from the masks and the stack wiring, independent of weights.
    """
    cfg = cfg or ContextConfig()
    D, H, W = shape
    P = D * H * W
    ident = np.eye(P, dtype=bool).reshape(D, H, W, P)
    if naive:
        x = ident
        for i in range(cfg.layers):
            new = _shift_or(x, _mask_offsets(causal_window_mask(cfg.n, include_center=i > 0)))
            x = new | x if i > 0 else new
        return x.reshape(P, P)
    a = {s: _mask_offsets(m) for s, m in build_masks(cfg.n, "A").items()}
    b = {s: _mask_offsets(m) for s, m in build_masks(cfg.n, "B").items()}
    c = v = hz = ident
    for i in range(cfg.layers):
        offs = a if i == 0 else b
        c_new = _shift_or(c, offs["channel"])
        v_new = _shift_or(v, offs["vertical"]) | c_new
        h_new = _shift_or(hz, offs["horizontal"]) | v_new | c_new
        if i > 0:
            h_new |= hz
        c, v, hz = c_new, v_new, h_new
    return (c | v | hz).reshape(P, P)


def theoretical_field(shape, cfg: ContextConfig | None = None) -> np.ndarray:
    """Boolean [P, P]: q strictly precedes p and lies within layers * (n // 2) on every axis."""
    cfg = cfg or ContextConfig()
    reach = cfg.layers * (cfg.n // 2)
    pos = np.array(positions(shape))
    order = np.arange(len(pos))
    strict = order[None, :] < order[:, None]
    near = np.all(np.abs(pos[:, None, :] - pos[None, :, :]) <= reach, axis=-1)
    return strict & near


def causal_pairs(shape) -> np.ndarray:
    """Boolean [P, P]: q strictly precedes p."""
    P = int(np.prod(shape))
    return np.tril(np.ones((P, P), dtype=bool), k=-1)


def sensitivity_matrix(model, shape, z_p=None, rng=None, delta: float = 1.0) -> np.ndarray:
    """Exact perturbation sweep: entry (p, q) = |d mu_p| + |d sigma_p| when y_hat[q] moves by ``delta``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    base = np.round(rng.normal(0.0, 2.0, size=shape))
    with T.no_grad():
        mu0, s0 = model.predict_params(Tensor(base), z_p)
        P = base.size
        out = np.zeros((P, P))
        for qi, q in enumerate(positions(shape)):
            pert = base.copy()
            pert[q] += delta
            mu1, s1 = model.predict_params(Tensor(pert), z_p)
            out[:, qi] = (np.abs(mu1.data - mu0.data) + np.abs(s1.data - s0.data)).reshape(-1)
    return out
