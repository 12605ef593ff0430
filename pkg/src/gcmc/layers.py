"""GDN/IGDN, PReLU, convolution layers and the GDN residual block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA_MIN = 1e-6


class Module:
    """Parameter container.  Parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> list:
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def project(self) -> None:
        """Re-impose parameter constraints after an optimizer step."""
        for m in self.modules():
            if m is not self and hasattr(m, "_project"):
                m._project()
        if hasattr(self, "_project"):
            self._project()

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = param(_kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.bias = param(np.zeros(cout)) if bias else None
        self.stride = stride
        # "same" for stride 1; exact /stride downsampling for even inputs
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 2, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = param(_kaiming(rng, (cin, cout, k, k), cin * k * k / (stride * stride)))
        self.bias = param(np.zeros(cout)) if bias else None
        self.stride = stride
        # crop so that the output is exactly stride * input
        lo = k // 2
        hi = k - stride - lo
        self.pad = (lo, hi, lo, hi)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.bias, self.stride, self.pad)


@dataclass
class GdnParams:
    beta: np.ndarray
    gamma: np.ndarray


def gdn(x, beta, gamma, inverse: bool = False) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2) over the channel axis of [N,C,H,W] or [C,H,W].

    With ``inverse`` the normaliser multiplies instead (IGDN).
    """
    x, beta, gamma = T.as_tensor(x), T.as_tensor(beta), T.as_tensor(gamma)
    c = x.shape[-3]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise T.ShapeError(f"gdn: input has {c} channels but beta {beta.shape}, gamma {gamma.shape}")
    norm = T.conv2d(x * x, T.reshape(gamma, (c, c, 1, 1)), beta)
    norm = T.sqrt(norm)
    return x * norm if inverse else x / norm


def igdn(y, beta, gamma) -> Tensor:
    return gdn(y, beta, gamma, inverse=True)


class GDN(Module):
    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        self.beta = param(np.ones(channels))
        self.gamma = param(gamma_init * np.eye(channels))
        self.inverse = inverse

    def __call__(self, x: Tensor) -> Tensor:
        return gdn(x, self.beta, self.gamma, self.inverse)

    def _project(self) -> None:
        np.maximum(self.beta.data, BETA_MIN, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)

    @property
    def params(self) -> GdnParams:
        return GdnParams(self.beta.data, self.gamma.data)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        self.alpha = param(np.full(channels, init))

    def __call__(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.alpha, axis=-3)


class ReLU(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x)


def make_activation(kind: str, channels: int, inverse: bool = False) -> Module:
    if kind == "gdn":
        return GDN(channels, inverse=inverse)
    if kind == "relu":
        return ReLU()
    if kind == "prelu":
        return PReLU(channels)
    raise ValueError(f"unknown activation {kind!r}")


class ResBlock(Module):
    """x + conv(act(conv(act(x)))) with 3x3 stride-1 convs.

    ``activation='gdn'`` with ``residual=True`` is the GDN residual block; the
    plain variant (``residual=False``) drops the skip so depth is unchanged.
    """

    def __init__(self, channels: int, rng=None, activation: str = "gdn", inverse: bool = False,
                 residual: bool = True):
        self.act1 = make_activation(activation, channels, inverse)
        self.conv1 = Conv2d(channels, channels, 3, 1, rng)
        self.act2 = make_activation(activation, channels, inverse)
        self.conv2 = Conv2d(channels, channels, 3, 1, rng)
        self.residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(self.act2(self.conv1(self.act1(x))))
        return x + h if self.residual else h


def resblock_gdn(x, conv1_w, conv1_b, conv2_w, conv2_b, gdn1: GdnParams | tuple, gdn2: GdnParams | tuple) -> Tensor:
    """Functional GDN residual block: x + conv2(gdn2(conv1(gdn1(x))))."""
    b1, g1 = (gdn1.beta, gdn1.gamma) if isinstance(gdn1, GdnParams) else gdn1
    b2, g2 = (gdn2.beta, gdn2.gamma) if isinstance(gdn2, GdnParams) else gdn2
    x = T.as_tensor(x)
    if conv1_w.shape[1] != x.shape[-3] or conv2_w.shape[0] != x.shape[-3]:
        raise T.ShapeError(f"resblock: kernels {conv1_w.shape}, {conv2_w.shape} do not preserve {x.shape[-3]} channels")
    h = gdn(x, b1, g1)
    h = T.conv2d(h, conv1_w, conv1_b, 1, 1)
    h = gdn(h, b2, g2)
    h = T.conv2d(h, conv2_w, conv2_b, 1, 1)
    return x + h


class ICNUnit(Module):
    """conv -> PReLU -> conv -> add, no normalisation."""

    def __init__(self, channels: int, rng=None):
        self.conv1 = Conv2d(channels, channels, 3, 1, rng)
        self.act = PReLU(channels)
        self.conv2 = Conv2d(channels, channels, 3, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act(self.conv1(x)))
