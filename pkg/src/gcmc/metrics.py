"""Distortion metrics on [0, 1] images: MSE, PSNR, SSIM, MS-SSIM and the dB transform."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class MsSsimConfig:
    scales: int = 5
    weights: tuple = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    # contrast-structure terms are clamped here before the fractional powers
    cs_floor: float = 1e-6

    def __post_init__(self):
        if len(self.weights) != self.scales:
            raise ValueError(f"{self.scales} scales but {len(self.weights)} weights")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _batched(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise T.ShapeError(f"expected an image [C,H,W] or batch [N,C,H,W], got {x.shape}")
    return x


def _blur(x: Tensor, g: np.ndarray) -> Tensor:
    """Separable 'valid' Gaussian filter applied per channel."""
    n, c, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, h, w))
    k = len(g)
    flat = T.conv2d(flat, g.reshape(1, 1, k, 1))
    flat = T.conv2d(flat, g.reshape(1, 1, 1, k))
    return T.reshape(flat, (n, c) + flat.shape[2:])


def _ssim_terms(x: Tensor, y: Tensor, cfg: MsSsimConfig) -> tuple:
    """Per-image mean SSIM and mean contrast-structure term, each shaped [N]."""
    g = gaussian_window(cfg.window, cfg.sigma)
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    cs_map = (2.0 * sxy + cfg.c2) / (sxx + syy + cfg.c2)
    l_map = (2.0 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1)
    return (l_map * cs_map).mean(axis=(1, 2, 3)), cs_map.mean(axis=(1, 2, 3))


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise T.ShapeError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")


def mse(x, y) -> Tensor:
    x, y = _batched(x), _batched(y)
    _check_pair(x, y)
    d = x - y
    return (d * d).mean()


def psnr(x, y, data_range: float = 1.0) -> float:
    m = mse(x, y).item()
    if m == 0.0:
        return math.inf
    return -10.0 * math.log10(m / (data_range * data_range))


def ssim(x, y, cfg: MsSsimConfig | None = None) -> Tensor:
    cfg = cfg or MsSsimConfig()
    x, y = _batched(x), _batched(y)
    _check_pair(x, y)
    if min(x.shape[-2:]) < cfg.window:
        raise T.ShapeError(f"image {x.shape} smaller than the {cfg.window}-tap window")
    s, _ = _ssim_terms(x, y, cfg)
    return s.mean()


def usable_scales(h: int, w: int, cfg: MsSsimConfig) -> int:
    s = 0
    while s < cfg.scales and min(h, w) // (2 ** s) >= cfg.window:
        s += 1
    return s


def ms_ssim(x, y, cfg: MsSsimConfig | None = None) -> Tensor:
    """Multi-scale SSIM averaged over the batch (differentiable).

    Images too small for every scale use the leading scales with their weights
    renormalised to sum to one; a warning is emitted.
    """
    cfg = cfg or MsSsimConfig()
    x, y = _batched(x), _batched(y)
    _check_pair(x, y)
    scales = usable_scales(x.shape[-2], x.shape[-1], cfg)
    if scales == 0:
        raise T.ShapeError(f"image {x.shape} smaller than the {cfg.window}-tap window")
    weights = np.asarray(cfg.weights[:scales], dtype=np.float64)
    if scales < cfg.scales:
        warnings.warn(f"ms_ssim: {x.shape[-2]}x{x.shape[-1]} image supports {scales} of {cfg.scales} scales; "
                      "weights renormalised", RuntimeWarning, stacklevel=2)
        weights = weights / weights.sum()
    value = None
    for j in range(scales):
        s, cs = _ssim_terms(x, y, cfg)
        term = s if j == scales - 1 else cs
        term = T.power(T.clamp(term, cfg.cs_floor, None), float(weights[j]))
        value = term if value is None else value * term
        if j < scales - 1:
            x, y = T.avg_pool2d(x, 2), T.avg_pool2d(y, 2)
    return value.mean()


def msssim_db(d: float) -> float:
    """-10 log10(1 - d); +inf for d == 1."""
    if d >= 1.0:
        return math.inf
    if d < 0.0:
        raise ValueError(f"MS-SSIM must be in [0, 1], got {d}")
    return -10.0 * math.log10(1.0 - d)
