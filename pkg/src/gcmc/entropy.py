"""Factorized density for z_hat, conditional Gaussian for y_hat, and bit estimates."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Module, param
from .tensor import Tensor

SIGMA_MIN = 0.01
TAIL_MASS = 1e-9
LIKELIHOOD_FLOOR = 1e-9


def round_quantize(y) -> np.ndarray:
    """Round half away from zero."""
    y = np.asarray(T.as_tensor(y).data)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def noisy_quantize(y, rng: np.random.Generator) -> Tensor:
    """Training proxy for quantisation: add i.i.d. U(-0.5, 0.5)."""
    y = T.as_tensor(y)
    return y + rng.uniform(-0.5, 0.5, size=y.shape)


class FactorizedDensity(Module):
    """Per-channel monotone CDF built from composed scalar units.

    Each channel maps x through ``len(filters) + 1`` affine layers with
    softplus-reparameterised (hence non-negative) matrices and
    ``x + tanh(a) * tanh(x)`` nonlinearities (|tanh(a)| < 1 keeps them
    increasing); the final logit goes through a sigmoid.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 6.0):
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            fin, fout = dims[i], dims[i + 1]
            init = np.log(np.expm1(1.0 / scale / fin))
            self.matrices.append(param(np.full((channels, fout, fin), init)))
            self.biases.append(param(np.zeros((channels, fout, 1))))
            if i < len(dims) - 2:
                self.factors.append(param(np.zeros((channels, fout, 1))))

    def logits(self, x: Tensor) -> Tensor:
        """x: [C, 1, K] -> CDF logits [C, 1, K]."""
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = T.matmul(T.softplus(m), x) + b
            if i < len(self.factors):
                x = x + T.tanh(self.factors[i]) * T.tanh(x)
        return x

    def _channel_major(self, z) -> tuple:
        z = T.as_tensor(z)
        if z.ndim == 3:
            z = T.reshape(z, (1,) + z.shape)
        n, c, h, w = z.shape
        if c != self.channels:
            raise T.ShapeError(f"factorized density has {self.channels} channels, input {z.shape}")
        flat = T.reshape(T.transpose(z, (1, 0, 2, 3)), (c, 1, n * h * w))
        return flat, (n, c, h, w)

    def _restore(self, flat: Tensor, shape: tuple, squeeze: bool) -> Tensor:
        n, c, h, w = shape
        out = T.transpose(T.reshape(flat, (c, n, h, w)), (1, 0, 2, 3))
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def likelihood(self, z_hat, floor: float = LIKELIHOOD_FLOOR) -> Tensor:
        squeeze = T.as_tensor(z_hat).ndim == 3
        flat, shape = self._channel_major(z_hat)
        lo = self.logits(flat - 0.5)
        hi = self.logits(flat + 0.5)
        # evaluate in the tail that avoids cancellation
        sign = -np.sign((lo + hi).data)
        sign[sign == 0] = -1.0
        p = T.abs_(T.sigmoid(hi * sign) - T.sigmoid(lo * sign))
        if floor:
            p = T.clamp(p, floor, None)
        return self._restore(p, shape, squeeze)

    def cdf(self, values: np.ndarray) -> np.ndarray:
        """CDF of every channel at ``values`` (1-d) -> [C, len(values)]; no tape."""
        with T.no_grad():
            x = np.broadcast_to(np.asarray(values, dtype=float), (self.channels, 1, len(values)))
            return T.sigmoid(self.logits(Tensor(x))).data[:, 0, :]


def likelihood_z(z_hat, density: FactorizedDensity, floor: float = LIKELIHOOD_FLOOR) -> Tensor:
    return density.likelihood(z_hat, floor)


def likelihood_y(y_hat, mu, sigma, floor: float = TAIL_MASS, sigma_min: float = SIGMA_MIN) -> Tensor:
    """P(y_hat) under N(mu, sigma) convolved with U(-1/2, 1/2), floored at ``floor``."""
    sigma = T.clamp(T.as_tensor(sigma), sigma_min, None)
    d = T.abs_(T.as_tensor(y_hat) - mu)
    upper = T.normal_cdf((0.5 - d) / sigma)
    lower = T.normal_cdf((-0.5 - d) / sigma)
    p = upper - lower
    if floor:
        p = T.clamp(p, floor, None)
    return p


def bits(p: Tensor) -> Tensor:
    """-sum log2 p."""
    return -T.log2(p).sum()


def rate_y(y_hat, mu, sigma) -> Tensor:
    return bits(likelihood_y(y_hat, mu, sigma))


def rate_z(z_hat, density: FactorizedDensity) -> Tensor:
    return bits(likelihood_z(z_hat, density))
