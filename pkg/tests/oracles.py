"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops (or mpmath) and shares
no code with the package, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np


def conv2d_loop(x, w, stride=1, pad=0):
    """x [Ci,H,W], w [Co,Ci,kh,kw], symmetric zero padding."""
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((ci, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for c in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            s += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = s
    return out


def conv3d_masked_loop(x, w, mask):
    """x [Ci,D,H,W], w [Co,Ci,k,k,k], 'same' zero padding, only taps with mask == 1."""
    ci, d, h, wd = x.shape
    co = w.shape[0]
    k = w.shape[2]
    r = k // 2
    out = np.zeros((co, d, h, wd))
    taps = [(a, b, c) for a in range(k) for b in range(k) for c in range(k) if mask[a, b, c]]
    for o in range(co):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    s = 0.0
                    for a, b, c in taps:
                        zz, yy, x3 = z + a - r, y + b - r, xx + c - r
                        if 0 <= zz < d and 0 <= yy < h and 0 <= x3 < wd:
                            for i in range(ci):
                                s += x[i, zz, yy, x3] * w[o, i, a, b, c]
                    out[o, z, y, xx] = s
    return out


def gaussian_bin_mp(y, mu, sigma, dps=50):
    """P(Y in [y - 1/2, y + 1/2]) for Y ~ N(mu, sigma^2), high precision."""
    with mpmath.workdps(dps):
        s = mpmath.mpf(sigma) * mpmath.sqrt(2)
        hi = (mpmath.mpf(y) + mpmath.mpf("0.5") - mu) / s
        lo = (mpmath.mpf(y) - mpmath.mpf("0.5") - mu) / s
        return (mpmath.erf(hi) - mpmath.erf(lo)) / 2


# ---------------------------------------------------------------------------
# scalar SSIM / MS-SSIM
# ---------------------------------------------------------------------------

def _gauss(size=11, sigma=1.5):
    g = [math.exp(-((i - (size - 1) / 2.0) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    return [v / s for v in g]


def _ssim_channel(a, b, win, c1, c2):
    """Mean SSIM and mean cs of one 2-d channel, computed window by window."""
    k = len(win)
    h, w = len(a), len(a[0])
    ssum = cssum = 0.0
    count = 0
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(k):
                for v in range(k):
                    g = win[u] * win[v]
                    p, q = a[i + u][j + v], b[i + u][j + v]
                    mx += g * p
                    my += g * q
                    sxx += g * p * p
                    syy += g * q * q
                    sxy += g * p * q
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            cs = (2 * cxy + c2) / (vx + vy + c2)
            lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
            ssum += lum * cs
            cssum += cs
            count += 1
    return ssum / count, cssum / count


def _pool(a):
    h, w = len(a) // 2, len(a[0]) // 2
    return [[(a[2 * i][2 * j] + a[2 * i + 1][2 * j] + a[2 * i][2 * j + 1] + a[2 * i + 1][2 * j + 1]) / 4.0
             for j in range(w)] for i in range(h)]


def ssim_scalar(x, y, k1=0.01, k2=0.03):
    """x, y: [C,H,W]; mean over channels of the per-channel mean SSIM."""
    win = _gauss()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = [_ssim_channel(x[c].tolist(), y[c].tolist(), win, c1, c2)[0] for c in range(x.shape[0])]
    return sum(vals) / len(vals)


def ms_ssim_scalar(x, y, weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333), k1=0.01, k2=0.03, floor=1e-6):
    """Multi-scale SSIM of [C,H,W] images; scales limited to what the image supports, weights renormalised."""
    win = _gauss()
    c1, c2 = k1 ** 2, k2 ** 2
    scales = 0
    while scales < len(weights) and min(x.shape[1:]) // (2 ** scales) >= 11:
        scales += 1
    wts = list(weights[:scales])
    tot = sum(wts)
    wts = [v / tot for v in wts]
    chans_x = [x[c].tolist() for c in range(x.shape[0])]
    chans_y = [y[c].tolist() for c in range(y.shape[0])]
    value = 1.0
    for j in range(scales):
        terms = [_ssim_channel(a, b, win, c1, c2) for a, b in zip(chans_x, chans_y)]
        s = sum(t[0] for t in terms) / len(terms)
        cs = sum(t[1] for t in terms) / len(terms)
        term = s if j == scales - 1 else cs
        value *= max(term, floor) ** wts[j]
        chans_x = [_pool(a) for a in chans_x]
        chans_y = [_pool(b) for b in chans_y]
    return value
