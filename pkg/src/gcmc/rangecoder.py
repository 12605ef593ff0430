"""32-bit carry-less range coder with 16-bit frequency tables.

Symbol alphabets are [V_MIN, V_MAX] plus one escape entry; an escaped value is
followed by its raw 32-bit two's complement pattern coded as two uniform
16-bit symbols.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
V_MIN = -127
V_MAX = 127
NUM_SYMBOLS = V_MAX - V_MIN + 1
ESCAPE = NUM_SYMBOLS  # table index of the escape entry

MEAN_STEPS = 64
SIGMA_MIN = 0.01
SIGMA_MAX = 64.0
SIGMA_LEVELS = 64

_MASK = 0xFFFFFFFF
_TOP = 1 << 24
_BOT = 1 << 16
FLUSH_BYTES = 2


class CorruptStreamError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedCdf:
    """Cumulative frequencies over [v_min, v_max] + escape; cdf[0] = 0, cdf[-1] = TOTAL."""

    cdf: np.ndarray
    v_min: int = V_MIN
    v_max: int = V_MAX

    def __post_init__(self):
        c = np.asarray(self.cdf)
        if c.shape != (self.v_max - self.v_min + 3,):
            raise ValueError(f"cdf length {c.shape} does not fit alphabet [{self.v_min}, {self.v_max}] + escape")
        if c[0] != 0 or c[-1] != TOTAL or np.any(np.diff(c) < 1):
            raise ValueError("cdf must start at 0, end at 2**16 and be strictly increasing")

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf)

    def bits(self, value: int) -> float:
        """Code length of ``value`` under this table (escape includes its 32 raw bits)."""
        if self.v_min <= value <= self.v_max:
            i = value - self.v_min
            return PRECISION - np.log2(float(self.cdf[i + 1] - self.cdf[i]))
        return PRECISION - np.log2(float(self.cdf[-1] - self.cdf[-2])) + 32.0


def pmf_to_cdf(pmf: np.ndarray) -> np.ndarray:
    """Integer cumulative table from probabilities over the in-range symbols.

    The escape entry gets frequency 1 and every symbol at least 1; rounding slack
    goes to (or comes from) the most probable symbols.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    budget = TOTAL - 1
    total = pmf.sum()
    freq = np.maximum(1, np.rint(pmf / total * budget)).astype(np.int64) if total > 0 else np.ones(len(pmf), np.int64)
    diff = budget - int(freq.sum())
    order = np.argsort(-freq, kind="stable")
    i = 0
    while diff != 0:
        j = order[i % len(order)]
        if diff > 0:
            freq[j] += diff
            diff = 0
        else:
            take = min(-diff, int(freq[j]) - 1)
            freq[j] -= take
            diff += take
            i += 1
    cdf = np.zeros(len(pmf) + 2, dtype=np.int64)
    cdf[1:-1] = np.cumsum(freq)
    cdf[-1] = TOTAL
    return cdf


# ---------------------------------------------------------------------------
# Gaussian tables
# ---------------------------------------------------------------------------

SIGMA_TABLE = np.geomspace(SIGMA_MIN, SIGMA_MAX, SIGMA_LEVELS)
# geometric midpoints between neighbouring levels; comparing sigma against these in
# linear space avoids evaluating a logarithm while coding, so the encoder (whole
# arrays) and the decoder (one scalar at a time) cannot round differently
_SIGMA_EDGES = np.sqrt(SIGMA_TABLE[1:] * SIGMA_TABLE[:-1])


def snap_sigma(sigma) -> np.ndarray:
    """Index into SIGMA_TABLE nearest in log scale (clamped to the table)."""
    s = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    return np.searchsorted(_SIGMA_EDGES, s, side="right")


def snap_mean(mu) -> tuple:
    """mu rounded to the 1/64 grid, split into (integer part, fractional step in [0, 64))."""
    m = np.asarray(mu, dtype=np.float64) * MEAN_STEPS
    q = (np.sign(m) * np.floor(np.abs(m) + 0.5)).astype(np.int64)
    return q >> 6, q & (MEAN_STEPS - 1)


@lru_cache(maxsize=1)
def gaussian_bank() -> np.ndarray:
    """[MEAN_STEPS, SIGMA_LEVELS, NUM_SYMBOLS + 2] cumulative tables for offsets from floor(mu)."""
    offsets = np.arange(V_MIN, V_MAX + 1, dtype=np.float64)
    bank = np.zeros((MEAN_STEPS, SIGMA_LEVELS, NUM_SYMBOLS + 2), dtype=np.int64)
    for f in range(MEAN_STEPS):
        d = np.abs(offsets - f / MEAN_STEPS)
        for s, sigma in enumerate(SIGMA_TABLE):
            pmf = ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)
            bank[f, s] = pmf_to_cdf(pmf)
    bank.setflags(write=False)
    return bank


def quantize_gaussian_cdf(mu: float, sigma: float) -> tuple:
    """(QuantizedCdf, integer offset): code ``y - offset`` with the returned table."""
    base, frac = snap_mean(mu)
    idx = snap_sigma(sigma)
    return QuantizedCdf(gaussian_bank()[int(frac), int(idx)]), int(base)


# ---------------------------------------------------------------------------
# Range coder core
# ---------------------------------------------------------------------------

class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += cum * r
        self.range = r * freq
        low, rng, out = self.low, self.range, self.out
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = -low & (_BOT - 1)
            out.append(low >> 24)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        # smallest multiple of 2**16 inside [low, low + range)
        v = (self.low + _BOT - 1) & ~(_BOT - 1)
        self.out.append(v >> 24)
        self.out.append((v >> 16) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()
        self._r = 0

    def _byte(self) -> int:
        p = self.pos
        self.pos += 1
        return self.data[p] if p < len(self.data) else 0

    def target(self) -> int:
        self._r = self.range >> PRECISION
        v = (self.code - self.low) // self._r
        if not 0 <= v < TOTAL:
            raise CorruptStreamError("range decoder state outside the coding interval")
        return v

    def consume(self, cum: int, freq: int) -> None:
        self.low += cum * self._r
        self.range = self._r * freq
        low, rng, code = self.low, self.range, self.code
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = -low & (_BOT - 1)
            code = ((code << 8) | self._byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def overrun(self) -> int:
        return self.pos - len(self.data)

    def finish(self) -> None:
        """Check that exactly the flushed tail was consumed and that it is the value the encoder flushed.

        A decoder that followed the encoder symbol for symbol ends with the same
        ``low``, so its code register must hold the flushed multiple of 2**16
        followed by the two implicit zero bytes.  Truncation, trailing junk and
        most payload damage fail one of the two checks.
        """
        if self.overrun() != 4 - FLUSH_BYTES:
            raise CorruptStreamError(
                f"segment length mismatch: decoder read {self.pos} bytes of a {len(self.data)}-byte segment")
        if self.code != (self.low + _BOT - 1) & ~(_BOT - 1) & _MASK:
            raise CorruptStreamError("final coder state does not match the flushed value")


# ---------------------------------------------------------------------------
# Symbol level
# ---------------------------------------------------------------------------

def encode_value(enc: RangeEncoder, value: int, table: QuantizedCdf) -> None:
    cdf = table.cdf
    if table.v_min <= value <= table.v_max:
        i = value - table.v_min
        enc.encode(int(cdf[i]), int(cdf[i + 1] - cdf[i]))
        return
    enc.encode(int(cdf[-2]), int(cdf[-1] - cdf[-2]))
    raw = int(value) & _MASK
    enc.encode(raw >> 16, 1)
    enc.encode(raw & 0xFFFF, 1)


def decode_value(dec: RangeDecoder, table: QuantizedCdf) -> int:
    cdf = table.cdf
    t = dec.target()
    i = int(np.searchsorted(cdf, t, side="right")) - 1
    if not (0 <= i < len(cdf) - 1 and cdf[i] <= t < cdf[i + 1]):
        raise CorruptStreamError(f"target {t} outside cumulative table")
    dec.consume(int(cdf[i]), int(cdf[i + 1] - cdf[i]))
    if i < len(cdf) - 2:
        return i + table.v_min
    hi = dec.target()
    dec.consume(hi, 1)
    lo = dec.target()
    dec.consume(lo, 1)
    raw = (hi << 16) | lo
    return raw - (1 << 32) if raw & 0x80000000 else raw


def encode_symbols(symbols, cdf_provider, enc: RangeEncoder | None = None) -> RangeEncoder:
    """Encode ``symbols`` with ``cdf_provider(i) -> QuantizedCdf``; returns the encoder."""
    enc = enc if enc is not None else RangeEncoder()
    for i, s in enumerate(symbols):
        encode_value(enc, int(s), cdf_provider(i))
    return enc


def decode_symbols(dec: RangeDecoder | bytes, cdf_provider, count: int) -> list:
    if not isinstance(dec, RangeDecoder):
        dec = RangeDecoder(dec)
    return [decode_value(dec, cdf_provider(i)) for i in range(count)]


def estimate_bits(symbols, cdf_provider) -> float:
    return float(sum(cdf_provider(i).bits(int(s)) for i, s in enumerate(symbols)))
