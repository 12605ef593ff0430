"""Analysis/synthesis transforms, hyperprior path, ICN and the bitstream codec."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rangecoder as rc
from . import tensor as T
from .context import ContextConfig, GatedContextModel, SerialDecoder, positions
from .entropy import FactorizedDensity, likelihood_y, likelihood_z, noisy_quantize, round_quantize
from .layers import GDN, Conv2d, ConvTranspose2d, ICNUnit, Module, PReLU, ResBlock, make_activation, param
from .tensor import Tensor

LAMBDA_PRESETS = (2, 8, 32, 128, 384)
NO_LAMBDA = 255

MAGIC = b"GCMC"
VERSION = 1
_HEADER = struct.Struct("<4sBQHHBI")
HEADER_SIZE = _HEADER.size


class HashMismatchError(ValueError):
    pass


CorruptStreamError = rc.CorruptStreamError


@dataclass
class ModelConfig:
    N: int = 48
    M: int = 32
    hyper_channels: int | None = None  # defaults to N
    kernel: int = 5
    activation: str = "gdn"  # "gdn" or "relu" (plain baseline)
    residual: bool = True
    decoder_norm: str = "igdn"  # "igdn" or "gdn"
    resblock_layout: str = "act-conv-act-conv-add"
    context: ContextConfig = field(default_factory=ContextConfig)
    context_input: str = "noisy"  # latent fed to the context model while training
    pad_multiple: int = 64
    lambdas: tuple = LAMBDA_PRESETS

    def __post_init__(self):
        if isinstance(self.context, dict):
            self.context = ContextConfig(**self.context)
        self.lambdas = tuple(self.lambdas)
        if self.M > self.N:
            raise ValueError(f"M ({self.M}) must not exceed N ({self.N})")
        if self.activation not in ("gdn", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.decoder_norm not in ("igdn", "gdn"):
            raise ValueError(f"unknown decoder_norm {self.decoder_norm!r}")

    @property
    def Z(self) -> int:
        return self.hyper_channels or self.N

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-scale widths (N=192, M=128)."""
        return cls(N=192, M=128)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small variant that trains in minutes on one CPU core."""
        return cls(**{"N": 12, "M": 8, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CodecModel(Module):
    """E, D, h_e, h_d, ICN, context model P and the factorized density for z."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        N, M, Z, k = cfg.N, cfg.M, cfg.Z, cfg.kernel
        act = cfg.activation
        inverse = cfg.decoder_norm == "igdn"

        def res(inv):
            return ResBlock(N, rng, activation=act, inverse=inv, residual=cfg.residual)

        # analysis: 4 stride-2 stages, residual blocks after stages 2 and 3
        self.enc = [Conv2d(3, N, k, 2, rng), make_activation(act, N),
                    Conv2d(N, N, k, 2, rng), make_activation(act, N), res(False),
                    Conv2d(N, N, k, 2, rng), make_activation(act, N), res(False),
                    Conv2d(N, M, k, 2, rng)]
        # synthesis mirrors it on the [y_hat, ICN(z_p)] concatenation
        self.dec = [ConvTranspose2d(2 * M, N, k, 2, rng), make_activation(act, N, inverse), res(inverse),
                    ConvTranspose2d(N, N, k, 2, rng), make_activation(act, N, inverse), res(inverse),
                    ConvTranspose2d(N, N, k, 2, rng), make_activation(act, N, inverse),
                    ConvTranspose2d(N, 3, k, 2, rng)]
        self.hyper_enc = [Conv2d(M, Z, k, 2, rng), PReLU(Z), Conv2d(Z, Z, k, 2, rng)]
        self.hyper_dec = [ConvTranspose2d(Z, Z, k, 2, rng), PReLU(Z), ConvTranspose2d(Z, 2 * M, k, 2, rng)]
        self.icn_proj = Conv2d(2 * M, M, 1, 1, rng)
        self.icn = [ICNUnit(M, rng) for _ in range(3)]
        self.context = GatedContextModel(cfg.context, rng)
        self.density = FactorizedDensity(Z)

    # -- transforms -----------------------------------------------------------
    @staticmethod
    def _run(layers, x):
        for layer in layers:
            x = layer(x)
        return x

    def encode_transform(self, x) -> Tensor:
        x = T.as_tensor(x)
        if min(x.shape[-2:]) <= 0:
            raise T.ShapeError(f"image dims must be positive, got {x.shape}")
        return self._run(self.enc, x)

    def hyper_encode(self, y) -> Tensor:
        return self._run(self.hyper_enc, T.as_tensor(y))

    def hyper_decode(self, z_hat) -> Tensor:
        return self._run(self.hyper_dec, T.as_tensor(z_hat))

    def icn_forward(self, z_p) -> Tensor:
        return self._run(self.icn, self.icn_proj(T.as_tensor(z_p)))

    def decode_transform(self, y_hat, z_p, clamp: bool = True) -> Tensor:
        """Synthesis from [y_hat, ICN(z_p)]; output clamped to [0, 1] unless ``clamp`` is off."""
        y_hat = T.as_tensor(y_hat)
        feats = T.concat([y_hat, self.icn_forward(z_p)], axis=-3)
        out = self._run(self.dec, feats)
        return T.clamp(out, 0.0, 1.0) if clamp else out

    def forward(self, x, rng: np.random.Generator) -> dict:
        """Training pass with additive-noise quantisation; bits are totals over the batch."""
        y = self.encode_transform(x)
        y_tilde = noisy_quantize(y, rng)
        z = self.hyper_encode(y)
        z_tilde = noisy_quantize(z, rng)
        z_p = self.hyper_decode(z_tilde)
        ctx_in = y_tilde if self.cfg.context_input == "noisy" else Tensor(round_quantize(y))
        mu, sigma = self.context.predict_params(ctx_in, z_p)
        p_y = likelihood_y(y_tilde, mu, sigma)
        p_z = likelihood_z(z_tilde, self.density)
        # no clamp while training: the clamp would cut the gradient of every
        # out-of-range pixel, and early on that is about half of them
        x_hat = self.decode_transform(y_tilde, z_p, clamp=False)
        return {"x_hat": x_hat, "y": y, "z": z, "mu": mu, "sigma": sigma,
                "bits_y": -T.log2(p_y).sum(), "bits_z": -T.log2(p_z).sum()}


# ---------------------------------------------------------------------------
# Codec state, tables and hashing
# ---------------------------------------------------------------------------

class CodecState:
    """Frozen model plus the config hash that binds bitstreams to it."""

    def __init__(self, model: CodecModel):
        self.model = model
        self.config = model.cfg
        self.config_hash = compute_hash(model)
        self._z_tables = None

    def z_tables(self) -> list:
        if self._z_tables is None:
            edges = np.arange(rc.V_MIN, rc.V_MAX + 2, dtype=np.float64) - 0.5
            cdf = self.model.density.cdf(edges)
            pmf = np.maximum(np.diff(cdf, axis=1), 0.0)
            self._z_tables = [rc.QuantizedCdf(rc.pmf_to_cdf(p)) for p in pmf]
        return self._z_tables


def compute_hash(model: CodecModel) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# Bitstream
# ---------------------------------------------------------------------------

@dataclass
class Header:
    config_hash: int
    width: int
    height: int
    lambda_index: int
    z_length: int
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.config_hash, self.width, self.height,
                            self.lambda_index, self.z_length)

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < HEADER_SIZE:
            raise CorruptStreamError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
        magic, version, chash, w, h, lam, zlen = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        if w == 0 or h == 0:
            raise CorruptStreamError("zero image dimension in header")
        if lam != NO_LAMBDA and lam >= len(LAMBDA_PRESETS):
            raise CorruptStreamError(f"lambda index {lam} out of range")
        if HEADER_SIZE + zlen > len(data):
            raise CorruptStreamError(f"z segment length {zlen} exceeds stream")
        return cls(chash, w, h, lam, zlen, version)


@dataclass
class CompressResult:
    stream: bytes
    y_hat: np.ndarray
    z_hat: np.ndarray
    est_bits_y: float
    est_bits_z: float
    header: Header

    @property
    def est_bits(self) -> float:
        return self.est_bits_y + self.est_bits_z

    @property
    def bits(self) -> int:
        return 8 * len(self.stream)

    def bpp(self) -> float:
        return self.bits / (self.header.width * self.header.height)

    def est_bpp(self) -> float:
        return self.est_bits / (self.header.width * self.header.height)


@dataclass
class DecompressResult:
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    header: Header


def lambda_index(lam) -> int:
    if lam is None:
        return NO_LAMBDA
    for i, v in enumerate(LAMBDA_PRESETS):
        if float(lam) == float(v):
            return i
    return NO_LAMBDA


def pad_image(x: np.ndarray, multiple: int) -> np.ndarray:
    c, h, w = x.shape
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _y_tables(mu: np.ndarray, sigma: np.ndarray) -> tuple:
    base, frac = rc.snap_mean(mu)
    sidx = rc.snap_sigma(sigma)
    return base, frac, sidx


def compress(x, state: CodecState, lam=None) -> CompressResult:
    """Encode an image [3, H, W] in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise T.ShapeError(f"compress expects a [3,H,W] image, got {x.shape}")
    _, h, w = x.shape
    if h <= 0 or w <= 0 or h > 0xFFFF or w > 0xFFFF:
        raise T.ShapeError(f"image dims {h}x{w} outside 1..65535")
    m = state.model
    xp = pad_image(x, state.config.pad_multiple)
    with T.no_grad():
        y = m.encode_transform(Tensor(xp))
        y_hat = round_quantize(y)
        z_hat = round_quantize(m.hyper_encode(y))
        # z: static per-channel tables, channel then raster
        ztabs = state.z_tables()
        zenc = rc.RangeEncoder()
        zbits = 0.0
        for c in range(z_hat.shape[0]):
            for v in z_hat[c].reshape(-1):
                rc.encode_value(zenc, int(v), ztabs[c])
                zbits += ztabs[c].bits(int(v))
        zseg = zenc.finish()
        z_p = m.hyper_decode(Tensor(z_hat))
        # same evaluator the serial decoder uses
        mu, sigma = m.context.inference(z_p, y_hat.shape)(y_hat)
    base, frac, sidx = _y_tables(mu, sigma)
    bank = rc.gaussian_bank()
    yenc = rc.RangeEncoder()
    ybits = 0.0
    for pos in positions(y_hat.shape):
        table = rc.QuantizedCdf(bank[frac[pos], sidx[pos]])
        sym = int(y_hat[pos]) - int(base[pos])
        rc.encode_value(yenc, sym, table)
        ybits += table.bits(sym)
    yseg = yenc.finish()
    header = Header(state.config_hash, w, h, lambda_index(lam), len(zseg))
    return CompressResult(header.pack() + zseg + yseg, y_hat, z_hat, ybits, zbits, header)


def read_header(stream: bytes) -> Header:
    return Header.unpack(stream)


def decompress_full(stream: bytes, state: CodecState) -> DecompressResult:
    header = Header.unpack(stream)
    if header.config_hash != state.config_hash:
        raise HashMismatchError(f"stream was produced by model {header.config_hash:016x}, "
                                f"loaded model is {state.config_hash:016x}")
    cfg, m = state.config, state.model
    mult = cfg.pad_multiple
    hp, wp = -(-header.height // mult) * mult, -(-header.width // mult) * mult
    y_shape = (cfg.M, hp // 16, wp // 16)
    z_shape = (cfg.Z, hp // 64, wp // 64)
    zseg = stream[HEADER_SIZE:HEADER_SIZE + header.z_length]
    yseg = stream[HEADER_SIZE + header.z_length:]

    zdec = rc.RangeDecoder(zseg)
    ztabs = state.z_tables()
    z_hat = np.zeros(z_shape)
    per = z_shape[1] * z_shape[2]
    for c in range(z_shape[0]):
        z_hat[c] = np.array([rc.decode_value(zdec, ztabs[c]) for _ in range(per)]).reshape(z_shape[1:])
    zdec.finish()

    with T.no_grad():
        z_p = m.hyper_decode(Tensor(z_hat))
    serial = SerialDecoder(m.context, z_p, y_shape)
    ydec = rc.RangeDecoder(yseg)
    bank = rc.gaussian_bank()
    while serial.next_position is not None:
        pos = serial.next_position
        mu, sigma = serial.params_at(pos)
        base, frac = rc.snap_mean(mu)
        table = rc.QuantizedCdf(bank[int(frac), int(rc.snap_sigma(sigma))])
        serial.commit(rc.decode_value(ydec, table) + int(base))
    ydec.finish()
    y_hat = serial.latent
    with T.no_grad():
        x_hat = m.decode_transform(Tensor(y_hat), z_p).data
    return DecompressResult(x_hat[:, :header.height, :header.width].copy(), y_hat, z_hat, header)


def decompress(stream: bytes, state: CodecState) -> np.ndarray:
    return decompress_full(stream, state).x_hat


# ---------------------------------------------------------------------------
# Checkpoints: a directory of LTNS tensors plus a JSON manifest
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(path, model: CodecModel, extra: dict | None = None) -> Path:
    """Write the checkpoint directory atomically: stage in a sibling, then swap it in."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = {}
        for i, (name, p) in enumerate(model.named_parameters()):
            fname = f"t{i:04d}.ltns"
            T.save_tensor(stage / fname, p)
            entries[name] = fname
        manifest = {"format": "gcmc-checkpoint", "version": 1, "config": model.cfg.to_dict(),
                    "hash": f"{compute_hash(model):016x}", "tensors": entries, **(extra or {})}
        (stage / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            path.rename(old)
        stage.rename(path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> CodecModel:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    model = CodecModel(ModelConfig.from_dict(manifest["config"]))
    model.load_state_dict({k: T.load_tensor(path / f).data for k, f in manifest["tensors"].items()})
    return model


def load_state(path) -> CodecState:
    return CodecState(load_checkpoint(path))
