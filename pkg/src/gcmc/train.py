"""Rate-distortion training, the optimizer, and RD evaluation sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .codec import LAMBDA_PRESETS, CodecModel, CodecState, ModelConfig, compress, decompress_full, \
    load_checkpoint, load_state, save_checkpoint
from .data import load_dataset, random_crops
from .imageio import atomic_write_bytes, list_images, load_image
from .tensor import Tensor

log = logging.getLogger("gcmc.train")

DISTORTIONS = ("ms_ssim", "mse", "ssim")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 32.0
    lr_main: float = 1e-4
    lr_main_late: float = 1e-5
    lr_drop_epoch: int = 30
    lr_context: float = 5e-5
    batch: int = 8
    crop: int = 64
    epochs: int = 40
    # optional hard cap on optimizer steps; when set it wins over ``epochs``
    steps: int | None = None
    # defaults to ceil(dataset size / batch)
    steps_per_epoch: int | None = None
    seed: int = 0
    distortion: str = "ms_ssim"
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig.desk)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        for name in ("lr_main", "lr_main_late", "lr_context"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.batch < 1 or self.crop < 1:
            raise ValueError("batch and crop must be positive")
        if self.crop % self.model.pad_multiple:
            raise ValueError(f"crop {self.crop} must be a multiple of {self.model.pad_multiple}")
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"distortion must be one of {DISTORTIONS}, got {self.distortion!r}")

    def epoch_length(self, dataset_size: int) -> int:
        return self.steps_per_epoch or max(1, math.ceil(dataset_size / self.batch))

    def total_steps(self, dataset_size: int) -> int:
        return self.steps if self.steps is not None else self.epochs * self.epoch_length(dataset_size)

    def drop_step(self, dataset_size: int) -> int:
        """First step at the late learning rate.

        With a step cap the drop keeps its place as a fraction of the run
        (epoch 30 of 40 becomes 75% of ``steps``).
        """
        if self.steps is not None:
            return int(round(self.steps * min(self.lr_drop_epoch / self.epochs, 1.0)))
        return self.lr_drop_epoch * self.epoch_length(dataset_size)

    def lr_at(self, step: int, dataset_size: int) -> tuple:
        """(main lr, context-model lr) for a 0-based step; the main rate drops once."""
        late = step >= self.drop_step(dataset_size)
        return (self.lr_main_late if late else self.lr_main), self.lr_context


class Adam:
    """Adam over parameter groups, each with its own learning rate."""

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [list(g) for g in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in g] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g] for g in self.groups]

    def step(self, lrs) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for group, ms, vs, lr in zip(self.groups, self.m, self.v, lrs):
            for p, m, v in zip(group, ms, vs):
                if p.grad is None:
                    continue
                g = p.grad
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def distortion_score(x_hat, x, kind: str = "ms_ssim") -> Tensor:
    """Similarity d in [0, 1] (1 = perfect); for MSE, d = 1 - mse."""
    with warnings.catch_warnings():
        # desk crops are too small for every MS-SSIM scale; that is expected here
        warnings.simplefilter("ignore", RuntimeWarning)
        if kind == "ms_ssim":
            return metrics.ms_ssim(x_hat, x)
        if kind == "ssim":
            return metrics.ssim(x_hat, x)
    if kind == "mse":
        return 1.0 - metrics.mse(x_hat, x)
    raise ValueError(f"unknown distortion {kind!r}")


def loss(x, outputs: dict, lam: float, distortion: str = "ms_ssim") -> tuple:
    """lam * (1 - d) + R_y + R_z with rates in bits per pixel; returns (loss, rate_bpp, d)."""
    x = np.asarray(T.as_tensor(x).data)
    pixels = x.shape[0] * x.shape[-2] * x.shape[-1] if x.ndim == 4 else x.shape[-2] * x.shape[-1]
    rate = (outputs["bits_y"] + outputs["bits_z"]) / float(pixels)
    d = distortion_score(outputs["x_hat"], x, distortion)
    total = lam * (1.0 - d) + rate
    return total, rate.item(), d.item()


def eval_loss(model: CodecModel, x: np.ndarray, lam: float, distortion: str = "ms_ssim", seed: int = 0) -> float:
    """Loss on a fixed batch with a fixed noise draw (no tape)."""
    with T.no_grad():
        out = model.forward(Tensor(x), np.random.default_rng(seed))
        total, _, _ = loss(x, out, lam, distortion)
    return total.item()


@dataclass
class TrainResult:
    state: CodecState
    curve: list  # rows (step, loss, rate_bpp, distortion_d)
    initial_eval: float
    final_eval: float
    checkpoint: Path | None = None


CURVE_FIELDS = ("step", "loss", "rate_bpp", "distortion_d")


def write_csv(path, fields, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    atomic_write_bytes(path, buf.getvalue().encode())


def _param_groups(model: CodecModel) -> tuple:
    ctx = {id(p) for p in model.context.parameters()}
    main = [p for p in model.parameters() if id(p) not in ctx]
    return main, list(model.context.parameters())


def train(dataset, cfg: TrainConfig, out_dir=None, eval_batch: np.ndarray | None = None,
          init=None) -> TrainResult:
    """Train on ``dataset``, a directory or a list of [3,H,W] arrays.

    Starts from scratch, or from the checkpoint directory ``init`` (fine-tuning;
    its model config must equal ``cfg.model`` and the optimizer state starts fresh).

    With ``out_dir`` the final checkpoint goes to ``out_dir/checkpoint`` and the
    curve to ``out_dir/loss.csv``.  A non-finite loss or gradient aborts the run
    after saving the last good parameters.
    """
    images = list(dataset) if isinstance(dataset, (list, tuple)) else load_dataset(dataset)
    if not images:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        model = CodecModel(cfg.model, seed=cfg.seed)
    else:
        model = load_checkpoint(init)
        if model.cfg != cfg.model:
            raise ValueError(f"checkpoint {init} was built with a different model config")
    main, ctx = _param_groups(model)
    opt = Adam([main, ctx])
    if eval_batch is None:
        eval_batch = random_crops(images, min(cfg.batch, 4), cfg.crop, np.random.default_rng(cfg.seed + 7919))
    initial = eval_loss(model, eval_batch, cfg.lam, cfg.distortion, cfg.seed)
    curve = []
    total_steps = cfg.total_steps(len(images))
    ckpt = out_dir / "checkpoint" if out_dir is not None else None

    for step in range(total_steps):
        x = random_crops(images, cfg.batch, cfg.crop, rng)
        out = model.forward(Tensor(x), rng)
        total, rate, d = loss(x, out, cfg.lam, cfg.distortion)
        value = total.item()
        if not math.isfinite(value):
            _abort(model, ckpt, step, f"loss is {value} (rate {rate}, d {d})")
        model.zero_grad()
        T.backward(total)
        bad = [n for n, p in model.named_parameters() if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            _abort(model, ckpt, step, f"non-finite gradient in {bad[:3]}")
        opt.step(cfg.lr_at(step, len(images)))
        model.project()
        curve.append((step, value, rate, d))
        if step % 50 == 0:
            log.info("step %d loss %.5f rate %.4f bpp d %.5f", step, value, rate, d)
        if ckpt is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, model, {"step": step + 1, "lam": cfg.lam})

    final = eval_loss(model, eval_batch, cfg.lam, cfg.distortion, cfg.seed)
    if out_dir is not None:
        save_checkpoint(ckpt, model, {"step": total_steps, "lam": cfg.lam})
        write_csv(out_dir / "loss.csv", CURVE_FIELDS, curve)
    return TrainResult(CodecState(model), curve, initial, final, ckpt)


def _abort(model: CodecModel, ckpt, step: int, why: str) -> None:
    # the failing step has not touched the parameters, so they are the last good ones
    if ckpt is not None:
        save_checkpoint(ckpt, model, {"step": step, "aborted": why})
    raise TrainingDiverged(f"step {step}: {why}")


# ---------------------------------------------------------------------------
# RD sweep
# ---------------------------------------------------------------------------

@dataclass
class RDPoint:
    image: str
    lam: float
    bpp: float
    msssim: float
    msssim_db: float
    psnr: float
    est_bpp: float = float("nan")

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be > 0, got {self.bpp}")


RD_FIELDS = ("image", "lambda", "bpp", "msssim", "msssim_db", "psnr")


def evaluate_image(x: np.ndarray, state: CodecState, lam=None, name: str = "") -> tuple:
    """Code one image for real and score the decoded result; returns (RDPoint, stream)."""
    res = compress(x, state, lam)
    x_hat = decompress_full(res.stream, state).x_hat
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        d = metrics.ms_ssim(x_hat, x).item()
    pixels = x.shape[1] * x.shape[2]
    point = RDPoint(name, float(lam) if lam is not None else float("nan"), 8.0 * len(res.stream) / pixels,
                    d, metrics.msssim_db(d), metrics.psnr(x_hat, x), res.est_bpp())
    return point, res.stream


def rd_sweep(dataset, checkpoints: dict, out_csv=None) -> list:
    """Per-image RD points for every lambda -> checkpoint entry, using actual stream sizes."""
    if isinstance(dataset, (list, tuple)):
        named = [(f"image{i:03d}", x) for i, x in enumerate(dataset)]
    else:
        named = [(p.name, load_image(p)) for p in list_images(dataset)]
    if not named:
        raise ValueError("empty dataset")
    points = []
    for lam in sorted(checkpoints, key=float):
        path = Path(checkpoints[lam])
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"missing checkpoint for lambda {lam}: {path}")
        state = load_state(path)
        for name, x in named:
            points.append(evaluate_image(x, state, lam, name)[0])
    if out_csv is not None:
        write_csv(out_csv, RD_FIELDS, [(p.image, p.lam, p.bpp, p.msssim, p.msssim_db, p.psnr) for p in points])
    return points


def mean_points(points: list) -> dict:
    """lambda -> (mean bpp, mean MS-SSIM)."""
    out = {}
    for lam in sorted({p.lam for p in points}):
        sel = [p for p in points if p.lam == lam]
        out[lam] = (float(np.mean([p.bpp for p in sel])), float(np.mean([p.msssim for p in sel])))
    return out


# ---------------------------------------------------------------------------
# convergence comparison
# ---------------------------------------------------------------------------

def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i - window + 1) : i + 1]."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(0, idx - window + 1)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


def steps_to_reach(losses, target: float, window: int = 50) -> int | None:
    """Number of steps after which the smoothed loss first drops to ``target`` (None if never)."""
    hits = np.flatnonzero(smooth(losses, window) <= target)
    return int(hits[0]) + 1 if len(hits) else None


def compare_convergence(a_losses, b_losses, at: int = 500, window: int = 50) -> tuple:
    """(steps run ``a`` needs to reach run ``b``'s smoothed loss at step ``at``, that target)."""
    target = float(smooth(b_losses[:at], window)[-1])
    return steps_to_reach(a_losses[:at], target, window), target


__all__ = ["Adam", "TrainConfig", "TrainResult", "RDPoint", "TrainingDiverged", "LAMBDA_PRESETS", "loss",
           "eval_loss", "train", "rd_sweep", "mean_points", "evaluate_image", "distortion_score",
           "smooth", "steps_to_reach", "compare_convergence"]
