"""Command line: ``gcmc train | encode | decode | eval | inspect``.

Exit codes: 0 ok, 2 bad arguments or missing inputs, 3 corrupt stream, 4 model/stream hash mismatch.
Set ``GCMC_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""
from __future__ import annotations

import argparse
import ast
import dataclasses
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import codec, metrics
from .codec import CorruptStreamError, HashMismatchError, LAMBDA_PRESETS, ModelConfig
from .context import ContextConfig, positions, sensitivity_matrix, theoretical_field
from .imageio import atomic_write_bytes, list_images, load_image, save_image
from .train import TrainConfig, evaluate_image, rd_sweep, train, write_csv, RD_FIELDS

EXIT_OK, EXIT_ARGS, EXIT_CORRUPT, EXIT_HASH = 0, 2, 3, 4

log = logging.getLogger("gcmc")


class UsageError(Exception):
    """Bad arguments or missing inputs (exit 2)."""


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path) -> dict:
    """``key = value`` lines; '#' starts a comment.  Values are Python literals or bare strings."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def build_configs(overrides: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Apply overrides to TrainConfig; ``model.X`` and ``context.X`` keys reach the nested configs.

    Unprefixed keys are tried on TrainConfig first, then ModelConfig.
    """
    base = base or TrainConfig()
    tr = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    model = dataclasses.asdict(base.model)
    ctx = model.pop("context")
    tfields = set(tr) - {"model"}
    mfields = {f.name for f in dataclasses.fields(ModelConfig)} - {"context"}
    cfields = {f.name for f in dataclasses.fields(ContextConfig)}
    for key, value in overrides.items():
        if key.startswith("context."):
            target, name, allowed = ctx, key[8:], cfields
        elif key.startswith("model."):
            target, name, allowed = model, key[6:], mfields
        elif key in tfields:
            target, name, allowed = tr, key, tfields
        else:
            target, name, allowed = model, key, mfields
        if name not in allowed:
            raise UsageError(f"unknown config key {key!r}")
        target[name] = value
    model["context"] = ContextConfig(**ctx)
    tr["model"] = ModelConfig(**model)
    try:
        return TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad configuration: {e}") from e


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} not found")
    return p


def _need_model(path) -> codec.CodecState:
    p = Path(path)
    if not (p / codec.MANIFEST).is_file():
        raise UsageError(f"model checkpoint {p} not found (expected a directory with {codec.MANIFEST})")
    return codec.load_state(p)


def _parse_lambda(value):
    if value is None:
        return None
    lam = float(value)
    if lam < 0:
        raise UsageError(f"lambda must be >= 0, got {value}")
    return lam


def _model_lambda(path):
    import json
    manifest = json.loads((Path(path) / codec.MANIFEST).read_text())
    return manifest.get("lam")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    data_dir = Path(args.dataset)
    if not data_dir.is_dir() or not list_images(data_dir):
        raise UsageError(f"dataset {data_dir} missing or has no images")
    overrides = read_config(args.config) if args.config else {}
    if args.lam is not None:
        overrides["lam"] = _parse_lambda(args.lam)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = build_configs(overrides)
    out = Path(args.out)
    t0 = time.perf_counter()
    result = train(data_dir, cfg, out_dir=out)
    points = rd_sweep(data_dir, {cfg.lam: result.checkpoint}, out / "rd.csv")
    mean_bpp = float(np.mean([p.bpp for p in points]))
    mean_d = float(np.mean([p.msssim for p in points]))
    print(f"trained {len(result.curve)} steps in {time.perf_counter() - t0:.1f}s; "
          f"eval loss {result.initial_eval:.4f} -> {result.final_eval:.4f}")
    print(f"checkpoint {result.checkpoint}; curve {out / 'loss.csv'}; rd {out / 'rd.csv'} "
          f"(mean {mean_bpp:.4f} bpp, MS-SSIM {mean_d:.4f})")
    return EXIT_OK


def cmd_encode(args) -> int:
    image = _need_file(args.image, "image")
    state = _need_model(args.model)
    lam = _parse_lambda(args.lam)
    if lam is None:
        lam = _model_lambda(args.model)
    x = load_image(image)
    t0 = time.perf_counter()
    res = codec.compress(x, state, lam)
    elapsed = time.perf_counter() - t0
    out = Path(args.out) if args.out else image.with_suffix(".gcm")
    atomic_write_bytes(out, res.stream)
    pixels = x.shape[1] * x.shape[2]
    print(f"wrote {out}: {len(res.stream)} bytes, {8 * len(res.stream) / pixels:.4f} bpp "
          f"(estimate {res.est_bpp():.4f} bpp), {x.shape[2]}x{x.shape[1]}, encode {elapsed:.2f}s")
    return EXIT_OK


def cmd_decode(args) -> int:
    stream = _need_file(args.stream, "stream").read_bytes()
    state = _need_model(args.model)
    t0 = time.perf_counter()
    res = codec.decompress_full(stream, state)
    elapsed = time.perf_counter() - t0
    out = Path(args.out) if args.out else Path(args.stream).with_suffix(".ppm")
    save_image(out, res.x_hat)
    print(f"wrote {out}: {res.header.width}x{res.header.height}, decode {elapsed:.2f}s")
    if args.original:
        x = load_image(_need_file(args.original, "original image"))
        if x.shape != res.x_hat.shape:
            raise UsageError(f"original {x.shape} does not match decoded {res.x_hat.shape}")
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            d = metrics.ms_ssim(res.x_hat, x).item()
        print(f"MS-SSIM {d:.6f} ({metrics.msssim_db(d):.3f} dB), PSNR {metrics.psnr(res.x_hat, x):.3f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir = Path(args.dataset)
    if not data_dir.is_dir() or not list_images(data_dir):
        raise UsageError(f"dataset {data_dir} missing or has no images")
    lams = args.lam or []
    if lams and len(lams) != len(args.model):
        raise UsageError("give one --lambda per --model (or none to use the checkpoints' own)")
    checkpoints = {}
    for i, m in enumerate(args.model):
        _need_model(m)
        lam = _parse_lambda(lams[i]) if lams else _model_lambda(m)
        if lam is None:
            raise UsageError(f"checkpoint {m} records no lambda; pass --lambda")
        if lam in checkpoints:
            raise UsageError(f"two checkpoints for lambda {lam}")
        checkpoints[lam] = m
    out = Path(args.out) if args.out else Path("rd.csv")
    points = rd_sweep(data_dir, checkpoints, out)
    for p in points:
        print(f"{p.image} lambda={p.lam:g} bpp={p.bpp:.4f} msssim={p.msssim:.5f} ({p.msssim_db:.2f} dB) "
              f"psnr={p.psnr:.2f}")
    print(f"wrote {out} ({len(points)} rows)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.stream is None and args.model is None:
        raise UsageError("inspect needs a stream file and/or --model")
    if args.stream is not None:
        data = _need_file(args.stream, "stream").read_bytes()
        h = codec.read_header(data)
        lam = LAMBDA_PRESETS[h.lambda_index] if h.lambda_index != codec.NO_LAMBDA else None
        print(f"magic      GCMC\nversion    {h.version}\nmodel hash {h.config_hash:016x}\n"
              f"width      {h.width}\nheight     {h.height}\nlambda     {lam if lam is not None else 'none'} "
              f"(index {h.lambda_index})\nz bytes    {h.z_length}\n"
              f"y bytes    {len(data) - codec.HEADER_SIZE - h.z_length}\ntotal      {len(data)}")
    if args.model is not None:
        state = _need_model(args.model)
        shape = tuple(int(v) for v in args.shape.split(","))
        if len(shape) != 3 or min(shape) < 1:
            raise UsageError(f"--shape must be M,H,W, got {args.shape!r}")
        ctx = state.model.context
        rng = np.random.default_rng(args.seed or 0)
        z_p = rng.normal(size=(ctx.cfg.hyper_features * shape[0],) + shape[1:]) if ctx.cfg.conditioned else None
        sens = sensitivity_matrix(ctx, shape, z_p, rng)
        field = theoretical_field(shape, ctx.cfg)
        out = Path(args.out) if args.out else Path("coverage.csv")
        labels = [f"{c}.{y}.{x}" for c, y, x in positions(shape)]
        write_csv(out, ["target\\source"] + labels, [[labels[i]] + list(map(float, row)) for i, row in enumerate(sens)])
        blind = int(np.sum(field & (sens == 0)))
        leaks = int(np.sum(~np.tril(np.ones_like(field), k=-1) & (sens != 0)))
        print(f"coverage {out}: {int(field.sum())} in-window causal pairs, {blind} with zero sensitivity, "
              f"{leaks} non-causal leaks")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcmc", description="Learned image codec with a gated 3-d context model")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a directory of images")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="output directory (checkpoint/, loss.csv, rd.csv)")
    t.add_argument("--lambda", dest="lam")
    t.add_argument("--config", help="flat key=value file overriding TrainConfig/ModelConfig")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)

    e = sub.add_parser("encode", help="compress an image")
    e.add_argument("image")
    e.add_argument("--model", required=True)
    e.add_argument("--out")
    e.add_argument("--lambda", dest="lam")

    d = sub.add_parser("decode", help="decompress a .gcm stream to PPM")
    d.add_argument("stream")
    d.add_argument("--model", required=True)
    d.add_argument("--out")
    d.add_argument("--original", help="reference image for MS-SSIM / PSNR")

    v = sub.add_parser("eval", help="RD sweep over checkpoints")
    v.add_argument("dataset")
    v.add_argument("--model", action="append", required=True)
    v.add_argument("--lambda", dest="lam", action="append")
    v.add_argument("--out")

    i = sub.add_parser("inspect", help="dump a stream header and/or a context-model coverage matrix")
    i.add_argument("stream", nargs="?")
    i.add_argument("--model")
    i.add_argument("--out", help="coverage CSV path")
    i.add_argument("--shape", default="4,4,4", help="latent M,H,W for the coverage sweep")
    i.add_argument("--seed", type=int)
    return p


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GCMC_LOG", "WARNING").upper(), format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_ARGS
    limit = nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("gcmc: --threads must be >= 1", file=sys.stderr)
            return EXIT_ARGS
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gcmc: {e}", file=sys.stderr)
        return EXIT_ARGS
    except HashMismatchError as e:
        print(f"gcmc: {e}", file=sys.stderr)
        return EXIT_HASH
    except CorruptStreamError as e:
        print(f"gcmc: corrupt stream: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (FileNotFoundError, ValueError) as e:
        print(f"gcmc: {e}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
