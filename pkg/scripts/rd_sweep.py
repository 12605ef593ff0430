"""Desk RD sweep: a shared base model, one fine-tune per lambda, scored on a holdout set.

The base trains at lambda = 32 from scratch; every lambda then fine-tunes from
it with the same seed, so the models differ only through lambda.
"""
import argparse
from pathlib import Path

import numpy as np

from gcmc.codec import ModelConfig
from gcmc.data import synthetic_image
from gcmc.train import TrainConfig, mean_points, rd_sweep, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/rd")
    p.add_argument("--lambdas", type=float, nargs="+", default=[2, 32, 384])
    p.add_argument("--train-images", type=int, default=256)
    p.add_argument("--holdout", type=int, default=5)
    p.add_argument("--base-steps", type=int, default=1500)
    p.add_argument("--finetune-steps", type=int, default=1000)
    p.add_argument("--finetune-lr", type=float, default=2e-4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--seed", type=int, default=1, help="fine-tune seed (the base uses 0)")
    args = p.parse_args()

    model = ModelConfig.desk(N=args.N, M=args.M)
    images = [synthetic_image(np.random.default_rng(i)) for i in range(args.train_images)]
    holdout = [synthetic_image(np.random.default_rng(1000 + i)) for i in range(args.holdout)]
    out = Path(args.out)
    base = train(images, TrainConfig(lam=32, steps=args.base_steps, batch=args.batch, seed=0, model=model,
                                     lr_main=1e-3, lr_main_late=1e-4, lr_context=5e-4), out / "base")
    print(f"base: eval loss {base.initial_eval:.4f} -> {base.final_eval:.4f}", flush=True)
    checkpoints = {}
    for lam in args.lambdas:
        lr = args.finetune_lr
        cfg = TrainConfig(lam=lam, steps=args.finetune_steps, batch=args.batch, seed=args.seed, model=model,
                          lr_main=lr, lr_main_late=lr, lr_context=lr / 2)
        res = train(images, cfg, out / f"lambda_{lam:g}", init=base.checkpoint)
        checkpoints[lam] = res.checkpoint
        print(f"lambda {lam:g}: eval loss {res.initial_eval:.4f} -> {res.final_eval:.4f}", flush=True)
    points = rd_sweep(holdout, checkpoints, out / "rd.csv")
    for lam, (bpp, d) in mean_points(points).items():
        print(f"lambda {lam:g}: mean {bpp:.4f} bpp, mean MS-SSIM {d:.4f}")


if __name__ == "__main__":
    main()
