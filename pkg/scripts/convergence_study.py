"""Paired runs of the GDN-residual codec and a same-depth plain-ReLU codec.

For each seed, reports how many steps the GDN-residual run needs to reach the
ReLU run's smoothed loss at the last step, and the resulting speed-up.
"""
import argparse

import numpy as np

from gcmc.codec import ModelConfig
from gcmc.data import synthetic_image
from gcmc.train import TrainConfig, compare_convergence, train, write_csv

VARIANTS = {"gdn_residual": ModelConfig.desk(), "relu_plain": ModelConfig.desk(activation="relu", residual=False)}


def run_pair(images, seed, steps, batch, lr, lam=32.0):
    curves = {}
    for name, model in VARIANTS.items():
        cfg = TrainConfig(lam=lam, steps=steps, batch=batch, lr_main=lr, lr_main_late=lr, lr_context=lr / 2,
                          seed=seed, model=model)
        curves[name] = [row[1] for row in train(images, cfg).curve]
    return curves


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--csv", help="write per-step losses here")
    args = p.parse_args()
    images = [synthetic_image(np.random.default_rng(i)) for i in range(args.images)]
    rows, wins = [], 0
    for seed in range(args.seeds):
        curves = run_pair(images, seed, args.steps, args.batch, args.lr)
        reached, target = compare_convergence(curves["gdn_residual"], curves["relu_plain"], at=args.steps)
        win = reached is not None and reached < args.steps
        wins += win
        speed = f"{args.steps / reached:.2f}x" if reached else "never"
        print(f"seed {seed}: target {target:.4f}, GDN-residual reaches it at step {reached} ({speed})", flush=True)
        rows += [(seed, i, a, b) for i, (a, b) in enumerate(zip(curves["gdn_residual"], curves["relu_plain"]))]
    print(f"GDN-residual faster in {wins} of {args.seeds} seeds")
    if args.csv:
        write_csv(args.csv, ("seed", "step", "gdn_residual", "relu_plain"), rows)


if __name__ == "__main__":
    main()
