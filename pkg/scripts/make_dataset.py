"""Write a directory of procedural 64x64 PPM images for desk-scale training."""
import argparse

from gcmc.data import make_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    paths = make_dataset(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out}")


if __name__ == "__main__":
    main()
