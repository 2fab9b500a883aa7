"""Write a synthetic HR/LR PNG dataset for smoke-testing train and eval.

    python scripts/make_synthetic_dataset.py out/ --count 8 --size 48 --scale 2
"""
import argparse
from pathlib import Path

from lamnet.data import synthetic_pairs, write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=48, help="LR side length")
    ap.add_argument("--scale", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    pairs = synthetic_pairs(args.count, args.size, args.scale, seed=args.seed)
    names = write_dataset(pairs, args.out / "HR", args.out / f"LR_x{args.scale}")
    print(f"wrote {len(names)} pairs under {args.out}")


if __name__ == "__main__":
    main()
