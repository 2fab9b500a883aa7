"""Counted FSA cost against kernel length K, next to a dense K x K window reference.

    python scripts/k_sweep.py --channels 64 --size 1280x720 > k_sweep.csv
"""
import argparse

from lamnet.analysis import k_sweep, rows_to_csv
from lamnet.fsa import FocalSpec

SPECS = [
    FocalSpec((1,), (1,)),
    FocalSpec((1, 2), (1, 1)),
    FocalSpec((1, 2), (2, 1)),
    FocalSpec((1,), (6,)),
    FocalSpec((1, 2, 4), (1, 1, 1)),
    FocalSpec((1, 2), (3, 3)),
    FocalSpec((1, 2, 4), (3, 2, 1)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--size", default="64x64", help="HxW of the feature map")
    args = ap.parse_args()
    h, w = (int(v) for v in args.size.lower().split("x"))
    rows = k_sweep(SPECS, args.channels, args.groups, h, w)
    print(rows_to_csv(sorted(rows, key=lambda r: r["K"])), end="")


if __name__ == "__main__":
    main()
