"""Plot one or more columns of a CSV produced by the CLI or the scripts here.

    python scripts/plot_csv.py run/train_log.csv --x step --y loss --logy -o loss.png
    python scripts/plot_csv.py k_sweep.csv --x K --y fsa_flops dense_window_flops -o k.png

Needs matplotlib (``pip install .[plot]``). Lines starting with '#' are skipped.
"""
import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path) as f:
        return list(csv.DictReader(line for line in f if line.strip() and not line.startswith("#")))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("--x", required=True)
    ap.add_argument("--y", nargs="+", required=True)
    ap.add_argument("--logy", action="store_true")
    ap.add_argument("-o", "--out", default="plot.png")
    args = ap.parse_args()
    rows = read(args.csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in args.y:
        pts = [(float(r[args.x]), float(r[col])) for r in rows if r.get(col) not in (None, "")]
        ax.plot(*zip(*pts), marker="o" if len(pts) < 30 else None, label=col)
    ax.set_xlabel(args.x)
    if args.logy:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
