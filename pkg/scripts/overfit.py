"""Overfit a tiny model on four fixed synthetic patches and compare against bicubic.

    python scripts/overfit.py --steps 2000 --every 250
"""
import argparse
import time

import numpy as np

from lamnet import data as D
from lamnet.model import LamNetConfig, build
from lamnet.tensor import Tensor, no_grad
from lamnet.trainer import TrainConfig, train


def mean_psnr(model, lr, pairs, scale):
    with no_grad():
        sr = model(Tensor(lr)).data.astype(np.float64)
    return float(np.mean([D.evaluate_pair(sr[i], hr, scale)[0] for i, (_, hr) in enumerate(pairs)]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--every", type=int, default=250)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--pairs", type=int, default=2)
    ap.add_argument("--patch", type=int, default=64, help="LR patch side")
    ap.add_argument("--images", type=int, default=4)
    ap.add_argument("--lr0", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="write the training log CSV here")
    args = ap.parse_args()

    scale = 2
    pairs = D.synthetic_pairs(args.images, args.patch, scale, seed=args.seed)
    lr = np.stack([p[0] for p in pairs]).astype(np.float32)
    hr = np.stack([p[1] for p in pairs]).astype(np.float32)
    side = args.patch * scale
    bicubic = float(np.mean([D.evaluate_pair(D.bicubic_resize(l, side, side), h, scale)[0] for l, h in pairs]))
    print(f"bicubic psnr {bicubic:.3f} dB")

    model = build(LamNetConfig(channels=args.channels, num_blocks=1, pairs_per_block=args.pairs, scale=scale),
                  args.seed)
    t0 = time.perf_counter()

    def progress(step, row, m):
        if step % args.every == 0 or step == args.steps - 1:
            print(f"step {step:5d} lr {row.lr:.2e} loss {row.loss:.5f} "
                  f"psnr {mean_psnr(m, lr, pairs, scale):.3f} t {time.perf_counter() - t0:.0f}s", flush=True)

    log = train(model, D.FixedBatch(lr, hr), TrainConfig(total_steps=args.steps, lr0=args.lr0, seed=args.seed),
                callbacks=[progress])
    if args.log:
        with open(args.log, "w") as f:
            f.write(log.to_csv())
    losses = [r.loss for r in log.rows]
    if losses:
        final = mean_psnr(model, lr, pairs, scale)
        print(f"loss ratio {losses[-1] / losses[0]:.4f}  psnr {final:.3f} dB  gain {final - bicubic:+.3f} dB")


if __name__ == "__main__":
    main()
