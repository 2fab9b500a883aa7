"""``lamnet`` command line: train, infer, eval, analyze, gradcheck, bench, gates.

Exit codes: 0 success, 1 check failure, 2 input error, 3 state or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis as A
from . import config as RC
from . import data as D
from . import model as M
from .dgfn import gate_stats, histogram_csv
from .fsa import FocalSpec, kernel_len, receptive_field
from .nn import layer_norm
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_STATE = 0, 1, 2, 3

log = logging.getLogger("lamnet")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _load_model(path) -> M.LamNet:
    if not os.path.isfile(path):
        raise CliError(EXIT_INPUT, f"checkpoint not found: {path}")
    try:
        return M.load(path)
    except M.CheckpointError as e:
        raise CliError(EXIT_STATE, f"{path}: {e}") from None


def _run_config(args) -> RC.RunConfig:
    base = RC.RunConfig()
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise CliError(EXIT_INPUT, f"config file not found: {args.config}")
        try:
            base = RC.load(args.config)
        except RC.ConfigError as e:
            raise CliError(EXIT_INPUT, f"{args.config}: {e}") from None
    overrides = getattr(args, "set", None) or []
    if overrides:
        items = []
        for item in overrides:
            if "=" not in item:
                raise CliError(EXIT_INPUT, f"--set expects key=value, got {item!r}")
            items.append(tuple(item.split("=", 1)))
        try:
            base = RC.from_values(RC.parse_pairs([(k.strip(), v) for k, v in items]), base)
        except RC.ConfigError as e:
            raise CliError(EXIT_INPUT, str(e)) from None
    return base


def _model_from_args(args) -> M.LamNet:
    if getattr(args, "checkpoint", None):
        return _load_model(args.checkpoint)
    cfg = _run_config(args)
    return M.build(cfg.model, args.seed)


def _predict(model: M.LamNet, lr: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(Tensor(lr[None].astype(model.config.np_dtype))).data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# train


def _dataset(cfg: RC.RunConfig):
    dc, tc, scale = cfg.data, cfg.train, cfg.model.scale
    if dc.hr_dir:
        if not os.path.isdir(dc.hr_dir):
            raise CliError(EXIT_INPUT, f"hr_dir not found: {dc.hr_dir}")
        names, pairs, unmatched = D.load_pairs(dc.hr_dir, dc.lr_dir, scale, synthesize=dc.lr_dir is None)
        for name in unmatched:
            log.warning("unmatched file skipped: %s", name)
        if not pairs:
            raise CliError(EXIT_INPUT, f"no usable image pairs under {dc.hr_dir}")
    else:
        pairs = D.synthetic_pairs(dc.synthetic_images, dc.synthetic_size, scale, tc.seed)
    dt = cfg.model.np_dtype
    patches = D.PatchDataset(pairs, scale, tc.patch, tc.batch_size, tc.seed, dc.augment, dt)
    if dc.fixed_batch:
        return D.FixedBatch(*patches.batch(0)), pairs
    return patches, pairs


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset, pairs = _dataset(cfg)
    except ValueError as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    if args.init_from:
        src = _load_model(args.init_from)
        if src.config.replace(scale=cfg.model.scale) != cfg.model:
            raise CliError(EXIT_STATE, "init checkpoint architecture differs from the configured model")
        model = M.build(cfg.model, cfg.train.seed)
        M.transfer_weights(src, model)
    else:
        model = M.build(cfg.model, cfg.train.seed)

    eval_fn = None
    if cfg.data.eval_every:
        held = dataset if isinstance(dataset, D.FixedBatch) else D.PatchDataset(
            pairs, cfg.model.scale, cfg.train.patch, 4, cfg.train.seed + 1, False, cfg.model.np_dtype)
        lr_eval, hr_eval = held.batch(0)

        def eval_fn(m):
            with no_grad():
                sr = m(Tensor(lr_eval)).data.astype(np.float64)
            return float(np.mean([D.evaluate_pair(s, h.astype(np.float64), cfg.model.scale)[0]
                                  for s, h in zip(sr, hr_eval)]))

    def echo(step, row, _model):
        if args.log_every and (step % args.log_every == 0 or step == cfg.train.total_steps - 1):
            extra = "" if row.psnr is None else f" psnr={row.psnr:.3f}"
            print(f"step {step} lr={row.lr:.3g} loss={row.loss:.6f}{extra}", file=sys.stderr)

    _write_text(out / "run.cfg", RC.emit(cfg))
    from .trainer import TrainingDiverged, train

    try:
        tlog = train(model, dataset, cfg.train, [echo], out / "model.lamnet", eval_fn, cfg.data.eval_every)
    except TrainingDiverged as e:
        raise CliError(EXIT_STATE, str(e)) from None
    tlog.header["scale"] = cfg.model.scale
    _write_text(out / "train_log.csv", tlog.to_csv())
    final = tlog.rows[-1].loss if tlog.rows else float("nan")
    print(f"steps={len(tlog.rows)} final_loss={final!r} checkpoint={out / 'model.lamnet'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    if not os.path.isfile(args.input):
        raise CliError(EXIT_INPUT, f"input image not found: {args.input}")
    model = _load_model(args.checkpoint)
    if args.scale is not None and args.scale != model.config.scale:
        raise CliError(EXIT_STATE, f"checkpoint is x{model.config.scale}, --scale asks for x{args.scale}")
    try:
        lr = D.load_png(args.input)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_INPUT, f"{args.input}: {e}") from None
    t0 = time.perf_counter()
    sr = _predict(model, lr)
    elapsed = time.perf_counter() - t0
    D.save_png(sr, args.output)
    print(f"input={lr.shape[1]}x{lr.shape[2]} output={sr.shape[1]}x{sr.shape[2]} "
          f"scale={model.config.scale} forward_s={elapsed:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    if not os.path.isdir(args.hr_dir):
        raise CliError(EXIT_INPUT, f"hr directory not found: {args.hr_dir}")
    model = _load_model(args.checkpoint) if args.checkpoint else None
    scale = model.config.scale if model else args.scale
    shave = scale if args.shave is None else args.shave
    have_lr = bool(args.lr_dir) or args.synthesize
    if args.lr_dir and not os.path.isdir(args.lr_dir):
        raise CliError(EXIT_INPUT, f"lr directory not found: {args.lr_dir}")
    if model is None and not args.pred_dir and not have_lr:
        raise CliError(EXIT_INPUT, "nothing to evaluate: pass --checkpoint, --pred-dir, --lr-dir or --synthesize")
    if model is not None and not have_lr:
        raise CliError(EXIT_INPUT, "--checkpoint needs --lr-dir or --synthesize")
    if not D.list_pngs(args.hr_dir):
        raise CliError(EXIT_INPUT, f"no PNG files in {args.hr_dir}")

    warnings_count = 0
    if have_lr:
        names, pairs, unmatched = D.load_pairs(args.hr_dir, args.lr_dir, scale, args.synthesize)
    else:
        names = [p.name for p in D.list_pngs(args.hr_dir)]
        pairs = [(None, D.load_png(Path(args.hr_dir) / n)) for n in names]
        unmatched = []
    for name in unmatched:
        print(f"warning: unmatched file skipped: {name}", file=sys.stderr)
        warnings_count += 1

    rows = []
    for name, (lr, hr) in zip(names, pairs):
        if lr is not None:
            h, w = lr.shape[1] * scale, lr.shape[2] * scale
            ref = hr[:, :h, :w]
            rows.append((name, "bicubic", *D.evaluate_pair(D.bicubic_resize(lr, h, w), ref, shave)))
            if model is not None:
                rows.append((name, "model", *D.evaluate_pair(_predict(model, lr), ref, shave)))
        if args.pred_dir:
            pred_path = Path(args.pred_dir) / name
            if not pred_path.is_file():
                print(f"warning: no prediction for {name}", file=sys.stderr)
                warnings_count += 1
                continue
            pred = D.load_png(pred_path)
            ref = hr[:, :pred.shape[1], :pred.shape[2]]
            if ref.shape != pred.shape:
                print(f"warning: {name}: prediction {pred.shape[1:]} larger than reference", file=sys.stderr)
                warnings_count += 1
                continue
            rows.append((name, "pred", *D.evaluate_pair(pred, ref, shave)))
    if not rows:
        raise CliError(EXIT_INPUT, "no image could be evaluated")

    methods = sorted({r[1] for r in rows})
    for m in methods:
        sel = [r for r in rows if r[1] == m]
        rows.append(("mean", m, float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel]))))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image", "method", "psnr", "ssim"])
    writer.writerows([r[0], r[1], repr(r[2]), repr(r[3])] for r in rows)
    width = max(len(r[0]) for r in rows)
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<8} {r[2]:>9.4f} dB  {r[3]:.6f}")
    if args.csv:
        _write_text(args.csv, buf.getvalue())
    else:
        print()
        print(buf.getvalue(), end="")
    print(f"warnings={warnings_count}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _formula_rows(model: M.LamNet, h: int, w: int):
    cfg = model.config
    report = A.count_model(model, h, w, A.FORMULA_POLICY)
    prefix = "blocks.0.pairs.0."
    out = []
    for part, tag in (("mixer", ".ulm."), ("ffn", ".dgfn.")):
        sel = [r for r in report.rows if r.name.startswith(prefix) and tag in r.name and r.counted]
        got = (sum(r.params for r in sel), sum(r.flops for r in sel))
        want = A.closed_form("lamnet", part, cfg.channels, cfg.kernel_len, cfg.groups, h, w)
        verdict = "EQUAL" if got == tuple(want) else "DIFF"
        out.append({"part": part, "counted_params": got[0], "formula_params": want[0],
                    "counted_flops": got[1], "formula_flops": want[1], "verdict": verdict})
    return out


def cmd_analyze(args) -> int:
    if args.k_sweep is not None:
        specs = [FocalSpec.parse(s) for s in (args.k_sweep or ["1/1", "1,2/2,1", "1,2,4/3,2,1"])]
        print(A.rows_to_csv(A.k_sweep(specs, args.c, args.g, args.h, args.w)), end="")
        return EXIT_OK
    if args.arch:
        rows = []
        for part in ("mixer", "ffn", "total"):
            p, f = A.closed_form(args.arch, part, args.c, args.k, args.g, args.h, args.w)
            rows.append({"arch": args.arch, "part": part, "params": p, "flops": f})
        print(A.rows_to_csv(rows), end="")
        return EXIT_OK
    model = _model_from_args(args)
    policy = A.CountPolicy(not args.exclude_bias, not args.exclude_norm, args.flops_per_mac)
    report = A.count_model(model, args.h, args.w, policy)
    text = report.to_csv()
    if args.csv:
        _write_text(args.csv, text)
    else:
        print(text, end="")
    if args.formula:
        if not model.params.blocks or not model.params.blocks[0].pairs:
            print("formula: model has no (ULM, DGFN) pair", file=sys.stderr)
            return EXIT_OK
        print()
        print(A.rows_to_csv(_formula_rows(model, args.h, args.w)), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    try:
        results = run_suite(args.module, args.seed, args.tol)
    except ValueError as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    print("target,max_rel_error,status")
    for r in results:
        print(f"{r.name},{r.error:.6e},{'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    for r in failed:
        arg, idx = r.where if r.where else (None, ())
        idx = tuple(int(i) for i in idx)
        print(f"FAIL {r.name}: error {r.error:.3e} >= tol {r.tol:g} at input {arg} index {idx}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    models = []
    if args.checkpoint:
        for path in args.checkpoint:
            models.append((path, _load_model(path)))
    else:
        models.append(("config", _model_from_args(args)))
    if args.repeats < 1:
        raise CliError(EXIT_INPUT, "--repeats must be at least 1")
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0, 1, size=(1, 3, args.h, args.w))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "K", "R", "flops", "counted_flops", "repeats", "median_s", "min_s", "timings_s"])
    for label, model in models:
        cfg = model.config
        flops = A.count_model(model, args.h, args.w).total_flops
        counted = sum(r.flops for r in A.count_model(model, args.h, args.w, A.FORMULA_POLICY).rows if r.counted)
        xin = Tensor(x.astype(cfg.np_dtype))
        times = []
        with no_grad():
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                model(xin)
                times.append(time.perf_counter() - t0)
        writer.writerow([label, kernel_len(cfg.focal), receptive_field(cfg.focal), flops, counted, args.repeats,
                         f"{statistics.median(times):.6f}", f"{min(times):.6f}",
                         ";".join(f"{t:.6f}" for t in times)])
    if args.csv:
        _write_text(args.csv, buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gates


def cmd_gates(args) -> int:
    model = _model_from_args(args)
    if not model.params.blocks or not model.params.blocks[0].pairs:
        raise CliError(EXIT_INPUT, "model has no DGFN to inspect")
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.uniform(0, 1, size=(1, 3, args.h, args.w)).astype(model.config.np_dtype))
    pair = model.params.blocks[0].pairs[0]
    with no_grad():
        feats = model.shallow(x)
        from .ulm import ulm_forward

        feats = feats + ulm_forward(layer_norm(feats, pair.norm1), pair.ulm, model.config.use_iem)
        self_gate, cross_gate = gate_stats(layer_norm(feats, pair.norm2), pair.dgfn)
    out = Path(args.out_dir)
    _write_text(out / "self_gate_hist.csv", histogram_csv(self_gate.data, args.bins))
    _write_text(out / "cross_gate_hist.csv", histogram_csv(cross_gate.data, args.bins))
    print(f"self_gate min={self_gate.data.min():.6g} max={self_gate.data.max():.6g}; "
          f"cross_gate min={cross_gate.data.min():.6g} max={cross_gate.data.max():.6g}; written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_model_source(p, checkpoint_nargs=None):
    p.add_argument("--checkpoint", nargs=checkpoint_nargs, help="model checkpoint (overrides --config)")
    p.add_argument("--config", help="run file with key = value lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lamnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run file")
    p.add_argument("--config", help="run file with key = value lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out-dir", required=True, help="receives model.lamnet, train_log.csv, run.cfg")
    p.add_argument("--init-from", help="x2 checkpoint whose weights seed a x3/x4 run")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="upscale one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, help="refuse to run unless the checkpoint has this scale")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM against HR references")
    p.add_argument("--hr-dir", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--lr-dir")
    src.add_argument("--synthesize", action="store_true", help="bicubic-downscale HR to get LR inputs")
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="precomputed SR images named like the HR files")
    p.add_argument("--scale", type=int, default=2, help="used when no checkpoint is given")
    p.add_argument("--shave", type=int, help="border pixels excluded (default: scale)")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="parameter and FLOP accounting")
    _add_model_source(p)
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--formula", action="store_true", help="compare one pair against the closed forms")
    p.add_argument("--arch", choices=["swinir", "dlgsanet", "lamnet"], help="closed-form table only")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--k", type=int, default=13)
    p.add_argument("--g", type=int, default=4)
    p.add_argument("--k-sweep", nargs="*", metavar="STRIDES/STEPS",
                   help="FSA cost per focal spec, e.g. 1/1 1,2/2,1 1,2,4/3,2,1")
    p.add_argument("--flops-per-mac", type=int, choices=[1, 2], default=1)
    p.add_argument("--exclude-bias", action="store_true")
    p.add_argument("--exclude-norm", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient suites")
    p.add_argument("--module", default="all", choices=["all", "tensor", "nn", "fsa", "ulm", "dgfn", "model"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward wall-clock timing with analytic FLOPs")
    _add_model_source(p, checkpoint_nargs="+")
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gates", help="histograms of the first FFN's two gates")
    _add_model_source(p)
    p.add_argument("--h", type=int, default=48)
    p.add_argument("--w", type=int, default=48)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gates)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        _err(str(e))
        return e.code
    except (RC.ConfigError, ValueError) as e:
        _err(str(e))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
