"""Command-line surface: demos, dumps, data generation, training, ablations.

Every subcommand prints its resolved configuration to stderr, exits 0 on
success and nonzero on any error, and keeps stdout for data only when asked
to write to `-`.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import data as dsync
from .ptfem import init_ptfem_params, ptfem_forward
from .qco import (cooccurrence_encode, count_1d, count_2d, quantization_levels,
                  quantize_encode, similarity_map)
from .stlnet import (Flags, TrainConfig, evaluate_miou, load_checkpoint,
                     stlnet_forward, train)
from .tem import init_tem_params, reference_hist_equalize, tem_forward
from .tensor import Tensor, global_avg_pool, load_tsr, save_tsr
from .verify import THRESHOLDS, run_gradient_suite


def _print_config(args):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(resolved, default=str, sort_keys=True), file=sys.stderr)


def _load_feature_map(path) -> Tensor:
    if path.endswith(".tsr"):
        return load_tsr(path)
    return Tensor(dsync.load_png(path))


def _to_gray_levels(image, n_levels):
    """Quantize a [3,H,W] float image to integer levels in [0, n_levels)."""
    gray = image.mean(axis=0)
    return np.minimum((gray * n_levels).astype(np.int64), n_levels - 1)


# ---- subcommands ----------------------------------------------------------------------


def cmd_demo_equalize(args):
    image = dsync.load_png(args.input)
    n = args.levels
    q = _to_gray_levels(image, n)
    counts = np.bincount(q.reshape(-1), minlength=n).astype(np.float64)
    remap = reference_hist_equalize(counts, n)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "original_hist.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "count"])
        for i, c in enumerate(counts):
            w.writerow([i, int(c)])
    with open(os.path.join(args.out, "equalized_hist.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(remap[i])), int(c)])
    mapped = remap[q] / (n - 1)
    dsync.save_png(np.repeat(mapped[None], 3, axis=0), os.path.join(args.out, "equalized.png"))
    print("wrote %s" % args.out, file=sys.stderr)


def cmd_qco_dump(args):
    a = _load_feature_map(args.input)
    g = global_avg_pool(a)
    s = similarity_map(a, g)
    levels = quantization_levels(s, args.levels)
    encoding = quantize_encode(s, levels)
    os.makedirs(args.out, exist_ok=True)
    save_tsr(levels, os.path.join(args.out, "levels.tsr"))
    lv = levels.data
    if args.mode == "1d":
        counting = count_1d(encoding, levels)
        save_tsr(encoding, os.path.join(args.out, "encoding.tsr"))
        save_tsr(counting, os.path.join(args.out, "counting.tsr"))
        rows = [(repr(float(lv[i])), repr(float(counting.data[i, 1])))
                for i in range(lv.size)]
        header = ["level", "normalized_count"]
    else:
        _, h, w = a.shape
        cooc = cooccurrence_encode(encoding.reshape(args.levels, h, w))
        counting = count_2d(cooc, levels)
        save_tsr(cooc, os.path.join(args.out, "encoding.tsr"))
        save_tsr(counting, os.path.join(args.out, "counting.tsr"))
        rows = [(repr(float(lv[m])), repr(float(lv[n])), repr(float(counting.data[m, n, 2])))
                for m in range(lv.size) for n in range(lv.size)]
        header = ["level", "level2", "normalized_count"]
    target = sys.stdout if args.csv == "-" else open(
        args.csv or os.path.join(args.out, "counting.csv"), "w", newline="")
    try:
        w = csv.writer(target)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if target is not sys.stdout:
            target.close()
    print("wrote %s" % args.out, file=sys.stderr)


def _render_side_by_side(image, enhanced, path):
    def norm(ch):
        lo, hi = ch.min(), ch.max()
        return (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)

    left = norm(image.mean(axis=0))
    right = norm(enhanced.mean(axis=0))
    if right.shape != left.shape:
        ry = (np.arange(left.shape[0]) * right.shape[0]) // left.shape[0]
        rx = (np.arange(left.shape[1]) * right.shape[1]) // left.shape[1]
        right = right[ry[:, None], rx[None, :]]
    panel = np.concatenate([left, np.ones((left.shape[0], 2)), right], axis=1)
    dsync.save_png(np.repeat(panel[None], 3, axis=0), path)


def cmd_tem_demo(args):
    image = dsync.load_png(args.input)
    rng = np.random.default_rng(args.seed)
    params = init_tem_params(rng, 3)
    out_map = tem_forward(Tensor(image), args.levels, params)
    save_tsr(out_map, args.out)
    stem = args.out[:-4] if args.out.endswith(".tsr") else args.out
    save_tsr(image, stem + "_input.tsr")
    _render_side_by_side(image, out_map.data, stem + ".png")
    print("wrote %s" % args.out, file=sys.stderr)


def cmd_ptfem_dump(args):
    a = _load_feature_map(args.input)
    scales = tuple(int(s) for s in args.scales.split(","))
    rng = np.random.default_rng(args.seed)
    params = init_ptfem_params(rng, a.shape[0], scales=scales)
    feat = ptfem_forward(a, params, args.levels)
    save_tsr(feat, args.out)
    stem = args.out[:-4] if args.out.endswith(".tsr") else args.out
    with open(stem + "_branches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "scale", "channel", "mean", "std"])
        per_branch = feat.shape[0] // len(scales)
        for b, scale in enumerate(scales):
            block = feat.data[b * per_branch:(b + 1) * per_branch]
            for c in range(per_branch):
                w.writerow([b, scale, c, repr(float(block[c].mean())),
                            repr(float(block[c].std()))])
    print("wrote %s" % args.out, file=sys.stderr)


def cmd_gen_data(args):
    samples = dsync.generate_dataset(args.n, args.size, args.classes, args.seed)
    meta = dsync.save_dataset(samples, args.out, args.seed)
    print("wrote %d samples to %s (train %d / val %d)"
          % (args.n, args.out, len(meta["split"]["train"]), len(meta["split"]["val"])),
          file=sys.stderr)


def _build_config(args) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    cfg = TrainConfig.from_dict(base)
    for name in ("seed", "lr", "lr_power", "iters", "batch", "n_levels_1d",
                 "n_levels_2d", "alpha", "ohem_theta", "ohem_min_keep",
                 "momentum", "weight_decay"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "scales", None):
        cfg.scales = tuple(int(s) for s in args.scales.split(","))
    for flag in ("use_slf", "use_tem", "use_ptfem", "use_graph"):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.flags, flag, v)
    cfg.__post_init__()
    return cfg


def cmd_train(args):
    cfg = _build_config(args)
    print("resolved train config: " + json.dumps(cfg.to_dict(), sort_keys=True),
          file=sys.stderr)
    train_set, val_set, meta = dsync.load_dataset(args.data)
    params, rows = train(train_set, cfg, meta["num_classes"], val_set=val_set,
                         out_dir=args.out,
                         log=lambda r: print(r, file=sys.stderr) if args.verbose else None)
    _, miou = evaluate_miou(params, val_set, cfg.flags)
    print("final val mIoU: %r" % miou, file=sys.stderr)


def cmd_eval(args):
    params, cfg = load_checkpoint(args.checkpoint)
    train_set, val_set, _ = dsync.load_dataset(args.data)
    dataset = val_set if args.split == "val" else train_set
    iou, miou = evaluate_miou(params, dataset, cfg.flags)
    out = sys.stdout if args.out == "-" else open(args.out, "w") if args.out else sys.stderr
    try:
        for c, v in enumerate(iou):
            print("iou,%d,%r" % (c, float(v)), file=out)
        print("miou,,%r" % miou, file=out)
    finally:
        if args.out and args.out != "-":
            out.close()


_COMPONENT_GRID = [
    ("baseline", Flags(False, False, False, True)),
    ("slf", Flags(True, False, False, True)),
    ("slf+tem", Flags(True, True, False, True)),
    ("slf+ptfem", Flags(True, False, True, True)),
    ("slf+tem+ptfem", Flags(True, True, True, True)),
]


def _ablate_rows(cfg, train_set, val_set, num_classes, grid, levels, scale_sets):
    if grid == "components":
        points = [(name, flags, cfg.n_levels_1d, cfg.scales)
                  for name, flags in _COMPONENT_GRID]
    elif grid == "levels":
        points = [("slf+tem+ptfem", Flags(True, True, True, True), n, cfg.scales)
                  for n in levels]
    elif grid == "scales":
        points = [("slf+tem+ptfem", Flags(True, True, True, True), cfg.n_levels_1d,
                   tuple(ss)) for ss in scale_sets]
    elif grid == "graph":
        points = [("graph-off", Flags(True, True, True, False), cfg.n_levels_1d, cfg.scales),
                  ("graph-on", Flags(True, True, True, True), cfg.n_levels_1d, cfg.scales)]
    else:
        raise ValueError("unknown grid %r" % grid)
    rows = []
    for name, flags, n1d, scales in points:
        run_cfg = TrainConfig.from_dict(cfg.to_dict())
        run_cfg.flags = flags
        run_cfg.n_levels_1d = n1d
        run_cfg.scales = scales
        run_cfg.__post_init__()
        scale_str = ";".join(str(s) for s in scales)
        try:
            params, _ = train(train_set, run_cfg, num_classes)
            _, miou = evaluate_miou(params, val_set, flags)
            rows.append([name, n1d, scale_str, run_cfg.seed, repr(miou), ""])
        except Exception as exc:  # record per-row failure, keep sweeping
            rows.append([name, n1d, scale_str, run_cfg.seed, "", str(exc)])
    return rows


def cmd_ablate(args):
    cfg = _build_config(args)
    print("resolved ablate config: " + json.dumps(cfg.to_dict(), sort_keys=True),
          file=sys.stderr)
    train_set, val_set, meta = dsync.load_dataset(args.data)
    levels = [int(x) for x in args.levels.split(",")] if args.levels else [4, 8, 16, 32]
    scale_sets = [[int(x) for x in part.split(",")]
                  for part in args.scale_sets.split(";")] if args.scale_sets else [[1], [2], [1, 2, 4]]
    rows = _ablate_rows(cfg, train_set, val_set, meta["num_classes"],
                        args.grid, levels, scale_sets)
    target = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        w = csv.writer(target)
        w.writerow(["flags", "n_levels", "scales", "seed", "miou", "error"])
        w.writerows(rows)
    finally:
        if target is not sys.stdout:
            target.close()
    failures = [r for r in rows if r[5]]
    print("ablation finished: %d rows, %d failed" % (len(rows), len(failures)),
          file=sys.stderr)


def cmd_grad_check(args):
    report = run_gradient_suite(points=args.points, seed=args.seed)
    bad = []
    for name, err in report.items():
        limit = THRESHOLDS[name]
        status = "ok" if err < limit else "FAIL"
        print("%-14s max_rel_err=%.3e  limit=%.0e  %s" % (name, err, limit, status))
        if err >= limit:
            bad.append(name)
    if bad:
        raise SystemExit("gradient check failed: %s" % ", ".join(bad))


# ---- parser ---------------------------------------------------------------------------


def _add_train_config_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-power", dest="lr_power", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-levels-1d", dest="n_levels_1d", type=int)
    p.add_argument("--n-levels-2d", dest="n_levels_2d", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--ohem-theta", dest="ohem_theta", type=float)
    p.add_argument("--ohem-min-keep", dest="ohem_min_keep", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--scales", help="comma-separated pyramid scales")
    for flag in ("use_slf", "use_tem", "use_ptfem", "use_graph"):
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None,
                       action=argparse.BooleanOptionalAction)


def build_parser():
    parser = argparse.ArgumentParser(prog="texturestat")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-equalize", help="histogram equalization demo on a PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo_equalize)

    p = sub.add_parser("qco-dump", help="dump levels/encoding/counting for one map")
    p.add_argument("--input", required=True, help=".tsr feature map or .png image")
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--mode", choices=["1d", "2d"], default="1d")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--csv", help="counting CSV path, or - for stdout")
    p.set_defaults(func=cmd_qco_dump)

    p = sub.add_parser("tem-demo", aliases=["tem"],
                       help="run a seeded untrained enhancement pass on a PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=128)
    p.add_argument("--out", required=True, help="output .tsr path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tem_demo)

    p = sub.add_parser("ptfem-dump", aliases=["ptfem"],
                       help="pyramid texture features for a feature map")
    p.add_argument("--input", required=True)
    p.add_argument("--scales", default="1,2,4,8")
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--out", required=True, help="output .tsr path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ptfem_dump)

    p = sub.add_parser("gen-data", help="generate the synthetic texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory for metrics.csv and checkpoint")
    p.add_argument("--verbose", action="store_true")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out", help="CSV path, or - for stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/eval sweeps over flags, levels or scales")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=["components", "levels", "scales", "graph"],
                   default="components")
    p.add_argument("--levels", help="comma-separated level counts for --grid levels")
    p.add_argument("--scale-sets", dest="scale_sets",
                   help="semicolon-separated scale subsets, e.g. 1;1,2;1,2,4")
    p.add_argument("--out", required=True, help="CSV path, or - for stdout")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the composites")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args)
    try:
        args.func(args)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print("error: %s" % exc, file=sys.stderr)
            return 1
        return 0
    except Exception as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
