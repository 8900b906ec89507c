"""Command-line interface: gen-data, train, eval, trimap, compare, params,
gradcheck, gamma-demo.

Global flags (--seed, --precision, --threads) come before the subcommand.
--threads must take effect before numpy loads, so all heavy imports happen
inside the handlers. Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _build_parser():
    p = argparse.ArgumentParser(
        prog="frrn",
        description="Two-stream segmentation networks: data generation, "
                    "training, evaluation and diagnostics.")
    p.add_argument("--seed", type=int, default=None,
                   help="global RNG seed (overrides config files)")
    p.add_argument("--precision", choices=["f32", "f64"], default=None,
                   help="arithmetic mode (overrides config files)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread count")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=40)
    g.add_argument("--size", default="64x128", help="HxW, e.g. 64x128")
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.03)
    g.add_argument("--shapes", default="3-6", help="shapes per image, lo-hi")

    t = sub.add_parser("train", help="train a network from a JSON config")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--dump-dir", default=None,
                   help="write predicted label maps here")
    e.add_argument("--out", default=None, help="per-class CSV path")

    tr = sub.add_parser("trimap", help="boundary-band IoU over label dirs")
    tr.add_argument("--gt", required=True)
    tr.add_argument("--pred", required=True)
    tr.add_argument("--radii", default="1,2,4,8,16,32,64,80")
    tr.add_argument("--classes", type=int, required=True)
    tr.add_argument("--categories", default=None,
                    help="JSON class->category mapping file")
    tr.add_argument("--out", default=None, help="CSV path (default stdout)")

    c = sub.add_parser("compare", help="train two architectures on equal "
                                       "budget and report IoU")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir", default=None)

    pa = sub.add_parser("params", help="per-stage parameter table")
    pa.add_argument("--arch", required=True)
    pa.add_argument("--classes", type=int, required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of ops")
    gc.add_argument("--ops", default="all", help="'all' or comma list")
    gc.add_argument("--trials", type=int, default=8)

    gd = sub.add_parser("gamma-demo", help="bias comparison of gamma samplers")
    gd.add_argument("--a", type=float, default=0.35)
    gd.add_argument("--samples", type=int, default=100000)
    gd.add_argument("--naive-lo", type=float, default=0.25)
    gd.add_argument("--naive-hi", type=float, default=1.75)
    gd.add_argument("--out", default=None, help="per-sample CSV path")
    return p


def _cmd_gen_data(args, seed):
    from . import data
    h, w = (int(v) for v in args.size.lower().split("x"))
    lo, hi = (int(v) for v in args.shapes.split("-"))
    cfg = data.SyntheticSceneConfig(width=w, height=h,
                                    num_classes=args.classes,
                                    shapes_min=lo, shapes_max=hi,
                                    noise=args.noise, seed=seed)
    manifest = data.generate_dataset(cfg, args.train, args.val, args.out)
    print(f"wrote {len(manifest['train'])} train / {len(manifest['val'])} "
          f"val pairs to {args.out}")
    return 0


def _load_train_config(args):
    from .trainer import TrainConfig
    with open(args.config) as f:
        raw = json.load(f)
    data_path = raw.get("data")
    if not data_path:
        raise ValueError("config must contain a 'data' path")
    seeds = raw.get("seeds", (1, 2, 3))
    cfg = TrainConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    return cfg, data_path, seeds


def _cmd_train(args, seed):
    from . import trainer
    cfg, data_path, _ = _load_train_config(args)
    result = trainer.train(cfg, data_path)
    print(f"final loss {result.log_rows[-1][2]:.4f}  "
          f"best val mean IoU {result.best_iou:.4f} "
          f"at iteration {result.best_iteration}")
    if not cfg.out_dir:
        print("note: config had no out_dir; checkpoint not saved")
    return 0


def _cmd_eval(args, seed):
    from . import trainer
    per_class, miou, meta = trainer.evaluate_checkpoint(
        args.ckpt, args.data, args.split, args.dump_dir)
    lines = ["class,iou"]
    lines += [f"{i},{v:.6f}" for i, v in enumerate(per_class)]
    lines.append(f"mean,{miou:.6f}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(f"mean IoU {miou:.4f} ({meta['arch']}, split {args.split})",
          file=sys.stderr)
    return 0


def _cmd_trimap(args, seed):
    import numpy as np

    from . import data, evaluation
    radii = [int(r) for r in args.radii.split(",")]
    gt_files = sorted(Path(args.gt).glob("*.pgm")) + sorted(Path(args.gt).glob("*.png"))
    pred_files = sorted(Path(args.pred).glob("*.pgm")) + sorted(Path(args.pred).glob("*.png"))
    if len(gt_files) != len(pred_files) or not gt_files:
        raise ValueError(
            f"label dirs differ or are empty: {len(gt_files)} gt vs "
            f"{len(pred_files)} pred")
    gts = [data.read_label_map(f) for f in gt_files]
    preds = [data.read_label_map(f) for f in pred_files]
    classes = args.classes
    if args.categories:
        with open(args.categories) as f:
            mapping = {int(k): int(v) for k, v in json.load(f).items()}
        gts = [evaluation.remap_labels(g, mapping) for g in gts]
        preds = [evaluation.remap_labels(p, mapping) for p in preds]
        classes = max(mapping.values()) + 1
    curve = evaluation.trimap_curve(gts, preds, radii, classes)
    lines = ["radius,mean_iou"] + [f"{r},{m:.6f}" for r, m in curve]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_compare(args, seed):
    from . import trainer
    cfg, data_path, seeds = _load_train_config(args)
    report = trainer.compare_architectures(cfg, data_path, seeds=seeds)
    out_dir = Path(args.out_dir) if args.out_dir else None
    summary = {
        "params": {report.arch_a: report.params_a,
                   report.arch_b: report.params_b},
        "per_seed": {a: dict(v) for a, v in report.per_seed.items()},
        "mean_iou": {report.arch_a: report.mean_iou(report.arch_a),
                     report.arch_b: report.mean_iou(report.arch_b)},
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "curves.csv").write_text(report.curves_csv)
        (out_dir / "report.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _cmd_params(args, seed):
    from . import network
    if args.arch not in network.ARCHS:
        raise ValueError(f"unknown arch '{args.arch}'; "
                         f"choose from {sorted(network.ARCHS)}")
    spec = network.ARCHS[args.arch](args.classes)
    total = 0
    print(f"{'stage':<12}{'params':>12}")
    for stage, count in network.param_table(spec):
        print(f"{stage:<12}{count:>12}")
        total += count
    print(f"{'total':<12}{total:>12}")
    print(f"total = {total / 1e6:.2f}M")
    return 0


def _cmd_gradcheck(args, seed):
    from . import gradcheck
    ops = None if args.ops == "all" else args.ops.split(",")
    if ops:
        for op in ops:
            if op not in gradcheck.CASES:
                raise ValueError(f"unknown op '{op}'; "
                                 f"choose from {sorted(gradcheck.CASES)}")
    results = gradcheck.check_all(trials=args.trials, seed=seed, ops=ops)
    failed = False
    print(f"{'op':<20}{'max_rel_err':>14}  status")
    for op, err in results.items():
        ok = err <= gradcheck.TOLERANCE
        failed |= not ok
        print(f"{op:<20}{err:>14.3e}  {'pass' if ok else 'FAIL'}")
    return 1 if failed else 0


def _cmd_gamma_demo(args, seed):
    import numpy as np

    from . import augmentation
    rng = np.random.default_rng((seed, 5))
    z = rng.uniform(-args.a, args.a, args.samples)
    gamma_c = augmentation.gamma_for_z(z)
    u_c = augmentation.fixed_point_u(gamma_c)
    gamma_n = rng.uniform(args.naive_lo, args.naive_hi, args.samples)
    u_n = augmentation.fixed_point_u(gamma_n)
    print("scheme,samples,mean_u,abs_bias")
    print(f"corrected,{args.samples},{u_c.mean():.6f},{abs(u_c.mean() - 0.5):.6f}")
    print(f"naive,{args.samples},{u_n.mean():.6f},{abs(u_n.mean() - 0.5):.6f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("scheme,z,gamma,u\n")
            for zi, gi, ui in zip(z, gamma_c, u_c):
                f.write(f"corrected,{zi:.8f},{gi:.8f},{ui:.8f}\n")
            for gi, ui in zip(gamma_n, u_n):
                f.write(f"naive,,{gi:.8f},{ui:.8f}\n")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "trimap": _cmd_trimap,
    "compare": _cmd_compare,
    "params": _cmd_params,
    "gradcheck": _cmd_gradcheck,
    "gamma-demo": _cmd_gamma_demo,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    seed = args.seed if args.seed is not None else 0
    print(f"config: command={args.command} seed={seed} "
          f"precision={args.precision or 'f32'} "
          f"threads={args.threads or 'default'}", file=sys.stderr)
    try:
        return _HANDLERS[args.command](args, seed)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
