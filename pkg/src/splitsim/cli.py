"""Command-line interface.

Subcommands:
  run             execute a single-cell config (one protocol/alpha/seed)
  sweep           execute a full plan (cross product of protocols/alphas/seeds)
  cost            print the closed-form communication table per split point
  gradcheck       run the finite-difference oracle over every layer kind
  partition-stats print per-device label histograms for a Dirichlet split

Exit codes: 0 ok, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import nn
from .comm import CostModel, closed_form_comm, fl_crossover_epochs
from .data import dirichlet_partition, label_histogram, make_synthetic, partition_tv
from .errors import ConfigError, SplitSimError, UsageError
from .harness import load_config, run_plan
from .models import MODEL_PRESETS

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitsim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "execute a single-cell config"),
                            ("sweep", "execute a full sweep plan")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a plan config file")
        p.add_argument("--out-dir", default=None, help="override the plan output directory")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--no-label-bytes", action="store_true",
                       help="do not count label bytes in activation transfers")
        p.add_argument("--concurrent-phase3", action="store_true",
                       help="overlap the one-shot activation stream with server training")

    p = sub.add_parser("cost", help="closed-form communication volumes per split point")
    p.add_argument("--model", choices=sorted(MODEL_PRESETS), default="toy-cnn")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--split", type=int, default=None,
                   help="single split point; default sweeps every valid one")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--aux-ratio", type=float, default=0.5)
    p.add_argument("--no-label-bytes", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference oracle over all layer kinds")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("partition-stats", help="per-device label histograms")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--devices", type=int, default=8)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args, single_cell: bool) -> int:
    plan = load_config(args.config)
    if args.seed is not None and plan.runs:
        first_seed = plan.runs[0].seed
        plan.runs = [replace(rs, seed=args.seed, cfg=replace(rs.cfg, seed=args.seed))
                     for rs in plan.runs
                     if rs.seed == first_seed]
    if args.no_label_bytes or args.concurrent_phase3:
        plan.runs = [
            replace(rs, cfg=replace(
                rs.cfg,
                include_label_bytes=rs.cfg.include_label_bytes and not args.no_label_bytes,
                concurrent_transfer=rs.cfg.concurrent_transfer or args.concurrent_phase3,
            ))
            for rs in plan.runs
        ]
    if single_cell and len(plan.runs) != 1:
        raise ConfigError(
            f"'run' needs a single-cell config, this one expands to {len(plan.runs)} runs;"
            " use 'sweep' instead"
        )
    summary, failures = run_plan(plan, out_dir=args.out_dir)
    for cell in summary["cells"]:
        print(f"{cell['cell']}: acc {cell['acc_mean']:.4f} +/- {cell['acc_std']:.4f}, "
              f"{cell['bytes_total']:.0f} B over {cell['rounds_total']:.0f} rounds")
    for failure in summary["failures"]:
        print(f"FAILED {failure['run']}: {failure['error']}", file=sys.stderr)
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def _cmd_cost(args) -> int:
    spec = MODEL_PRESETS[args.model](classes=args.classes)
    cm = CostModel.from_model(spec, args.samples,
                              include_labels=not args.no_label_bytes,
                              aux_ratio=args.aux_ratio)
    points = [args.split] if args.split is not None else list(range(1, spec.depth))
    print(f"# {spec.name}: {args.samples} samples, {args.epochs} epochs, "
          f"{args.devices} device(s) per epoch")
    print(f"{'p':>3} {'device_B':>10} {'aux_B':>10} {'act_B':>12} "
          f"{'uit_B':>14} {'sfl_B':>14} {'fl_B':>14} {'fl_crossover':>12}")
    for p in points:
        if not 1 <= p < spec.depth:
            raise ConfigError(f"split must satisfy 1 <= p < {spec.depth}, got {p}")
        sfl = closed_form_comm(cm, "sfl", p, args.epochs, args.devices)
        fl = closed_form_comm(cm, "fl", p, args.epochs, args.devices)
        if cm.aux_defined(p):
            uit = closed_form_comm(cm, "uit", p, args.epochs, args.devices)
            crossover = fl_crossover_epochs(cm, p, args.devices)
            aux_s, uit_s = str(cm.aux_bytes(p)), str(uit)
            cross_s = str(crossover) if crossover is not None else "never"
        else:
            aux_s, uit_s, cross_s = "-", "-", "-"
        print(f"{p:>3} {cm.device_bytes(p):>10} {aux_s:>10} "
              f"{cm.activation_stream_bytes(p):>12} {uit_s:>14} {sfl:>14} {fl:>14} "
              f"{cross_s:>12}")
    return EXIT_OK


_GRADCHECK_CASES = (
    ("dense", nn.dense(7, 5), (7,)),
    ("conv2d s1", nn.conv2d(2, 3, 3, stride=1, pad=1), (2, 6, 6)),
    ("conv2d s2", nn.conv2d(3, 4, 2, stride=2, pad=0), (3, 6, 6)),
    ("relu", nn.relu(), (11,)),
    ("flatten", nn.flatten(), (2, 3, 4)),
)


def _cmd_gradcheck(args) -> int:
    ok = True
    for name, layer, shape in _GRADCHECK_CASES:
        worst = max(
            nn.finite_difference_check(layer, shape, seed=args.seed + i)
            for i in range(args.cases)
        )
        passed = worst < args.tolerance
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<12} max rel err {worst:.3e} "
              f"over {args.cases} cases")
    worst = max(nn.finite_difference_check_loss(4, seed=args.seed + i)
                for i in range(args.cases))
    passed = worst < args.tolerance
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} {'softmax-xent':<12} max rel err {worst:.3e} "
          f"over {args.cases} cases")
    return EXIT_OK if ok else EXIT_RUN_FAILURE


def _cmd_partition_stats(args) -> int:
    ds = make_synthetic(args.n, args.classes, "gaussian-blobs", (4,), seed=args.seed)
    part = dirichlet_partition(ds, args.devices, args.alpha, seed=args.seed)
    tvs = partition_tv(part)
    print(f"# alpha={args.alpha:g}, {args.devices} devices, {args.n} samples, "
          f"{args.classes} classes")
    global_hist = label_histogram(ds.y, ds.classes)
    print("global  " + " ".join(f"{v:6.3f}" for v in global_hist))
    for k in range(part.devices):
        hist = label_histogram(ds.y[part.device_indices(k)], ds.classes)
        print(f"dev {k:3d} " + " ".join(f"{v:6.3f}" for v in hist)
              + f"  n={part.counts[k]:<6d} tv={tvs[k]:.4f}")
    print(f"mean tv {tvs.mean():.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args, single_cell=True)
        if args.command == "sweep":
            return _cmd_run(args, single_cell=False)
        if args.command == "cost":
            return _cmd_cost(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "partition-stats":
            return _cmd_partition_stats(args)
        raise UsageError(f"unhandled command {args.command!r}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplitSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
