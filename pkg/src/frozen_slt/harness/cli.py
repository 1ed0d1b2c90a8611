"""Command-line entry point: ``frozen-slt <command>``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .. import compression, nn_core
from ..ssa_lab import default_z_grid, estimate_success, tail_fit
from ..ticket_search import evaluate
from .config import ConfigError, load_config
from .datasets import load_dataset
from .runner import (SWEEP_AXES, compare_modes, get_dataset, metrics_to_csv, plan_for, rows_to_csv, run_comparison,
                     run_config, run_once, sweep_configs)

log = logging.getLogger("frozen_slt")


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _config(args):
    return load_config(args.config, args.set or ())


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_train(args):
    cfg = _config(args)
    row = run_config(cfg)
    _write(rows_to_csv([row]), args.out)
    return 0 if row.ok else 1


def cmd_compare(args):
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    rows = compare_modes(cfg, modes)
    _write(rows_to_csv(rows), args.out)
    return 0 if all(r.ok for r in rows) else 1


def cmd_sweep(args):
    cfg = _config(args)
    configs = sweep_configs(args.axis, _floats(args.values), cfg)
    rows = run_comparison(configs)
    _write(rows_to_csv(rows), args.out)
    return 0 if all(r.ok for r in rows) else 1


def cmd_pack(args):
    if args.out in (None, "-"):
        raise ConfigError("pack needs --out PATH")
    cfg = _config(args).replace(repetitions=1)
    if cfg.mode == "weight_training":
        raise ConfigError("weight_training runs have no ticket to pack")
    data = get_dataset(cfg)
    out = run_once(cfg, cfg.seed, data)
    compression.save(out.model, args.out)
    if args.metrics:
        Path(args.metrics).write_text(metrics_to_csv(out.metrics))
    size = compression.account_size(out.model)
    print(f"wrote {args.out}: test_acc={out.test_acc:.4f} supermask_bits={size.supermask_bits} "
          f"bn_param_bits={size.bn_param_bits} size_mb={size.megabytes:.6f}")
    return 0


def cmd_unpack(args):
    model = compression.load(args.ticket)
    size = compression.account_size(model)
    print(f"arch={model.arch.name} params={model.num_params} seed={model.seed} init={model.init.kind.value} "
          f"sparsity={model.sparsity:g} pruned={model.plan.pruned} locked={model.plan.locked} "
          f"free={model.plan.free} size_mb={size.megabytes:.6f}")
    if args.dataset:
        data = load_dataset(args.dataset, args.data_path, args.seed)
        print(f"test_acc={evaluate(model, data.x_test, data.y_test):.4f}")
    return 0


def cmd_size(args):
    if args.ticket:
        size = compression.account_size(compression.load(args.ticket))
    else:
        cfg = _config(args)
        arch = nn_core.build_arch(cfg.arch, tuple(int(d) for d in args.input_shape.split(",")), args.num_classes,
                                  cfg.width, cfg.batchnorm)
        if cfg.mode == "weight_training":
            size = compression.weight_training_size(arch)
        else:
            size = compression.plan_size(plan_for(cfg, arch), arch)
    print(f"supermask_bits={size.supermask_bits} bn_param_bits={size.bn_param_bits} "
          f"weight_bits={size.weight_bits} total_bytes={size.total_bytes:.3f} "
          f"megabytes={size.megabytes:.6f} mebibytes={size.mebibytes:.6f}")
    return 0


def cmd_ssa(args):
    n_grid = [int(v) for v in args.n_grid.split(",")]
    curve = estimate_success(n_grid, args.p, args.q, args.eps, default_z_grid(args.z_points), args.trials, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("n", "solver", "success_rate", "trials"))
    for n, solver, rate, trials in curve.to_rows():
        w.writerow((n, solver, f"{rate:.6f}", trials))
    _write(buf.getvalue(), args.out)
    slope, _, r2, k = tail_fit(curve)
    log.info("empirical tail fit: log(1 - success) ~ %.4f n (R^2 %.3f over %d points)", slope, r2, k)
    return 0


def _add_config_args(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="output path (default stdout)")


def build_parser():
    ap = argparse.ArgumentParser(prog="frozen-slt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one config (all repetitions), emit a CSV row")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="dense / pruned-only / frozen (/ weight training) comparison")
    _add_config_args(p)
    p.add_argument("--modes", default="slt_dense,slt_pruned,slt_frozen,weight_training")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="vary one axis, one CSV row per value")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pack", help="search one ticket and write it as a .ftkt file")
    _add_config_args(p)
    p.add_argument("--metrics", help="per-epoch metrics CSV path")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unpack", help="decode a .ftkt file, optionally evaluate it")
    p.add_argument("ticket")
    p.add_argument("--dataset")
    p.add_argument("--data-path")
    p.add_argument("--seed", type=int, default=0, help="dataset split seed")
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("size", help="model size of a .ftkt file or of a config's plan")
    p.add_argument("ticket", nargs="?")
    _add_config_args(p)
    p.add_argument("--input-shape", default="3,32,32")
    p.add_argument("--num-classes", type=int, default=10)
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("ssa-verify", help="subset-sum success-probability curve")
    p.add_argument("--n-grid", default="8,16,24,32")
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--q", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--z-points", type=int, default=21)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ssa)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
