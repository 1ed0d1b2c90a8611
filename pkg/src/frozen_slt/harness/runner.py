"""Experiment runner: one config -> one result row; comparisons and sweeps -> CSV."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import nn_core
from ..compression import SizeReport, account_size, weight_training_size
from ..freezing import build_freeze_plan
from ..init_rng import InitKind, Purpose, StreamKey, init_weights
from ..ticket_search import (DataSplit, Optimizer, build_model, cosine_lr, epoch_order, evaluate, finalize,
                             search)
from .config import ExperimentConfig
from .datasets import Dataset, load_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "mode", "arch", "width", "dataset", "strategy", "init", "seed", "repetitions", "epochs",
    "slt_sparsity", "freeze_ratio", "prune_ratio", "lock_ratio", "num_params",
    "acc_mean", "acc_std", "acc_per_rep", "supermask_bits", "bn_param_bits", "weight_bits",
    "total_bytes", "megabytes", "status",
)


@dataclass
class RunOutcome:
    test_acc: float
    val_acc: float
    metrics: list
    size: SizeReport
    model: object = None


@dataclass
class ResultRow:
    config: ExperimentConfig
    accuracies: list = field(default_factory=list)
    size: Optional[SizeReport] = None
    num_params: int = 0
    realized: tuple = (math.nan, math.nan, math.nan)
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self):
        # reported only for repeated runs
        if len(self.accuracies) > 1:
            return float(np.std(self.accuracies, ddof=1))
        return None

    def as_dict(self):
        c = self.config
        s = self.size
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"
        return {
            "mode": c.mode, "arch": c.arch, "width": f"{c.width:g}", "dataset": c.dataset,
            "strategy": c.strategy, "init": c.init, "seed": c.seed, "repetitions": c.repetitions,
            "epochs": c.epochs, "slt_sparsity": f"{c.slt_sparsity:g}",
            "freeze_ratio": fmt(self.realized[0]), "prune_ratio": fmt(self.realized[1]),
            "lock_ratio": fmt(self.realized[2]), "num_params": self.num_params,
            "acc_mean": fmt(self.mean), "acc_std": fmt(self.std),
            "acc_per_rep": ";".join(f"{a:.6f}" for a in self.accuracies),
            "supermask_bits": s.supermask_bits if s else "", "bn_param_bits": s.bn_param_bits if s else "",
            "weight_bits": s.weight_bits if s else "",
            "total_bytes": f"{s.total_bytes:.3f}" if s else "", "megabytes": f"{s.megabytes:.6f}" if s else "",
            "status": "ok" if self.ok else f"error: {self.error}",
        }


_DATA_CACHE: dict = {}


def get_dataset(cfg: ExperimentConfig) -> Dataset:
    key = (cfg.dataset, cfg.data_path, cfg.seed, cfg.train_limit)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = load_dataset(cfg.dataset, cfg.data_path, cfg.seed, cfg.train_limit)
    return _DATA_CACHE[key]


def build_arch_for(cfg: ExperimentConfig, data: Dataset):
    return nn_core.build_arch(cfg.arch, data.input_shape, data.num_classes, cfg.width, cfg.batchnorm)


def plan_for(cfg: ExperimentConfig, arch):
    freeze, prune, lock = cfg.plan_ratios()
    if prune is None:
        return build_freeze_plan(arch, freeze, cfg.slt_sparsity, cfg.strategy,
                                 exempt_boundary_layers=cfg.exempt_boundary_layers)
    return build_freeze_plan(arch, freeze, cfg.slt_sparsity, cfg.strategy, prune_ratio=prune, lock_ratio=lock,
                             exempt_boundary_layers=cfg.exempt_boundary_layers)


def _split(data: Dataset):
    return DataSplit(data.x_train, data.y_train, data.x_val, data.y_val)


def run_once(cfg: ExperimentConfig, seed: int, data: Dataset, on_step=None) -> RunOutcome:
    arch = build_arch_for(cfg, data)
    if cfg.mode == "weight_training":
        return train_weights(cfg, arch, seed, data)
    plan = plan_for(cfg, arch)
    model = build_model(arch, plan, cfg.slt_sparsity, seed, InitKind(cfg.init))
    best, metrics = search(model, cfg.search_config(), _split(data), on_step=on_step)
    best = finalize(best)
    return RunOutcome(evaluate(best, data.x_test, data.y_test), max(m.val_acc for m in metrics), metrics,
                      account_size(best), best)


def train_weights(cfg: ExperimentConfig, arch, seed: int, data: Dataset) -> RunOutcome:
    """Dense weight-training baseline: the same engine, gradients applied to the weights."""
    init = InitKind(cfg.init if cfg.init != "signed_kaiming_constant" else "kaiming_uniform")
    weights = {i: init_weights(arch.layers[i], init, StreamKey(seed, i, Purpose.WEIGHTS)) for i in arch.param_layers}
    bn = nn_core.BatchNormState.fresh(arch)
    sc = cfg.search_config()
    opt = Optimizer(sc, weights)
    n = len(data.x_train)
    metrics = []
    best, best_acc = None, -1.0
    for epoch in range(sc.epochs):
        lr = cosine_lr(sc.lr0, epoch, sc.epochs)
        order = epoch_order(seed, epoch, n)
        total = 0.0
        for s in range(0, n, sc.batch_size):
            b = order[s:s + sc.batch_size]
            logits, cache = nn_core.forward(arch, weights, None, data.x_train[b], "train", bn)
            loss, g = nn_core.cross_entropy(logits, data.y_train[b])
            grads, _ = nn_core.backward(cache, g, need_input_grad=False)
            weights = opt.step(weights, grads, lr)
            total += loss * len(b)
        acc = nn_core.accuracy(arch, weights, None, data.x_val, data.y_val, bn)
        metrics.append((epoch, total / n, acc, lr))
        if acc > best_acc:
            best_acc = acc
            best = ({i: w.copy() for i, w in weights.items()}, bn.copy())
    weights, bn = best
    test = nn_core.accuracy(arch, weights, None, data.x_test, data.y_test, bn)
    return RunOutcome(test, best_acc, metrics, weight_training_size(arch))


def run_config(cfg: ExperimentConfig, on_step=None) -> ResultRow:
    row = ResultRow(cfg)
    try:
        data = get_dataset(cfg)
        arch = build_arch_for(cfg, data)
        row.num_params = arch.num_params
        if cfg.mode != "weight_training":
            plan = plan_for(cfg, arch)
            row.realized = (plan.pruned / plan.total + plan.locked / plan.total,
                            plan.pruned / plan.total, plan.locked / plan.total)
        for r in range(cfg.repetitions):
            out = run_once(cfg, cfg.seed + r, data, on_step)
            row.accuracies.append(out.test_acc)
            row.size = out.size
            log.info("%s rep %d: test acc %.4f", cfg.mode, r, out.test_acc)
    except Exception as e:  # recorded per row; the caller keeps going
        log.exception("run failed")
        row.error = f"{type(e).__name__}: {e}"
    return row


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_dict())
    return buf.getvalue()


def metrics_to_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_loss", "val_acc", "lr"))
    for m in metrics:
        w.writerow((m.epoch, f"{m.train_loss:.6f}", f"{m.val_acc:.6f}", f"{m.lr:.8f}"))
    return buf.getvalue()


def run_comparison(configs) -> list:
    return [run_config(c) for c in configs]


def compare_modes(base: ExperimentConfig, modes=("slt_dense", "slt_pruned", "slt_frozen")) -> list:
    configs = []
    for m in modes:
        changes = {"mode": m}
        if m in ("slt_dense", "weight_training"):
            changes.update(freeze_ratio=0.0, prune_ratio=None, lock_ratio=None)
        if m == "slt_pruned":
            changes.update(lock_ratio=None, prune_ratio=None)
        configs.append(base.replace(**changes))
    return run_comparison(configs)


SWEEP_AXES = ("freeze_ratio", "slt_sparsity", "width_multiplier", "prune_ratio")


def sweep_configs(axis: str, values, base: ExperimentConfig) -> list:
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = []
    for v in values:
        if axis == "width_multiplier":
            out.append(base.replace(width=float(v)))
        elif axis == "prune_ratio":
            # prune:lock proportion at the base freezing ratio
            f = base.freeze_ratio
            if not 0 <= v <= f:
                raise ValueError(f"prune ratio {v} outside [0, freeze_ratio={f}]")
            out.append(base.replace(mode="slt_frozen", prune_ratio=float(v), lock_ratio=round(f - v, 10)))
        else:
            out.append(base.replace(**{axis: float(v)}))
    return out


def sweep(axis: str, values, base: ExperimentConfig) -> list:
    return run_comparison(sweep_configs(axis, values, base))
