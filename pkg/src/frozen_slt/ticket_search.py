"""Edge-popup score search over a frozen random network.

Weights stay at their seeded values.  Each weight carries a score; the
supermask keeps every LOCKED weight plus the best-scored FREE weights across
all layers jointly, so that exactly ``round((1 - k) * N)`` weights are
active.  Scores receive straight-through gradients ``dL/d(w*m) * w``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn_core
from .freezing import FREE, LOCKED, FreezePlan, materialize_mask, ratio_count
from .init_rng import InitKind, InitKindName, Purpose, StreamKey, init_scores, init_weights, stream

log = logging.getLogger(__name__)


class WindowError(ValueError):
    """Target sparsity lies outside the window reachable by the frozen network."""


@dataclass
class TicketModel:
    arch: nn_core.ArchSpec
    seed: int
    init: InitKind
    plan: FreezePlan
    freeze: dict
    weights: dict
    scores: dict
    sparsity: float
    bn_state: nn_core.BatchNormState
    skc_sparsity: dict = field(default_factory=dict)

    @property
    def num_params(self):
        return self.arch.num_params

    @property
    def active_count(self):
        return ratio_count(1.0 - self.sparsity, self.num_params)

    def copy(self):
        return replace(
            self,
            weights={i: w.copy() for i, w in self.weights.items()},
            scores={i: s.copy() for i, s in self.scores.items()},
            freeze={i: f.copy() for i, f in self.freeze.items()},
            bn_state=self.bn_state.copy(),
            skc_sparsity=dict(self.skc_sparsity),
        )


def layer_weights(arch, seed, init: InitKind, skc_sparsity=None):
    """Seeded weights of every parameterized layer.

    ``skc_sparsity`` maps layer index to the sparsity used for the SKC
    rescaling; missing layers fall back to ``init.sparsity_for_scaling``.
    """
    out = {}
    for i in arch.param_layers:
        kind = init
        if init.kind is InitKindName.SIGNED_KAIMING_CONSTANT and skc_sparsity and i in skc_sparsity:
            # a fully inactive layer outputs zeros whatever its scale
            k = skc_sparsity[i] if skc_sparsity[i] < 1.0 else 0.0
            kind = InitKind(init.kind, k)
        out[i] = init_weights(arch.layers[i], kind, StreamKey(seed, i, Purpose.WEIGHTS))
    return out


def build_model(arch, plan: FreezePlan, sparsity: float, seed: int = 0, init: InitKind | None = None):
    """Fresh model: seeded weights, scores and freezing masks.

    For SKC weights the global target sparsity stands in for every layer's
    sparsity until the ticket is finalized.
    """
    if init is None:
        init = InitKind()
    if init.kind is InitKindName.SIGNED_KAIMING_CONSTANT:
        init = InitKind(init.kind, sparsity)
    freeze = materialize_mask(plan, seed)
    weights = layer_weights(arch, seed, init)
    scores = {i: init_scores(arch.layers[i], StreamKey(seed, i, Purpose.SCORES)) for i in arch.param_layers}
    model = TicketModel(arch, seed, init, plan, freeze, weights, scores, sparsity,
                        nn_core.BatchNormState.fresh(arch),
                        {i: init.sparsity_for_scaling for i in arch.param_layers})
    check_window(model)
    return model


def check_window(model):
    total_locked = sum(int((f == LOCKED).sum()) for f in model.freeze.values())
    total_free = sum(int((f == FREE).sum()) for f in model.freeze.values())
    need = model.active_count - total_locked
    if need < 0 or need > total_free:
        lo, hi = model.plan.window()
        raise WindowError(
            f"sparsity {model.sparsity} outside reachable window [{lo:.4f}, {hi:.4f}]"
            f" (free-active count {need}, free positions {total_free})"
        )
    return need


def effective_mask(model: TicketModel) -> dict:
    """Binary supermask: all LOCKED plus the top-scored FREE positions globally.

    Ties are broken by lower layer index, then lower flat index.
    """
    need = check_window(model)
    idx = model.arch.param_layers
    free_pos = [np.flatnonzero(model.freeze[i].ravel() == FREE) for i in idx]
    free_scores = np.concatenate([model.scores[i].ravel()[p] for i, p in zip(idx, free_pos)])
    chosen = np.zeros(free_scores.size, dtype=bool)
    if 0 < need < free_scores.size:
        thresh = np.partition(free_scores, free_scores.size - need)[free_scores.size - need]
        chosen = free_scores > thresh
        ties = np.flatnonzero(free_scores == thresh)
        chosen[ties[: need - int(chosen.sum())]] = True
    elif need == free_scores.size:
        chosen[:] = True
    out = {}
    off = 0
    for i, p in zip(idx, free_pos):
        m = (model.freeze[i].ravel() == LOCKED).astype(np.uint8)
        m[p[chosen[off:off + p.size]]] = 1
        off += p.size
        out[i] = m.reshape(model.freeze[i].shape)
    return out


def score_gradient(model: TicketModel, grad_effective: dict) -> dict:
    """Straight-through score gradient, zero on frozen positions."""
    out = {}
    for i in model.arch.param_layers:
        g = grad_effective[i] * model.weights[i]
        out[i] = np.where(model.freeze[i] == FREE, g, np.float32(0)).astype(np.float32)
    return out


# -- optimizers --------------------------------------------------------------


@dataclass
class SearchConfig:
    optimizer: str = "sgd_momentum"
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    lr_schedule: str = "cosine"
    topk_interval: int = 1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.topk_interval < 1:
            raise ValueError("batch_size and topk_interval must be >= 1")
        if self.optimizer not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")


def cosine_lr(lr0, t, T):
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


class Optimizer:
    """SGD with momentum or AdamW over a dict of score tensors.

    ``update_mask`` (FREE positions) restricts which entries may change.
    SGD folds weight decay into the gradient before the momentum update.
    """

    def __init__(self, config: SearchConfig, params: dict, update_mask: Optional[dict] = None):
        self.config = config
        self.update_mask = update_mask
        self.t = 0
        self.m = {i: np.zeros_like(p) for i, p in params.items()}
        self.v = {i: np.zeros_like(p) for i, p in params.items()} if config.optimizer == "adamw" else None

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        c = self.config
        self.t += 1
        out = {}
        lr = np.float32(lr)
        wd = np.float32(c.weight_decay)
        for i, s in params.items():
            g = grads[i]
            if c.optimizer == "sgd_momentum":
                self.m[i] = np.float32(c.momentum) * self.m[i] + g + wd * s
                new = s - lr * self.m[i]
            else:
                b1, b2 = c.betas
                self.m[i] = np.float32(b1) * self.m[i] + np.float32(1 - b1) * g
                self.v[i] = np.float32(b2) * self.v[i] + np.float32(1 - b2) * g * g
                mhat = self.m[i] / np.float32(1 - b1 ** self.t)
                vhat = self.v[i] / np.float32(1 - b2 ** self.t)
                new = s - lr * (mhat / (np.sqrt(vhat) + np.float32(c.adam_eps))) - lr * wd * s
            if self.update_mask is not None:
                new = np.where(self.update_mask[i], new, s)
            out[i] = new.astype(np.float32)
        return out


def step(optimizer: Optimizer, scores: dict, score_grads: dict, t: int, T: int) -> dict:
    """One cosine-scheduled optimizer update of the scores (epoch ``t`` of ``T``)."""
    if not 0 <= t < T:
        raise ValueError(f"t must lie in [0, {T}), got {t}")
    return optimizer.step(scores, score_grads, cosine_lr(optimizer.config.lr0, t, T))


# -- search loop ---------------------------------------------------------------


@dataclass
class DataSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


def weights_digest(weights: dict) -> str:
    h = hashlib.sha256()
    for i in sorted(weights):
        h.update(np.ascontiguousarray(weights[i]).tobytes())
    return h.hexdigest()


def epoch_order(seed, epoch, n):
    # layer_index slot carries the epoch; slot 0 is reserved for the train/val split
    return stream(StreamKey(seed, epoch + 1, Purpose.DATA_SPLIT)).permutation(n)


def search(model: TicketModel, config: SearchConfig, data: DataSplit,
           on_step: Optional[Callable] = None):
    """Optimize scores; return ``(best_model, metrics)``.

    The returned model carries the scores and batchnorm statistics of the
    epoch with the best validation accuracy (earliest epoch on ties).
    ``on_step(model, mask, step_index)`` is called after every update with
    the mask used for that step.
    """
    if len(data.x_train) == 0:
        raise ValueError("empty training set")
    check_window(model)
    model = model.copy()
    free = {i: model.freeze[i] == FREE for i in model.arch.param_layers}
    opt = Optimizer(config, model.scores, free)
    digest = weights_digest(model.weights)
    metrics = []
    best, best_acc = None, -1.0
    n = len(data.x_train)
    step_index = 0
    mask = None
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr0, epoch, config.epochs)
        order = epoch_order(model.seed, epoch, n)
        losses = []
        for s in range(0, n, config.batch_size):
            batch = order[s:s + config.batch_size]
            if mask is None or step_index % config.topk_interval == 0:
                mask = effective_mask(model)
            logits, cache = nn_core.forward(model.arch, model.weights, mask, data.x_train[batch], "train",
                                            model.bn_state)
            loss, g = nn_core.cross_entropy(logits, data.y_train[batch])
            grads, _ = nn_core.backward(cache, g, need_input_grad=False)
            model.scores = opt.step(model.scores, score_gradient(model, grads), lr)
            losses.append(loss * len(batch))
            if on_step is not None:
                on_step(model, mask, step_index)
            step_index += 1
        mask = effective_mask(model)
        val_acc = nn_core.accuracy(model.arch, model.weights, mask, data.x_val, data.y_val, model.bn_state)
        metrics.append(EpochMetrics(epoch, float(np.sum(losses) / n), val_acc, lr))
        log.info("epoch %d loss %.4f val_acc %.4f lr %.5f", epoch, metrics[-1].train_loss, val_acc, lr)
        if val_acc > best_acc:
            best_acc = val_acc
            best = ({i: s.copy() for i, s in model.scores.items()}, model.bn_state.copy())
    assert weights_digest(model.weights) == digest, "weights changed during search"
    model.scores, model.bn_state = best
    return model, metrics


def layer_sparsities(model: TicketModel, mask: Optional[dict] = None) -> dict:
    if mask is None:
        mask = effective_mask(model)
    return {i: 1.0 - int(m.sum()) / m.size for i, m in mask.items()}


def finalize(model: TicketModel) -> TicketModel:
    """Regenerate SKC weights with each layer's realized sparsity.

    Kaiming-uniform/normal models are returned unchanged (as a copy).
    """
    model = model.copy()
    if model.init.kind is InitKindName.SIGNED_KAIMING_CONSTANT:
        model.skc_sparsity = layer_sparsities(model)
        model.weights = layer_weights(model.arch, model.seed, model.init, model.skc_sparsity)
    return model


def evaluate(model: TicketModel, x, y) -> float:
    return nn_core.accuracy(model.arch, model.weights, effective_mask(model), x, y, model.bn_state)
