"""Frozen-network construction.

A frozen network fixes part of its random weights at initialization: some
are pre-pruned (always inactive) and some are locked (always active).  This
module plans the global ratios, spreads them over layers with the EPL or ERK
rule, and draws the exact-count ternary freezing masks from seeded streams.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .init_rng import Purpose, StreamKey, stream
from .nn_core import ArchSpec

PRUNED = -1
FREE = 0
LOCKED = 1

STRATEGIES = ("epl", "erk")


class PlanError(ValueError):
    pass


class LayerCollapseWarning(UserWarning):
    pass


def ratio_count(ratio: float, n: int) -> int:
    """round(ratio * n), halves rounded up; the one rounding rule used for counts."""
    return int(math.floor(ratio * n + 0.5 + 1e-9))


def plan_proportion(freeze_ratio: float, sparsity: float):
    """Split a freezing ratio into (prune_ratio, lock_ratio) centred on ``sparsity``.

    The non-frozen region [P_r, 1 - L_r] is centred on the target sparsity
    when possible; otherwise the offending ratio is clamped to zero and the
    freezing ratio is kept.
    """
    if not 0.0 <= freeze_ratio < 1.0:
        raise PlanError(f"freeze ratio must lie in [0, 1), got {freeze_ratio}")
    if not 0.0 < sparsity < 1.0:
        raise PlanError(f"SLT sparsity must lie in (0, 1), got {sparsity}")
    prune = sparsity - (1.0 - freeze_ratio) / 2.0
    prune = min(max(prune, 0.0), freeze_ratio)
    lock = freeze_ratio - prune
    assert prune <= sparsity + 1e-12 and sparsity <= 1.0 - lock + 1e-12
    return prune, lock


# -- layer-wise allocation ------------------------------------------------


def erk_scale(spec) -> float:
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return (spec.fan_in + spec.fan_out + kh + kw) / (spec.fan_in * spec.fan_out * kh * kw)
    return (spec.fan_in + spec.fan_out) / (spec.fan_in * spec.fan_out)


def largest_remainder(real_counts, total: int, caps) -> np.ndarray:
    """Integer counts summing to ``total``, each within [0, cap].

    Floors first, then hands the missing units to the largest fractional
    parts; ties go to the lower layer index.
    """
    real = np.asarray(real_counts, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    base = np.minimum(np.floor(real + 1e-9).astype(np.int64), caps)
    short = total - int(base.sum())
    if short < 0 or short > int((caps - base).sum()):
        raise PlanError(f"cannot distribute {total} units over caps {caps.tolist()}")
    frac = real - base
    order = sorted(range(len(real)), key=lambda j: (-frac[j], j))
    while short > 0:
        progressed = False
        for j in order:
            if short == 0:
                break
            if base[j] < caps[j]:
                base[j] += 1
                short -= 1
                progressed = True
        if not progressed:
            raise PlanError("largest-remainder repair ran out of capacity")
    return base


def _epl_real(sizes, keep_total):
    """Equal share per layer with waterfill: layers smaller than the share keep everything."""
    sizes = np.asarray(sizes, dtype=np.float64)
    keep = np.zeros_like(sizes)
    open_ = np.ones(len(sizes), dtype=bool)
    remaining = float(keep_total)
    while open_.any():
        share = remaining / open_.sum()
        full = open_ & (sizes <= share)
        if not full.any():
            keep[open_] = share
            break
        keep[full] = sizes[full]
        remaining -= sizes[full].sum()
        open_ &= ~full
    return keep


def _erk_real(sizes, scales, keep_total):
    """Density proportional to the ERK scale, capped at 1 with proportional redistribution."""
    sizes = np.asarray(sizes, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    density = np.zeros_like(sizes)
    open_ = np.ones(len(sizes), dtype=bool)
    remaining = float(keep_total)
    while open_.any():
        eps = remaining / float((scales[open_] * sizes[open_]).sum())
        over = open_ & (eps * scales >= 1.0)
        if not over.any():
            density[open_] = eps * scales[open_]
            break
        density[over] = 1.0
        remaining -= sizes[over].sum()
        open_ &= ~over
    return density * sizes


def allocate_layerwise(arch: ArchSpec, global_ratio: float, strategy: str = "epl") -> dict:
    """Per-layer keep counts after removing ``global_ratio`` of all weights.

    EPL leaves every layer the same number of weights (waterfilled); ERK sets
    layer densities proportional to the ERK scale.  Counts are integers whose
    total is exactly ``N - round(global_ratio * N)``.
    """
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise PlanError(f"unknown strategy {strategy!r}")
    if not 0.0 <= global_ratio <= 1.0:
        raise PlanError(f"global ratio must lie in [0, 1], got {global_ratio}")
    idx = arch.param_layers
    if not idx:
        raise PlanError("architecture has no parameterized layers")
    sizes = np.array([arch.layers[i].size for i in idx], dtype=np.int64)
    total = int(sizes.sum())
    keep_total = total - ratio_count(global_ratio, total)
    if strategy == "epl":
        real = _epl_real(sizes, keep_total)
    else:
        real = _erk_real(sizes, [erk_scale(arch.layers[i]) for i in idx], keep_total)
    counts = largest_remainder(real, keep_total, sizes)
    return {i: int(c) for i, c in zip(idx, counts)}


# -- plans and masks ------------------------------------------------------


@dataclass(frozen=True)
class LayerFreeze:
    index: int
    size: int
    pruned: int
    locked: int
    shape: tuple = ()

    @property
    def frozen(self):
        return self.pruned + self.locked

    @property
    def free(self):
        return self.size - self.frozen

    @property
    def prune_ratio(self):
        return self.pruned / self.size

    @property
    def lock_ratio(self):
        return self.locked / self.size

    @property
    def freeze_ratio(self):
        return self.frozen / self.size


@dataclass(frozen=True)
class FreezePlan:
    freeze_ratio: float
    prune_ratio: float
    lock_ratio: float
    strategy: str
    layers: tuple

    @property
    def total(self):
        return sum(l.size for l in self.layers)

    @property
    def pruned(self):
        return sum(l.pruned for l in self.layers)

    @property
    def locked(self):
        return sum(l.locked for l in self.layers)

    @property
    def free(self):
        return sum(l.free for l in self.layers)

    def layer(self, index) -> LayerFreeze:
        for l in self.layers:
            if l.index == index:
                return l
        raise KeyError(index)

    def window(self):
        """Reachable SLT sparsities: [pruned/N, 1 - locked/N]."""
        return self.pruned / self.total, 1.0 - self.locked / self.total


def _repair_locks(sizes, pruned, frozen):
    """Make frozen >= pruned in every layer without changing the frozen total."""
    frozen = frozen.copy()
    for j in range(len(sizes)):
        while frozen[j] < pruned[j]:
            donors = [d for d in range(len(sizes)) if frozen[d] > pruned[d]]
            if not donors:
                raise PlanError("cannot repair negative lock counts")
            d = max(donors, key=lambda d: (frozen[d] - pruned[d], -d))
            frozen[d] -= 1
            frozen[j] += 1
    return frozen


def build_freeze_plan(arch: ArchSpec, freeze_ratio: float, sparsity: float | None = None,
                      strategy: str = "epl", prune_ratio: float | None = None,
                      lock_ratio: float | None = None, exempt_boundary_layers: bool = False) -> FreezePlan:
    """Plan global and per-layer prune/lock counts.

    Explicit ``prune_ratio``/``lock_ratio`` bypass the centring rule; the
    freezing ratio is then their sum.  With ``exempt_boundary_layers`` the
    first and last parameterized layers are left entirely free and the
    global counts are spread over the remaining layers.
    """
    if prune_ratio is not None or lock_ratio is not None:
        prune_ratio = prune_ratio or 0.0
        lock_ratio = lock_ratio or 0.0
        if prune_ratio < 0 or lock_ratio < 0 or prune_ratio + lock_ratio >= 1.0 + 1e-12:
            raise PlanError(f"invalid ratio overrides prune={prune_ratio} lock={lock_ratio}")
        freeze_ratio = prune_ratio + lock_ratio
    else:
        if sparsity is None:
            raise PlanError("need a target sparsity or explicit prune/lock ratios")
        prune_ratio, lock_ratio = plan_proportion(freeze_ratio, sparsity)

    all_idx = arch.param_layers
    exempt = set()
    if exempt_boundary_layers and len(all_idx) > 2:
        exempt = {all_idx[0], all_idx[-1]}
    idx = [i for i in all_idx if i not in exempt]
    total = arch.num_params
    n_pruned = ratio_count(prune_ratio, total)
    n_frozen = ratio_count(freeze_ratio, total)
    sizes = np.array([arch.layers[i].size for i in idx], dtype=np.int64)
    sub_total = int(sizes.sum())
    if n_frozen > sub_total:
        raise PlanError("frozen count exceeds the non-exempt parameter count")

    sub = _SubArch(arch, idx)
    keep_p = allocate_layerwise(sub, 1.0 - (sub_total - n_pruned) / sub_total, strategy)
    keep_f = allocate_layerwise(sub, 1.0 - (sub_total - n_frozen) / sub_total, strategy)
    pruned = np.array([arch.layers[i].size - keep_p[i] for i in idx], dtype=np.int64)
    frozen = np.array([arch.layers[i].size - keep_f[i] for i in idx], dtype=np.int64)
    # the allocation helper rounds from a ratio; pin the exact global totals
    pruned = _fix_total(pruned, n_pruned, sizes)
    frozen = _fix_total(frozen, n_frozen, sizes)
    frozen = _repair_locks(sizes, pruned, frozen)

    layers = []
    j = 0
    for i in all_idx:
        n = arch.layers[i].size
        if i in exempt:
            layers.append(LayerFreeze(i, n, 0, 0, arch.layers[i].weight_shape))
            continue
        layers.append(LayerFreeze(i, n, int(pruned[j]), int(frozen[j] - pruned[j]), arch.layers[i].weight_shape))
        j += 1
    for l in layers:
        if l.pruned == l.size:
            warnings.warn(f"layer {l.index} is entirely pre-pruned (layer collapse)", LayerCollapseWarning)
    return FreezePlan(freeze_ratio, prune_ratio, lock_ratio, strategy.lower(), tuple(layers))


def _fix_total(counts, target, caps):
    diff = target - int(counts.sum())
    counts = counts.copy()
    j = 0
    while diff != 0:
        step = 1 if diff > 0 else -1
        if 0 <= counts[j] + step <= caps[j]:
            counts[j] += step
            diff -= step
        j = (j + 1) % len(counts)
    return counts


class _SubArch:
    """Duck-typed view of an ArchSpec restricted to some parameterized layers."""

    def __init__(self, arch, idx):
        self.layers = arch.layers
        self.param_layers = list(idx)


def plan_from_counts(arch: ArchSpec, counts, strategy="epl") -> FreezePlan:
    """Rebuild a plan from stored per-layer (pruned, locked) counts."""
    layers = []
    for i in arch.param_layers:
        p, l = counts[i]
        n = arch.layers[i].size
        if p < 0 or l < 0 or p + l > n:
            raise PlanError(f"layer {i}: inconsistent counts pruned={p} locked={l} size={n}")
        layers.append(LayerFreeze(i, n, int(p), int(l), arch.layers[i].weight_shape))
    total = arch.num_params
    pr = sum(x.pruned for x in layers) / total
    lr = sum(x.locked for x in layers) / total
    return FreezePlan(pr + lr, pr, lr, strategy, tuple(layers))


def rank_below(words: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the entries whose stable ascending rank is < k.

    Same set as ``np.argsort(words, kind="stable")[:k]`` without sorting:
    ties at the cut go to the lower index.
    """
    out = np.zeros(words.size, dtype=bool)
    if k <= 0:
        return out
    if k >= words.size:
        out[:] = True
        return out
    cut = np.partition(words, k - 1)[k - 1]
    out = words < cut
    at = np.flatnonzero(words == cut)
    out[at[: k - int(out.sum())]] = True
    return out


def materialize_mask(plan: FreezePlan, seed: int) -> dict:
    """Draw the ternary freezing mask of every layer.

    Flat indices are ranked by their raw stream word (stable argsort): the
    first ``pruned`` ranks are PRUNED, the next ``locked`` are LOCKED.
    """
    out = {}
    for l in plan.layers:
        raw = stream(StreamKey(seed, l.index, Purpose.PRUNE_MASK)).raw(l.size)
        pruned = rank_below(raw, l.pruned)
        m = np.zeros(l.size, dtype=np.int8)
        m[pruned] = PRUNED
        m[rank_below(raw, l.pruned + l.locked) & ~pruned] = LOCKED
        out[l.index] = m.reshape(l.shape or (l.size,))
    return out


def encode_ternary(mask: dict) -> dict:
    """Ternary code m_l + (m_p - 1): -1 pruned, 0 free, +1 locked."""
    keep, lock = split_masks(mask)
    return {i: (lock[i].astype(np.int8) + (keep[i].astype(np.int8) - 1)) for i in mask}


def decode_ternary(codes: dict) -> dict:
    out = {}
    for i, c in codes.items():
        c = np.asarray(c)
        if not np.isin(c, (PRUNED, FREE, LOCKED)).all():
            raise ValueError(f"layer {i}: ternary codes must be -1, 0 or +1")
        out[i] = c.astype(np.int8)
    return out


def split_masks(mask: dict):
    """(keep mask m_p, lock mask m_l) as 0/1 arrays; m_p is 0 exactly on PRUNED."""
    keep = {i: (m != PRUNED).astype(np.uint8) for i, m in mask.items()}
    lock = {i: (m == LOCKED).astype(np.uint8) for i, m in mask.items()}
    return keep, lock


def frozen_weights(weights: dict, mask: dict) -> dict:
    """(m_p * (1 - m_l) + m_l) * w: zero on pruned positions, w elsewhere."""
    keep, lock = split_masks(mask)
    return {i: ((keep[i] * (1 - lock[i]) + lock[i]) * weights[i]).astype(np.float32) for i in weights}
