"""Seed-reconstructible random streams and weight/score initializers.

Every random quantity in a ticket (weights, scores, freezing masks, data
shuffles) is drawn from its own Philox-4x64-10 stream keyed by
``(global_seed, layer_index, purpose)``.  Philox is counter based, so the n-th
raw word of a stream depends only on the key and n; layers can be regenerated
independently and in any order.

All derived variates are computed from the raw 64-bit words with fixed
formulas (see ``docs/format.md``) rather than numpy's distribution samplers,
so the bit patterns do not depend on the numpy version.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .nn_core import LayerSpec

RNG_SCHEME_VERSION = 1

_TWO_53 = float(2**53)


class Purpose(enum.IntEnum):
    WEIGHTS = 1
    SCORES = 2
    PRUNE_MASK = 3
    LOCK_MASK = 4
    DATA_SPLIT = 5
    SSA = 6
    DATA = 7


class InitKindName(str, enum.Enum):
    KAIMING_UNIFORM = "kaiming_uniform"
    KAIMING_NORMAL = "kaiming_normal"
    SIGNED_KAIMING_CONSTANT = "signed_kaiming_constant"


@dataclass(frozen=True)
class StreamKey:
    global_seed: int
    layer_index: int
    purpose: Purpose

    def words(self) -> np.ndarray:
        if not 0 <= self.global_seed < 2**64:
            raise ValueError(f"global_seed out of 64-bit range: {self.global_seed}")
        if not 0 <= self.layer_index < 2**48:
            raise ValueError(f"layer_index out of range: {self.layer_index}")
        return np.array(
            [self.global_seed, (self.layer_index << 8) | int(self.purpose)],
            dtype=np.uint64,
        )


@dataclass(frozen=True)
class InitKind:
    kind: InitKindName = InitKindName.KAIMING_UNIFORM
    sparsity_for_scaling: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKindName(self.kind))
        if not 0.0 <= self.sparsity_for_scaling < 1.0:
            raise ValueError("sparsity_for_scaling must lie in [0, 1)")


class Stream:
    """Sequential reader over a keyed Philox stream.

    Draws continue where the previous call stopped; a fresh ``Stream`` with
    the same key replays the same words.
    """

    def __init__(self, key: StreamKey):
        self.key = key
        self._bitgen = np.random.Philox(key=key.words())

    def raw(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        return self._bitgen.random_raw(n).astype(np.uint64, copy=False)

    def uniform(self, n: int) -> np.ndarray:
        """float64 values in [0, 1) from the top 53 bits of each word."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) / _TWO_53

    def normal(self, n: int) -> np.ndarray:
        """float64 standard normals by Box-Muller, two words per pair."""
        m = (n + 1) // 2
        w = self.raw(2 * m)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO_53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) / _TWO_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def signs(self, n: int) -> np.ndarray:
        return np.where(self.raw(n) >> np.uint64(63), 1.0, -1.0)

    def bernoulli(self, n: int, p: float) -> np.ndarray:
        return self.uniform(n) < p

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable")


def stream(key: StreamKey) -> Stream:
    return Stream(key)


def init_fan_in(spec: LayerSpec) -> int:
    if not spec.has_params:
        raise ValueError(f"layer kind {spec.kind!r} has no parameters")
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return spec.fan_in * kh * kw
    return spec.fan_in


def skc_magnitude(fan_in: int, layer_sparsity: float) -> float:
    return math.sqrt(2.0 / fan_in) / math.sqrt(1.0 - layer_sparsity)


def init_weights(spec: LayerSpec, kind: InitKind, key: StreamKey) -> np.ndarray:
    fan_in = init_fan_in(spec)
    n = spec.size
    s = stream(key)
    if kind.kind is InitKindName.KAIMING_UNIFORM:
        bound = math.sqrt(6.0 / fan_in)
        w = bound * (2.0 * s.uniform(n) - 1.0)
    elif kind.kind is InitKindName.KAIMING_NORMAL:
        w = math.sqrt(2.0 / fan_in) * s.normal(n)
    else:
        w = skc_magnitude(fan_in, kind.sparsity_for_scaling) * s.signs(n)
    return w.astype(np.float32).reshape(spec.weight_shape)


def init_scores(spec: LayerSpec, key: StreamKey) -> np.ndarray:
    fan_in = init_fan_in(spec)
    s = stream(key)
    return (math.sqrt(2.0 / fan_in) * s.normal(spec.size)).astype(np.float32).reshape(spec.weight_shape)
