"""Packed ticket files and the model-size accountant.

A packed ticket stores only what cannot be regenerated from the seed: the
supermask bits of FREE positions and the batchnorm running statistics.
Weights and freezing masks are rebuilt from the header.  The byte layout is
documented in ``docs/format.md``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .freezing import FREE, LOCKED, materialize_mask, plan_from_counts
from .init_rng import RNG_SCHEME_VERSION, InitKind, InitKindName
from .ticket_search import TicketModel, effective_mask, layer_sparsities, layer_weights

MAGIC = b"FTKT"
FORMAT_VERSION = 1
CODEC_RAW = 0
FILE_EXTENSION = ".ftkt"

_INIT_CODES = {
    InitKindName.KAIMING_UNIFORM: 0,
    InitKindName.KAIMING_NORMAL: 1,
    InitKindName.SIGNED_KAIMING_CONSTANT: 2,
}
_INIT_NAMES = {v: k for k, v in _INIT_CODES.items()}
_STRATEGY_CODES = {"epl": 0, "erk": 1}
_STRATEGY_NAMES = {v: k for k, v in _STRATEGY_CODES.items()}

_HEADER = struct.Struct("<4sHHBBBBQd")


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class CountError(FormatError):
    pass


def arch_to_json(arch: nn_core.ArchSpec) -> str:
    doc = {
        "name": arch.name,
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
        "layers": [
            {"kind": l.kind, "fan_in": l.fan_in, "fan_out": l.fan_out,
             "kernel": list(l.kernel) if l.kernel else None, "padding": l.padding}
            for l in arch.layers
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def arch_from_json(text: str) -> nn_core.ArchSpec:
    doc = json.loads(text)
    layers = [
        nn_core.LayerSpec(l["kind"], l["fan_in"], l["fan_out"],
                          tuple(l["kernel"]) if l["kernel"] else None, l["padding"])
        for l in doc["layers"]
    ]
    return nn_core.ArchSpec(doc["name"], layers, tuple(doc["input_shape"]), doc["num_classes"])


class _Reader:
    def __init__(self, buf, start=0):
        self.buf = buf
        self.pos = start

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise FormatError(f"truncated file at byte {self.pos}")
        vals = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def pack(model: TicketModel, rng_scheme: int = RNG_SCHEME_VERSION) -> bytes:
    """Serialize a searched ticket.

    SKC weights are described by each layer's realized sparsity; pack a
    finalized model (``ticket_search.finalize``) if its forward pass must be
    reproduced bit for bit after unpacking.
    """
    arch = model.arch
    mask = effective_mask(model)
    realized = layer_sparsities(model, mask)
    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, rng_scheme, CODEC_RAW, _INIT_CODES[model.init.kind],
                        _STRATEGY_CODES.get(model.plan.strategy, 0), 0, model.seed, model.sparsity)
    arch_bytes = arch_to_json(arch).encode("utf-8")
    out += struct.pack("<I", len(arch_bytes)) + arch_bytes
    out += struct.pack("<I", len(arch.param_layers))
    for i in arch.param_layers:
        f = model.freeze[i].ravel()
        shape = arch.layers[i].weight_shape
        pruned = int((f == -1).sum())
        locked = int((f == LOCKED).sum())
        bits = mask[i].ravel()[f == FREE].astype(np.uint8)
        out += struct.pack("<HBB", i, len(shape), 0)
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack("<IIdI", pruned, locked, realized[i], bits.size)
        out += np.packbits(bits, bitorder="little").tobytes()
    bn = model.bn_state
    out += struct.pack("<Idd", len(arch.bn_layers), bn.momentum, bn.eps)
    for i in arch.bn_layers:
        c = bn.mean[i].size
        out += struct.pack("<HHI", i, 0, c)
        out += bn.mean[i].astype("<f4").tobytes() + bn.var[i].astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def unpack(data: bytes, expected_rng_scheme: int = RNG_SCHEME_VERSION) -> TicketModel:
    """Rebuild an inference-ready ticket.

    Scores are not stored; the returned model's scores are the supermask
    bits themselves, which reproduce the same top-k selection.
    """
    data = bytes(data)
    if len(data) < _HEADER.size + 4 or data[:4] != MAGIC:
        raise FormatError("not a packed ticket (bad magic)")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("CRC-32 mismatch: file is corrupt or was modified")
    magic, version, scheme, codec, init_code, strategy_code, _, seed, sparsity = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version} unsupported (expected {FORMAT_VERSION})")
    if scheme != expected_rng_scheme:
        raise VersionError(f"RNG scheme {scheme} differs from this library's scheme {expected_rng_scheme}; "
                           "weights cannot be regenerated")
    if codec != CODEC_RAW:
        raise VersionError(f"unknown supermask codec {codec}")
    if init_code not in _INIT_NAMES:
        raise FormatError(f"unknown init kind code {init_code}")
    r = _Reader(data, _HEADER.size)
    arch = arch_from_json(r.raw(r.take("<I")).decode("utf-8"))
    n_layers = r.take("<I")
    if n_layers != len(arch.param_layers):
        raise CountError(f"{n_layers} layer records for {len(arch.param_layers)} parameterized layers")
    counts, bits, realized = {}, {}, {}
    for _ in range(n_layers):
        i, ndim, _ = r.take("<HBB")
        shape = tuple(int(v) for v in np.atleast_1d(r.take(f"<{ndim}I")))
        if i not in arch.param_layers or shape != arch.layers[i].weight_shape:
            raise CountError(f"layer record {i} with shape {shape} does not match the architecture")
        pruned, locked, k_l, nbits = r.take("<IIdI")
        n = arch.layers[i].size
        if pruned + locked > n or nbits != n - pruned - locked:
            raise CountError(f"layer {i}: bit count {nbits} != {n} - {pruned} - {locked}")
        payload = np.frombuffer(r.raw((nbits + 7) // 8), dtype=np.uint8)
        b = np.unpackbits(payload, count=nbits, bitorder="little") if nbits else np.zeros(0, np.uint8)
        active = locked + int(b.sum())
        if abs((1.0 - active / n) - k_l) > 1e-12:
            raise CountError(f"layer {i}: stored sparsity {k_l} disagrees with the mask bits")
        counts[i] = (pruned, locked)
        bits[i] = b
        realized[i] = k_l
    n_bn, momentum, eps = r.take("<Idd")
    bn = nn_core.BatchNormState(momentum=momentum, eps=eps)
    for _ in range(n_bn):
        i, _, c = r.take("<HHI")
        if i not in arch.bn_layers or c != arch.layers[i].fan_in:
            raise CountError(f"batchnorm record for layer {i} ({c} channels) does not match the architecture")
        bn.mean[i] = np.frombuffer(r.raw(4 * c), dtype="<f4").astype(np.float32)
        bn.var[i] = np.frombuffer(r.raw(4 * c), dtype="<f4").astype(np.float32)
    if r.pos != len(data) - 4:
        raise FormatError(f"{len(data) - 4 - r.pos} trailing bytes before the checksum")

    plan = plan_from_counts(arch, counts, _STRATEGY_NAMES.get(strategy_code, "epl"))
    freeze = materialize_mask(plan, seed)
    init_name = _INIT_NAMES[init_code]
    skc = init_name is InitKindName.SIGNED_KAIMING_CONSTANT
    init = InitKind(init_name, sparsity if skc else 0.0)
    weights = layer_weights(arch, seed, init, realized if skc else None)
    scores = {}
    for i in arch.param_layers:
        f = freeze[i].ravel()
        s = np.zeros(f.size, dtype=np.float32)
        s[np.flatnonzero(f == FREE)] = bits[i]
        scores[i] = s.reshape(freeze[i].shape)
    model = TicketModel(arch, seed, init, plan, freeze, weights, scores, sparsity, bn,
                        realized if skc else {i: init.sparsity_for_scaling for i in arch.param_layers})
    expected = model.active_count - plan.locked
    if sum(int(b.sum()) for b in bits.values()) != expected:
        raise CountError("total supermask popcount does not match the target sparsity")
    return model


def save(model: TicketModel, path) -> Path:
    path = Path(path)
    path.write_bytes(pack(model))
    return path


def load(path) -> TicketModel:
    return unpack(Path(path).read_bytes())


# -- size accounting -----------------------------------------------------------


@dataclass(frozen=True)
class SizeReport:
    supermask_bits: int
    bn_param_bits: int
    weight_bits: int = 0

    @property
    def total_bits(self):
        return self.supermask_bits + self.bn_param_bits + self.weight_bits

    @property
    def total_bytes(self):
        return self.total_bits / 8

    @property
    def megabytes(self):
        return self.total_bytes / 1e6

    @property
    def mebibytes(self):
        return self.total_bytes / 2**20


def size_from_counts(free_count: int, bn_values: int = 0) -> SizeReport:
    return SizeReport(int(free_count), 32 * int(bn_values))


def account_size(model: TicketModel) -> SizeReport:
    """Stored size: 1 bit per FREE position plus 32 bits per batchnorm statistic."""
    free = sum(int((f == FREE).sum()) for f in model.freeze.values())
    return size_from_counts(free, model.bn_state.num_values())


def plan_size(plan, arch: nn_core.ArchSpec) -> SizeReport:
    """Size implied by a freeze plan alone (running mean and variance per BN channel)."""
    bn_values = sum(2 * arch.layers[i].fan_in for i in arch.bn_layers)
    return size_from_counts(plan.free, bn_values)


def weight_training_size(arch: nn_core.ArchSpec) -> SizeReport:
    """Dense trained weights at 32 bits each, no supermask."""
    bn_values = sum(2 * arch.layers[i].fan_in for i in arch.bn_layers)
    return SizeReport(0, 32 * bn_values, 32 * arch.num_params)
