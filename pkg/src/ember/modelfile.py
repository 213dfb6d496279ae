"""EHNN model files.

Layout (little-endian throughout):

    "EHNN"  version:u16  layer_count:u16
    name_len:u16 name:utf8  input_rank:u8 input_dims:u16*rank  input_scale:i8
    per layer:
        kind:u8  dims:u16*len(dims)  weight_scale:i8  out_scale:i8  flags:u8
        name_len:u8 name:utf8
        [pattern_target:f32]                       flags bit 3
        [mask: one bit per weight, LSB first]      flags bit 1
        weights: Q15 i16 (mask-active ones only when bit 2 "packed" is set)
        bias: i32 * out_channels
    crc32 of everything above: u32

flags bit 0 marks a patterned layer.  A packed file carries only the
low-energy weights; the masked-out positions load as zero.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ember.errors import (
    BadMagicError,
    ChecksumError,
    ModelFormatError,
    TruncatedModelError,
    VersionMismatchError,
)
from ember.model import MAC_KINDS, LayerKind, LayerSpec, ModelSpec, QTensor

MAGIC = b"EHNN"
VERSION = 1

F_PATTERNED = 1
F_MASK = 2
F_PACKED = 4
F_TARGET = 8

N_DIMS = {LayerKind.CONV2D: 4, LayerKind.FULLY_CONNECTED: 2, LayerKind.MAXPOOL: 3, LayerKind.RELU: 0}


def serialize_model(model: ModelSpec, packed: bool = False) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(model.layers))
    name = model.name.encode()
    out += struct.pack("<H", len(name)) + name
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}H", *model.input_shape)
    out += struct.pack("<b", model.input_scale)
    for layer in model.layers:
        flags = 0
        is_mac = layer.kind in MAC_KINDS
        if layer.patterned:
            flags |= F_PATTERNED
        if layer.mask is not None:
            flags |= F_MASK
        if packed and layer.mask is not None:
            flags |= F_PACKED
        if layer.pattern_target is not None:
            flags |= F_TARGET
        out += struct.pack("<B", int(layer.kind))
        out += struct.pack(f"<{len(layer.dims)}H", *layer.dims)
        out += struct.pack("<bbB", layer.weight_scale, layer.out_scale, flags)
        lname = layer.name.encode()
        out += struct.pack("<B", len(lname)) + lname
        if flags & F_TARGET:
            out += struct.pack("<f", layer.pattern_target)
        if not is_mac:
            continue
        if layer.weights is None:
            raise ModelFormatError(f"layer {layer.id} has no weights to serialize")
        w = layer.weights.data.astype("<i2")
        if flags & F_MASK:
            m = layer.mask.reshape(-1)
            out += np.packbits(m, bitorder="little").tobytes()
            if flags & F_PACKED:
                w = w[m]
        out += w.tobytes()
        out += layer.bias_values().astype("<i4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(
                f"stream ends at byte {len(self.data)}; needed {n} more bytes at offset {self.pos}"
            )
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _parse(data: bytes) -> tuple:
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("H")
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, this reader handles {VERSION}")
    (n_layers,) = r.unpack("H")
    (name_len,) = r.unpack("H")
    name = r.take(name_len).decode()
    (rank,) = r.unpack("B")
    input_shape = r.unpack(f"{rank}H")
    (input_scale,) = r.unpack("b")
    layers = []
    for i in range(n_layers):
        (kind,) = r.unpack("B")
        try:
            kind = LayerKind(kind)
        except ValueError:
            raise ModelFormatError(f"layer {i}: unknown kind {kind} at offset {r.pos - 1}") from None
        dims = r.unpack(f"{N_DIMS[kind]}H")
        w_scale, out_scale, flags = r.unpack("bbB")
        (lname_len,) = r.unpack("B")
        lname = r.take(lname_len).decode()
        target = r.unpack("f")[0] if flags & F_TARGET else None
        if target is not None:
            target = float(np.float32(target))
        weights = bias = mask = None
        if kind in MAC_KINDS:
            n = int(np.prod(dims))
            if flags & F_MASK:
                bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
                mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool)
            if flags & F_PACKED:
                if mask is None:
                    raise ModelFormatError(f"layer {i}: packed weights without a mask")
                k = int(mask.sum())
                w = np.zeros(n, dtype=np.int16)
                w[mask] = np.frombuffer(r.take(2 * k), dtype="<i2")
            else:
                w = np.frombuffer(r.take(2 * n), dtype="<i2").astype(np.int16)
            weights = QTensor(dims, w, w_scale)
            bias = np.frombuffer(r.take(4 * dims[0]), dtype="<i4").astype(np.int32)
        try:
            layers.append(LayerSpec(kind, dims, i, weights, bias, mask, out_scale,
                                    bool(flags & F_PATTERNED), lname, target))
        except Exception as exc:
            raise ModelFormatError(f"layer {i}: {exc}") from exc
    return ModelSpec(layers, input_shape, name, input_scale), r.pos


def deserialize_model(data: bytes) -> ModelSpec:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {data[:4]!r}")
    if len(data) < 6:
        raise TruncatedModelError("stream ends inside the header")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, this reader handles {VERSION}")
    crc_ok = len(data) >= 8 and zlib.crc32(data[:-4]) & 0xFFFFFFFF == struct.unpack("<I", data[-4:])[0]
    if not crc_ok:
        # a short stream reports as truncated; otherwise the bytes were altered
        try:
            _, end = _parse(data)
        except TruncatedModelError:
            raise
        except ModelFormatError:
            raise ChecksumError("checksum mismatch") from None
        if end + 4 > len(data):
            raise TruncatedModelError(f"stream ends before the checksum at offset {end}")
        raise ChecksumError("checksum mismatch")
    model, end = _parse(data)
    if end + 4 != len(data):
        raise ModelFormatError(f"{len(data) - end - 4} unexpected bytes before the checksum")
    return model.validate()


def save_model(model: ModelSpec, path, packed: bool = False):
    Path(path).write_bytes(serialize_model(model, packed))


def load_model(path) -> ModelSpec:
    return deserialize_model(Path(path).read_bytes())
