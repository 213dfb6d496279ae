import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ember.errors import BadMagicError, ChecksumError, ModelFormatError, TruncatedModelError, VersionMismatchError
from ember.experiments import patterned_random_model
from ember.model import InferenceMode, LayerKind, param_count
from ember.modelfile import deserialize_model, load_model, save_model, serialize_model


def _same_model(a, b, packed=False):
    assert a.name == b.name and a.input_shape == b.input_shape and a.input_scale == b.input_scale
    for la, lb in zip(a.layers, b.layers, strict=True):
        assert (la.kind, la.dims, la.id, la.out_scale, la.patterned, la.name) == \
               (lb.kind, lb.dims, lb.id, lb.out_scale, lb.patterned, lb.name)
        if la.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            wa = la.weights.array()
            if packed and la.mask is not None:
                wa = np.where(la.mask, wa, 0)
            assert np.array_equal(wa, lb.weights.array()) and la.weight_scale == lb.weight_scale
            assert np.array_equal(la.bias_values(), lb.bias_values())
        if la.mask is None:
            assert lb.mask is None
        else:
            assert np.array_equal(la.mask, lb.mask)


@pytest.fixture(scope="module")
def mnist():
    return patterned_random_model("table1-mnist", 0)


def test_mnist_round_trip_is_byte_identical(mnist, tmp_path):
    blob = serialize_model(mnist)
    back = deserialize_model(blob)
    _same_model(mnist, back)
    assert serialize_model(back) == blob
    save_model(mnist, tmp_path / "m.ehnn")
    _same_model(mnist, load_model(tmp_path / "m.ehnn"))


def _expected_size(model, packed):
    """Byte count from the documented layout, computed field by field."""
    size = 4 + 2 + 2 + 2 + len(model.name) + 1 + 2 * len(model.input_shape) + 1
    for l in model.layers:
        size += 1 + 2 * len(l.dims) + 3 + 1 + len(l.name)
        if l.pattern_target is not None:
            size += 4
        if l.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            n = l.weight_count
            if l.mask is not None:
                size += math.ceil(n / 8)
                n = int(l.mask.sum()) if packed else n
            size += 2 * n + 4 * l.dims[0]
    return size + 4


def test_packed_low_energy_file_size(mnist):
    packed = serialize_model(mnist, packed=True)
    assert len(packed) == _expected_size(mnist, True)
    full = serialize_model(mnist)
    assert len(full) == _expected_size(mnist, False)
    # the two files differ by exactly the dropped weights
    dropped = param_count(mnist, InferenceMode.FULL) - param_count(mnist, InferenceMode.LOW_ENERGY)
    assert len(full) - len(packed) == 2 * dropped
    back = deserialize_model(packed)
    _same_model(mnist, back, packed=True)
    assert param_count(back, InferenceMode.LOW_ENERGY) == param_count(mnist, InferenceMode.LOW_ENERGY)


def test_every_truncation_is_rejected():
    blob = serialize_model(patterned_random_model("toy-tiny", 0))
    for n in range(len(blob)):
        with pytest.raises(ModelFormatError) as err:
            deserialize_model(blob[:n])
        if n >= 4:
            assert isinstance(err.value, TruncatedModelError), n


def test_bad_magic_and_version():
    blob = bytearray(serialize_model(patterned_random_model("toy-tiny", 0)))
    with pytest.raises(BadMagicError):
        deserialize_model(b"XHNN" + bytes(blob[4:]))
    blob[4:6] = struct.pack("<H", 9)
    with pytest.raises(VersionMismatchError):
        deserialize_model(bytes(blob))


def test_flipped_payload_bit_fails_checksum():
    blob = bytearray(serialize_model(patterned_random_model("toy-tiny", 0)))
    blob[-10] ^= 0x01
    with pytest.raises(ChecksumError):
        deserialize_model(bytes(blob))


def test_trailing_bytes_with_valid_checksum_rejected():
    blob = serialize_model(patterned_random_model("toy-tiny", 0))
    body = blob[:-4] + b"\x00\x00"
    forged = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(ModelFormatError):
        deserialize_model(forged)


@settings(max_examples=25)
@given(st.sampled_from(["toy-tiny", "toy-2mac", "reduced-mnist"]), st.integers(0, 10_000), st.booleans())
def test_random_models_round_trip(arch, seed, packed):
    m = patterned_random_model(arch, seed)
    _same_model(m, deserialize_model(serialize_model(m, packed)), packed)
