import hashlib
import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glann.checkpoint import (FORMAT_VERSION, MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint,
                              load_extractor, save_checkpoint, save_extractor)
from glann.errors import ChecksumError, CheckpointError, MissingTensorError, VersionError
from glann.glo import build_generator, init_latent_table
from glann.imle import build_mapper
from glann.losses import RandomConvExtractor
from glann.pipeline import load_glo, load_mapper, load_noise_generator, save_glo, save_mapper, save_noise_generator


def _sample():
    return {"a/w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64),
            "c": np.array([True, False])}


def test_layout_by_hand():
    raw = encode_checkpoint({"x": np.array([1.5, -2.0], dtype=np.float32)}, {"k": 1}, epoch=3)
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    assert version == FORMAT_VERSION
    header = json.loads(raw[20:20 + hlen])
    assert header["epoch"] == 3 and header["config"] == {"k": 1}
    assert header["tensors"] == [{"name": "x", "dtype": "float32", "shape": [2], "offset": 0, "nbytes": 8}]
    assert raw[20 + hlen:20 + hlen + 8] == struct.pack("<2f", 1.5, -2.0)
    assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()


def test_round_trip(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _sample(), {"seed": 4}, epoch=7, meta={"stage": "x"})
    c = load_checkpoint(path)
    for k, v in _sample().items():
        np.testing.assert_array_equal(c.tensor(k), v)
        assert c.tensor(k).dtype == v.dtype
    assert (c.config, c.epoch, c.meta) == ({"seed": 4}, 7, {"stage": "x"})
    assert not (tmp_path / "c.ckpt.tmp").exists()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
                  hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)))
def test_round_trip_any_array(arr):
    back = decode_checkpoint(encode_checkpoint({"t": arr})).tensor("t")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_encoding_is_deterministic():
    assert encode_checkpoint(_sample(), {"b": 1, "a": 2}) == encode_checkpoint(dict(reversed(_sample().items())),
                                                                              {"a": 2, "b": 1})


@pytest.mark.parametrize("where", ["header", "payload", "checksum"])
def test_corrupt_byte_is_checksum_error(tmp_path, where):
    raw = bytearray(encode_checkpoint(_sample()))
    hlen = struct.unpack_from("<IQ", raw, 8)[1]
    pos = {"header": 25, "payload": 20 + hlen + 3, "checksum": len(raw) - 1}[where]
    raw[pos] ^= 0x01
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_version_mismatch_names_both_versions():
    raw = encode_checkpoint(_sample(), version=FORMAT_VERSION + 1)
    with pytest.raises(VersionError) as info:
        decode_checkpoint(raw)
    assert info.value.file_version == 2 and info.value.reader_version == 1
    assert "2" in str(info.value) and "1" in str(info.value)


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"PK\x03\x04" + bytes(100))


def test_missing_tensor():
    c = decode_checkpoint(encode_checkpoint(_sample()))
    with pytest.raises(MissingTensorError, match="zzz"):
        c.tensor("zzz")
    with pytest.raises(MissingTensorError):
        c.state_dict("generator")


def test_glo_round_trip(tmp_path):
    gen = build_generator("infogan-small", 4, (1, 8, 8), seed=0)
    gen(torch.randn(5, 4))  # non-default BatchNorm running stats
    table = init_latent_table(6, 4, 1)
    table.updates += 3
    path = save_glo(tmp_path / "g.ckpt", gen, table, epoch=2)
    gen2, table2, c = load_glo(path)
    assert torch.equal(table2.codes, table.codes) and torch.equal(table2.updates, table.updates)
    for (k, a), b in zip(gen.state_dict().items(), gen2.state_dict().values()):
        assert torch.equal(a, b), k
    z = table.codes[:3]
    gen.eval(), gen2.eval()
    assert torch.equal(gen(z), gen2(z)) and c.epoch == 2


def test_mapper_and_noise_generator_round_trip(tmp_path):
    m = build_mapper(3, 4, seed=0)
    m(torch.randn(8, 3))
    m2 = load_mapper(save_mapper(tmp_path / "m.ckpt", m))
    e = torch.randn(5, 3)
    m.eval(), m2.eval()
    assert torch.equal(m(e), m2(e))
    g = build_generator("mlp", 3, (1, 4, 4), seed=1, hidden=7)
    g2 = load_noise_generator(save_noise_generator(tmp_path / "p.ckpt", g))
    assert torch.equal(g(e), g2(e))


def test_extractor_round_trip(tmp_path):
    fx = RandomConvExtractor(3, (4, 6), seed=2, layer_weights=[1.0, 0.5])
    fx2 = load_extractor(save_extractor(tmp_path / "x.ckpt", fx))
    x = torch.randn(2, 3, 8, 8)
    assert all(torch.equal(a, b) for a, b in zip(fx(x), fx2(x)))
