"""Checkpoint and dataset containers."""
import os
import stat
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from adaptdiff.numerics import Rng
from adaptdiff.storage import (
    CheckpointError,
    atomic_write,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from adaptdiff.toyworld import gen_world


def sample_arrays():
    g = Rng(0).stream("ckpt")
    return {"score.w": g.normal(size=(3, 4)), "score.b": g.normal(size=4), "meta.x": np.array(2.5),
            "empty": np.zeros((0, 3))}


def test_round_trip_is_bitwise(tmp_path):
    arrays = sample_arrays()
    save_checkpoint(tmp_path / "a.ckpt", arrays)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert list(back) == list(arrays)
    for k, a in arrays.items():
        assert back[k].shape == a.shape and back[k].tobytes() == a.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
                       max_size=5))
def test_round_trip_property(arrays_):
    back = decode_checkpoint(encode_checkpoint(arrays_))
    assert list(back) == list(arrays_)
    for k, a in arrays_.items():
        assert back[k].tobytes() == a.tobytes()


def test_empty_set():
    assert decode_checkpoint(encode_checkpoint({})) == {}


def test_re_encoding_is_identical():
    buf = encode_checkpoint(sample_arrays())
    assert encode_checkpoint(decode_checkpoint(buf)) == buf


@pytest.mark.parametrize("pos", [0, 7, 20, -9, -1])
def test_flipped_byte_detected(pos):
    buf = bytearray(encode_checkpoint(sample_arrays()))
    buf[pos] ^= 0x40
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(buf))


@pytest.mark.parametrize("cut", [0, 5, 30, 1])
def test_truncation_detected(cut):
    buf = encode_checkpoint(sample_arrays())
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[: len(buf) - cut - 1] if cut else buf[:3])


def test_bad_version():
    buf = encode_checkpoint({"a": np.ones(2)})
    body = buf[:5] + struct.pack("<I", 99) + buf[9:-4]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_duplicate_names_rejected():
    one = encode_checkpoint({"a": np.ones(2)})
    record = one[13:-4]
    body = one[:5] + struct.pack("<II", 1, 2) + record + record
    with pytest.raises(CheckpointError, match="duplicate"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_non_numeric_rejected():
    with pytest.raises(TypeError):
        encode_checkpoint({"a": np.array(["x"])})


def test_atomic_write_leaves_no_temp_and_normal_mode(tmp_path):
    p = tmp_path / "out.txt"
    atomic_write(p, "hello")
    atomic_write(p, b"bye")
    assert p.read_bytes() == b"bye"
    assert os.listdir(tmp_path) == ["out.txt"]
    umask = os.umask(0)
    os.umask(umask)
    assert stat.S_IMODE(p.stat().st_mode) == 0o666 & ~umask


def test_dataset_round_trip(tmp_path):
    w = gen_world(0)
    utts = w.corpus([0, 3], 2, Rng(0).stream("ds"))
    table = {0: w.embedding(0), 3: w.embedding(3)}
    save_dataset(tmp_path / "d.gtd", utts, w.C, w.K, table)
    back, header = load_dataset(tmp_path / "d.gtd")
    assert header["channels"] == w.C and header["num_classes"] == w.K
    assert set(header["speakers"]) == {0, 3}
    np.testing.assert_array_equal(header["speakers"][3], table[3])
    for a, b in zip(utts, back):
        assert a.frames.tobytes() == b.frames.tobytes()
        np.testing.assert_array_equal(a.phonemes, b.phonemes)
        np.testing.assert_array_equal(a.spans, b.spans)
        assert a.speaker == b.speaker


def test_dataset_corruption(tmp_path):
    w = gen_world(0)
    save_dataset(tmp_path / "d.gtd", w.corpus([1], 1, Rng(0).stream("ds")), w.C, w.K, {1: w.embedding(1)})
    buf = bytearray((tmp_path / "d.gtd").read_bytes())
    buf[40] ^= 1
    (tmp_path / "d.gtd").write_bytes(bytes(buf))
    with pytest.raises(CheckpointError):
        load_dataset(tmp_path / "d.gtd")


def test_dataset_rejects_checkpoint_file(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"a": np.ones(1)})
    with pytest.raises(CheckpointError, match="magic"):
        load_dataset(tmp_path / "a.ckpt")
