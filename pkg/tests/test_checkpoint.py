"""Checkpoint binary format: exact round trips and corruption reporting."""

import struct

import numpy as np
import pytest

from conftest import tiny_model
from convtex import checkpoint as C
from convtex import tensor as T
from convtex.errors import DataError


@pytest.fixture
def saved(tmp_path):
    m = tiny_model(10, seed=4)
    meta = {"arch": "convtex", "epoch": 3, "vocab_sha256": "ab" * 32}
    path = tmp_path / "m.cvmt"
    C.save_checkpoint(path, m.params, meta)
    return m, meta, path


def test_round_trip_bits(saved):
    m, meta, path = saved
    got_meta, arrays = C.load_checkpoint(path)
    assert got_meta["arch"] == "convtex"
    assert got_meta["epoch"] == "3"  # values are strings on disk
    assert set(arrays) == set(m.params)
    for name, p in m.params.items():
        assert arrays[name].dtype == np.float32
        np.testing.assert_array_equal(
            arrays[name], p.value.data.astype(np.float32)
        )


def test_restore_reproduces_forward(saved):
    m, _, path = saved
    img = T.Tensor(np.random.default_rng(0).random((1, 32, 64), dtype=np.float32))
    ids = np.array([1, 5, 6], dtype=np.int64)
    before = m.forward_teacher_forced(img, ids).data.copy()

    wrecked = tiny_model(10, seed=99)
    _, arrays = C.load_checkpoint(path)
    C.restore_parameters(wrecked.params, arrays, path)
    after = wrecked.forward_teacher_forced(img, ids).data
    np.testing.assert_array_equal(before, after)


def test_save_overwrites_atomically(saved):
    m, meta, path = saved
    C.save_checkpoint(path, m.params, {**meta, "epoch": 4})
    got_meta, _ = C.load_checkpoint(path)
    assert got_meta["epoch"] == "4"
    leftovers = [p for p in path.parent.iterdir() if p.suffix == ".tmp"]
    assert leftovers == []


def test_header_magic_checked(tmp_path):
    p = tmp_path / "bad.cvmt"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        C.load_checkpoint(p)


def test_version_checked(saved):
    _, _, path = saved
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 4, 999)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version 999"):
        C.load_checkpoint(path)


@pytest.mark.parametrize("keep", [0, 3, 7, 11, 40, 200])
def test_truncation_reported_with_offset(saved, keep):
    _, _, path = saved
    raw = path.read_bytes()
    assert keep < len(raw)
    path.write_bytes(raw[:keep])
    with pytest.raises(DataError, match="byte"):
        C.load_checkpoint(path)


def test_trailing_bytes_rejected(saved):
    _, _, path = saved
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        C.load_checkpoint(path)


def test_duplicate_name_rejected(tmp_path):
    a = T.Parameter("p", np.zeros((2, 2)))
    b = T.Parameter("p", np.ones((2, 2)))
    path = tmp_path / "dup.cvmt"
    C.save_checkpoint(path, [a, b], {})
    with pytest.raises(DataError, match="duplicate"):
        C.load_checkpoint(path)


def test_absurd_rank_rejected(tmp_path):
    a = T.Parameter("p", np.zeros(3))
    path = tmp_path / "r.cvmt"
    C.save_checkpoint(path, [a], {})
    raw = bytearray(path.read_bytes())
    # rank field sits right after the name bytes of the single record
    idx = raw.find(b"p", 16) + 1
    struct.pack_into("<I", raw, idx, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="rank"):
        C.load_checkpoint(path)


def test_restore_refuses_missing_and_extra(saved, tmp_path):
    m, _, path = saved
    _, arrays = C.load_checkpoint(path)
    short = dict(arrays)
    short.pop("dec.out.b")
    with pytest.raises(DataError, match="dec.out.b"):
        C.restore_parameters(m.params, short, path)
    extra = dict(arrays)
    extra["ghost"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(DataError, match="ghost"):
        C.restore_parameters(m.params, extra, path)


def test_restore_refuses_shape_change(saved):
    m, _, path = saved
    _, arrays = C.load_checkpoint(path)
    arrays["dec.out.b"] = arrays["dec.out.b"][:-1]
    with pytest.raises(DataError, match="shape"):
        C.restore_parameters(m.params, arrays, path)


def test_meta_rejects_newlines():
    a = T.Parameter("p", np.zeros(1))
    with pytest.raises(ValueError):
        C._pack_meta({"k": "a\nb"})
    with pytest.raises(ValueError):
        C._pack_meta({"k=v": "x"})
