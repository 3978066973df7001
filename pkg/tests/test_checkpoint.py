"""Container round-trips, a frozen byte-level golden file, and the error
paths a hand-rolled binary format owes its users."""

import struct

import numpy as np
import pytest

from semcross.checkpoint import dump_tensors, load_tensors, read_tensors, write_tensors
from semcross.errors import FormatError


def test_roundtrip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "backbone.block1.conv.w": rng.normal(size=(64, 3, 3, 3)).astype(np.float32),
        "backbone.block1.bn.gamma": np.ones(64, dtype=np.float32),
        "aux.proj.b": rng.normal(size=300).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    path = tmp_path / "model.sct1"
    write_tensors(path, entries)
    back = read_tensors(path)
    assert set(back) == set(entries)
    for name, arr in entries.items():
        assert back[name].shape == np.asarray(arr).shape
        assert np.array_equal(back[name], np.asarray(arr))


def test_float64_input_is_stored_as_float32(tmp_path):
    path = tmp_path / "t.sct1"
    write_tensors(path, {"x": np.array([1.0, 1 / 3], dtype=np.float64)})
    back = read_tensors(path)
    assert back["x"].dtype == np.float32
    assert back["x"][1] == np.float32(1 / 3)


def test_golden_bytes():
    # one entry, name "ab", shape (2,), values [1.0, -2.0]
    blob = dump_tensors({"ab": np.array([1.0, -2.0], dtype=np.float32)})
    expected = (
        b"SCT1"
        + struct.pack("<I", 2)
        + b"ab"
        + struct.pack("<I", 1)
        + struct.pack("<I", 2)
        + struct.pack("<f", 1.0)
        + struct.pack("<f", -2.0)
    )
    assert blob == expected


def test_writer_is_deterministic_and_sorted():
    a = dump_tensors({"b": np.zeros(1, np.float32), "a": np.ones(1, np.float32)})
    b = dump_tensors({"a": np.ones(1, np.float32), "b": np.zeros(1, np.float32)})
    assert a == b
    assert a.find(b"a", 4) < a.find(b"b", 4)


def test_empty_container():
    assert load_tensors(dump_tensors({})) == {}


def test_zero_rank_entry_roundtrips():
    back = load_tensors(dump_tensors({"s": np.float32(7.0)}))
    assert back["s"].shape == ()
    assert back["s"] == 7.0


def test_bad_magic_rejected():
    with pytest.raises(FormatError, match="magic"):
        load_tensors(b"NOPE" + b"\x00" * 16)


def test_truncated_payload_rejected():
    blob = dump_tensors({"x": np.arange(4, dtype=np.float32)})
    with pytest.raises(FormatError, match="truncated"):
        load_tensors(blob[:-3])


def test_truncated_header_rejected():
    blob = dump_tensors({"long_name_entry": np.zeros(2, np.float32)})
    with pytest.raises(FormatError, match="truncated"):
        load_tensors(blob[:9])


def test_duplicate_names_rejected():
    one = dump_tensors({"x": np.zeros(1, np.float32)})
    doubled = one + one[4:]
    with pytest.raises(FormatError, match="duplicate"):
        load_tensors(doubled)


def test_implausible_name_length_rejected():
    blob = b"SCT1" + struct.pack("<I", 2**31) + b"xx"
    with pytest.raises(FormatError):
        load_tensors(blob)


def test_file_api_matches_bytes_api(tmp_path):
    entries = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    path = tmp_path / "w.sct1"
    write_tensors(path, entries)
    assert path.read_bytes() == dump_tensors(entries)
