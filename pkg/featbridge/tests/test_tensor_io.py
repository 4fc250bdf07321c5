"""Tensor byte layout against hand-packed oracles, plus atomic writes."""

import json
import struct

import numpy as np
import pytest

from featbridge.tensor_io import (TensorIOError, atomic_write_json,
                                  parse_tensor, read_tensor,
                                  read_tensor_header, tensor_bytes,
                                  write_tensor)

MAGIC = b"UVADTNSR"


def _header(dtype_code, dims):
    return (MAGIC + struct.pack("<III", 1, dtype_code, len(dims))
            + struct.pack(f"<{len(dims)}Q", *dims))


def test_float32_bytes_match_hand_packed_layout():
    arr = np.array([[1.5, -2.0], [0.25, 4.0]], dtype=np.float32)
    expected = _header(0, (2, 2)) + struct.pack("<4f", 1.5, -2.0, 0.25, 4.0)
    assert tensor_bytes(arr) == expected


def test_uint8_bytes_match_hand_packed_layout():
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    expected = _header(1, (2, 3, 4)) + bytes(range(24))
    assert tensor_bytes(arr) == expected


@pytest.mark.parametrize("arr", [
    np.array([1.0, 2.5], dtype=np.float32),
    np.arange(6, dtype=np.uint8).reshape(2, 3),
    np.linspace(-1, 1, 24, dtype=np.float32).reshape(2, 3, 4),
    np.arange(16, dtype=np.uint8).reshape(2, 2, 2, 2),
])
def test_round_trip(arr):
    out = parse_tensor(tensor_bytes(arr))
    assert out.dtype == arr.dtype
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


def test_non_contiguous_input_serializes_row_major():
    base = np.arange(12, dtype=np.float32).reshape(3, 4)
    view = base.T
    assert np.array_equal(parse_tensor(tensor_bytes(view)), np.ascontiguousarray(view))


@pytest.mark.parametrize("bad", [
    np.zeros((2, 2), dtype=np.float64),
    np.zeros((2, 2), dtype=np.int32),
    np.zeros((2, 2, 2, 2, 2), dtype=np.float32),
    np.zeros((0, 3), dtype=np.float32),
])
def test_unrepresentable_arrays_rejected(bad):
    with pytest.raises(TensorIOError):
        tensor_bytes(bad)


def test_bad_magic_rejected():
    data = bytearray(tensor_bytes(np.zeros(3, dtype=np.float32)))
    data[0] ^= 0xFF
    with pytest.raises(TensorIOError, match="magic"):
        parse_tensor(bytes(data))


def test_bad_version_rejected():
    data = _header(0, (3,)).replace(struct.pack("<I", 1), struct.pack("<I", 9), 1)
    with pytest.raises(TensorIOError, match="version"):
        parse_tensor(data + b"\x00" * 12)


def test_unknown_dtype_code_rejected():
    data = MAGIC + struct.pack("<III", 1, 7, 1) + struct.pack("<Q", 3)
    with pytest.raises(TensorIOError, match="dtype"):
        parse_tensor(data + b"\x00" * 12)


def test_zero_dim_rejected():
    data = MAGIC + struct.pack("<III", 1, 0, 2) + struct.pack("<QQ", 0, 3)
    with pytest.raises(TensorIOError, match="dims"):
        parse_tensor(data)


@pytest.mark.parametrize("cut", [4, 19, 21])
def test_truncated_bytes_rejected(cut):
    data = tensor_bytes(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(TensorIOError, match="truncated|payload"):
        parse_tensor(data[:cut])


def test_trailing_bytes_rejected():
    data = tensor_bytes(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(TensorIOError, match="payload"):
        parse_tensor(data + b"\x00")


def test_write_read_file_and_header(tmp_path):
    arr = np.arange(30, dtype=np.float32).reshape(5, 6) / 7.0
    path = tmp_path / "a" / "b.tnsr"
    write_tensor(arr, path)
    assert np.array_equal(read_tensor(path), arr)
    assert read_tensor_header(path) == ("float32", (5, 6))


def test_write_is_atomic_and_overwrites(tmp_path):
    path = tmp_path / "t.tnsr"
    write_tensor(np.zeros(4, dtype=np.uint8), path)
    write_tensor(np.ones(4, dtype=np.uint8), path)
    assert np.array_equal(read_tensor(path), np.ones(4, dtype=np.uint8))
    leftovers = [p for p in tmp_path.iterdir() if p.name != "t.tnsr"]
    assert leftovers == []


def test_atomic_json_sorted_with_newline(tmp_path):
    path = tmp_path / "m.json"
    atomic_write_json({"b": 1, "a": [2, 3]}, path)
    text = path.read_text()
    assert text.endswith("\n")
    assert json.loads(text) == {"a": [2, 3], "b": 1}
    assert text.index('"a"') < text.index('"b"')
