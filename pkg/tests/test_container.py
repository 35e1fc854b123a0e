import struct

import numpy as np
import pytest

from trifuse.container import (
    ContainerError,
    load_tensor,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)
from trifuse.tensor import Tensor


def test_golden_bytes_layout():
    t = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    blob = tensor_to_bytes(t)
    expected = (
        b"TENS"
        + bytes([1, 2, 0, 0])
        + struct.pack("<2I", 2, 2)
        + struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)
    )
    assert blob == expected


@pytest.mark.parametrize("rank", [1, 2, 3, 4])
def test_round_trip_bitwise_per_rank(rank, tmp_path):
    rng = np.random.default_rng(rank)
    for i in range(25):
        shape = tuple(int(rng.integers(1, 6)) for _ in range(rank))
        arr = rng.standard_normal(shape).astype(np.float32)
        if i % 5 == 0:  # NaN / Inf payloads must survive bit-for-bit
            arr.flat[0] = np.nan
            arr.flat[-1] = np.inf
        t = Tensor(arr)
        path = tmp_path / f"t{rank}_{i}.ten"
        save_tensor(path, t)
        back = load_tensor(path)
        assert back.shape == t.shape
        assert np.array_equal(
            back.data.view(np.uint32), t.data.view(np.uint32)
        ), "round trip must be bitwise"


def test_feature_map_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    t = Tensor(rng.standard_normal((3, 4, 5)).astype(np.float32))
    save_tensor(tmp_path / "f.ten", t)
    assert np.array_equal(load_tensor(tmp_path / "f.ten").data, t.data)


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda b: b[:6], "truncated header"),
        (lambda b: b"XENS" + b[4:], "bad magic"),
        (lambda b: b[:4] + bytes([9]) + b[5:], "unsupported version"),
        (lambda b: b[:5] + bytes([0]) + b[6:], "rank must be 1..4"),
        (lambda b: b[:5] + bytes([5]) + b[6:], "rank must be 1..4"),
        (lambda b: b[:6] + bytes([7]) + b[7:], "reserved"),
        (lambda b: b[:10], "truncated extents"),
        (lambda b: b[:-4], "payload size mismatch"),
        (lambda b: b + b"\x00\x00\x00\x00", "payload size mismatch"),
    ],
)
def test_malformed_container(mutate, message):
    blob = tensor_to_bytes(Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))
    with pytest.raises(ContainerError, match=message):
        tensor_from_bytes(mutate(blob), source="test.ten")


def test_zero_extent_rejected():
    blob = b"TENS" + bytes([1, 2, 0, 0]) + struct.pack("<2I", 2, 0)
    with pytest.raises(ContainerError, match="extents must be >= 1"):
        tensor_from_bytes(blob)


def test_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.ten"
    with pytest.raises(ContainerError, match="nope.ten"):
        load_tensor(missing)
