import json
import struct

import numpy as np
import pytest

from spectral_surgeon.container import ContainerError, read_tensors, write_tensors


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "b.f32": rng.standard_normal((5, 3)).astype(np.float32),
        "a.f16": rng.standard_normal((2, 7)).astype(np.float16),
        "c.f64": rng.standard_normal(4),
    }
    path = tmp_path / "t.safetensors"
    write_tensors(path, tensors, {"note": "x"})
    loaded, meta = read_tensors(path)
    assert meta == {"note": "x"}
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].tobytes() == arr.tobytes()


def test_keys_sorted_in_header(tmp_path, rng):
    path = tmp_path / "t.safetensors"
    write_tensors(path, {"zz": np.zeros(1, np.float32), "aa": np.ones(1, np.float32)})
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n])
    assert list(header) == ["aa", "zz"]


def test_malformed_header_length(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 10**9) + b"{}")
    with pytest.raises(ContainerError, match="header length"):
        read_tensors(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "bad.safetensors"
    blob = b"this is not json"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(ContainerError, match="JSON"):
        read_tensors(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(b"\x01")
    with pytest.raises(ContainerError, match="too short"):
        read_tensors(path)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_nonfinite_rejected_on_write(tmp_path, bad):
    arr = np.array([1.0, bad], dtype=np.float32)
    with pytest.raises(ContainerError, match="NaN or Inf"):
        write_tensors(tmp_path / "t.safetensors", {"x": arr})


def test_nonfinite_rejected_on_read(tmp_path):
    # hand-build a file containing a NaN payload
    arr = np.array([np.nan], dtype=np.float32)
    header = {"x": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}
    blob = json.dumps(header).encode()
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + arr.tobytes())
    with pytest.raises(ContainerError, match="NaN or Inf"):
        read_tensors(path)


def test_offsets_inconsistent_with_shape(tmp_path):
    header = {"x": {"dtype": "F32", "shape": [3], "data_offsets": [0, 4]}}
    blob = json.dumps(header).encode()
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"\x00" * 4)
    with pytest.raises(ContainerError, match="offsets"):
        read_tensors(path)


def test_interop_with_safetensors_library(tmp_path, rng):
    # our writer/reader must match the reference implementation byte-for-byte
    st = pytest.importorskip("safetensors.numpy")
    ours = tmp_path / "ours.safetensors"
    tensors = {
        "m.lora_A.weight": rng.standard_normal((4, 6)).astype(np.float32),
        "m.lora_B.weight": rng.standard_normal((8, 4)).astype(np.float16),
    }
    write_tensors(ours, tensors, {"k": "v"})
    theirs = st.load_file(ours)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(theirs[name], arr)

    ref = tmp_path / "ref.safetensors"
    st.save_file(tensors, str(ref), metadata={"k": "v"})
    loaded, meta = read_tensors(ref)
    assert meta == {"k": "v"}
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)
