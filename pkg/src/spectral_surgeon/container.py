"""Minimal tensor-container reader/writer (safetensors wire format).

Layout: 8-byte little-endian header length, UTF-8 JSON header, raw data
buffer. The header maps tensor names to {"dtype", "shape", "data_offsets"}
and may carry a "__metadata__" map of string key/value pairs. We write keys
sorted and pad the header to an 8-byte boundary, matching the de facto
adapter interchange format so files are readable by standard tooling.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    "F16": np.dtype("<f2"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """Malformed container file or refused tensor payload."""


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ContainerError(f"tensor '{name}' contains NaN or Inf")


def write_tensors(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write `tensors` (float16/32/64 arrays) with keys in sorted order.

    Refuses non-finite values. Arrays are stored little-endian C-contiguous.
    """
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}

    payloads: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_NAMES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        _require_finite(name, arr)
        data = arr.astype(dtype, copy=False).tobytes()
        header[name] = {
            "dtype": _DTYPE_NAMES[dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        payloads.append(data)
        offset += len(data)

    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)


def read_tensors(
    path: str | Path,
) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container; returns (name -> array in stored dtype, metadata).

    Rejects malformed headers and non-finite tensor values.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerError(f"{path}: file too short for header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len == 0 or 8 + header_len > len(raw):
        raise ContainerError(f"{path}: malformed header length {header_len}")
    try:
        header = json.loads(raw[8 : 8 + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise ContainerError(f"{path}: __metadata__ must be an object")

    data = raw[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            begin, end = entry["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"{path}: bad entry for tensor '{name}': {exc}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if end - begin != nbytes or end > len(data) or begin < 0:
            raise ContainerError(f"{path}: offsets for '{name}' inconsistent with shape")
        arr = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape)
        _require_finite(name, arr)
        tensors[name] = arr
    return tensors, {str(k): str(v) for k, v in metadata.items()}
