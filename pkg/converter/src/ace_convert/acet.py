"""Minimal reader/writer for the ACET v1 container format.

Implemented against the published byte layout so this tool stays
independent of the merging toolkit's internals: magic ``ACET``, u32
version 1, u64 header length, UTF-8 JSON index (keys in lexicographic
order, optional ``__metadata__`` string map), then 8-aligned row-major
little-endian tensor data starting at the first multiple of 8 at or
after the header end.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ACET"
VERSION = 1
METADATA_KEY = "__metadata__"

_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class AcetError(ValueError):
    """Malformed container file or un-encodable tensor."""


def _align8(n: int) -> int:
    return (n + 7) & ~7


def write_acet(tensors: dict[str, np.ndarray], path, metadata: dict[str, str] | None = None) -> int:
    """Write arrays as an ACET v1 file; returns total bytes written."""
    index: dict[str, object] = {}
    blobs: list[tuple[int, bytes]] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name]) if tensors[name].ndim else tensors[name]
        if arr.dtype not in _DTYPE_TO_TAG:
            raise AcetError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        data = arr.tobytes()
        index[name] = {
            "dtype": _DTYPE_TO_TAG[arr.dtype],
            "shape": [int(e) for e in arr.shape],
            "offset": offset,
            "nbytes": len(data),
        }
        blobs.append((offset, data))
        offset = _align8(offset + len(data))
    if metadata:
        index[METADATA_KEY] = dict(sorted(metadata.items()))
    header = json.dumps(index, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    data_start = _align8(16 + len(header))
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(MAGIC)
        written += fh.write(struct.pack("<I", VERSION))
        written += fh.write(struct.pack("<Q", len(header)))
        written += fh.write(header)
        if blobs:
            written += fh.write(b"\x00" * (data_start - 16 - len(header)))
            pos = 0
            for tensor_offset, data in blobs:
                written += fh.write(b"\x00" * (tensor_offset - pos))
                written += fh.write(data)
                pos = tensor_offset + len(data)
    return written


def read_acet(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read an ACET v1 file; returns (tensors, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise AcetError("bad magic")
    if len(raw) < 16:
        raise AcetError("truncated file")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise AcetError(f"unsupported version {version}")
    header_len = struct.unpack_from("<Q", raw, 8)[0]
    if 16 + header_len > len(raw):
        raise AcetError("truncated header")
    index = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    metadata = index.pop(METADATA_KEY, {})
    data = raw[_align8(16 + header_len) :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in index.items():
        dtype = _TAG_TO_DTYPE.get(entry.get("dtype"))
        if dtype is None:
            raise AcetError(f"unknown dtype for tensor {name!r}")
        shape = entry["shape"]
        count = 1
        for extent in shape:
            count *= extent
        if entry["nbytes"] != count * dtype.itemsize:
            raise AcetError(f"index size mismatch for tensor {name!r}")
        if entry["offset"] + entry["nbytes"] > len(data):
            raise AcetError(f"truncated data for tensor {name!r}")
        values = np.frombuffer(data, dtype=dtype, count=count, offset=entry["offset"])
        tensors[name] = values.reshape(shape).copy()
    return tensors, metadata
