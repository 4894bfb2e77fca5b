"""Flat tensor container ("ACET v1") with bit-exact round trips.

File layout, little-endian throughout:

    bytes 0..3    magic ``ACET``
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..15   header length H, u64
    bytes 16..    UTF-8 JSON index: name -> {dtype, shape, offset, nbytes},
                  plus an optional ``__metadata__`` string map
    data          starts at the first multiple of 8 at or after 16 + H;
                  offsets in the index are relative to this point

Values are IEEE-754 little-endian, row-major.  Index keys are serialized in
lexicographic order and tensors are laid out in that same order, so writing
the same checkpoint twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ACET"
VERSION = 1
METADATA_KEY = "__metadata__"
MAX_RANK = 4

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ContainerFormatError(ValueError):
    """A container file or checkpoint violates the ACET v1 format."""


def _align8(n: int) -> int:
    return (n + 7) & ~7


class Checkpoint:
    """Named map of tensors plus free-form string metadata.

    Tensors are float32/float64 numpy arrays of rank 0..4.  Iteration is
    always in lexicographic name order; that ordering is the determinism
    contract behind byte-identical container writes.  Instances are not
    mutated by any library operation after construction and are safe to
    share across threads.
    """

    def __init__(self, tensors=None, metadata=None):
        self._tensors: dict[str, np.ndarray] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        if tensors:
            for name, values in tensors.items():
                self.add(name, values)

    def add(self, name: str, values) -> None:
        if not isinstance(name, str) or not name:
            raise ContainerFormatError("tensor names must be non-empty strings")
        if name == METADATA_KEY:
            raise ContainerFormatError(f"tensor name {METADATA_KEY!r} is reserved")
        if name in self._tensors:
            raise ContainerFormatError(f"duplicate tensor name {name!r}")
        arr = np.asarray(values)
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ContainerFormatError(
                f"unsupported dtype {arr.dtype} for tensor {name!r}; use float32 or float64"
            )
        if arr.ndim > MAX_RANK:
            raise ContainerFormatError(f"tensor {name!r} has rank {arr.ndim}, maximum is {MAX_RANK}")
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote rank-0 tensors to rank 1, but
            # 0-d arrays are always contiguous and never reach it.
            arr = np.ascontiguousarray(arr)
        self._tensors[name] = arr

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False
        for name, arr in self.items():
            their = other[name]
            if arr.dtype != their.dtype or arr.shape != their.shape:
                return False
            if arr.tobytes() != their.tobytes():  # bitwise, NaN-safe
                return False
        return True

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {len(self.metadata)} metadata keys)"


def write_container(ckpt: Checkpoint, path) -> None:
    """Serialize a checkpoint to ``path`` in ACET v1 layout.

    Deterministic: the same checkpoint always produces byte-identical
    files.  Tensor data offsets are 8-aligned with zero padding.
    """
    index: dict[str, object] = {}
    blobs: list[tuple[int, np.ndarray]] = []
    offset = 0
    for name, arr in ckpt.items():
        nbytes = arr.nbytes
        if offset + nbytes >= 2**63:
            raise ContainerFormatError(f"tensor {name!r} does not fit 64-bit offsets")
        index[name] = {
            "dtype": _DTYPE_TO_TAG[arr.dtype],
            "shape": [int(e) for e in arr.shape],
            "offset": offset,
            "nbytes": nbytes,
        }
        blobs.append((offset, arr))
        offset = _align8(offset + nbytes)
    if ckpt.metadata:
        for key, value in ckpt.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ContainerFormatError("metadata must map strings to strings")
        index[METADATA_KEY] = dict(sorted(ckpt.metadata.items()))

    header = json.dumps(index, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    header_bytes = header.encode("utf-8")
    data_start = _align8(16 + len(header_bytes))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        if blobs:
            fh.write(b"\x00" * (data_start - 16 - len(header_bytes)))
            pos = 0
            for tensor_offset, arr in blobs:
                fh.write(b"\x00" * (tensor_offset - pos))
                data = arr.tobytes()
                fh.write(data)
                pos = tensor_offset + len(data)


def read_container(path) -> Checkpoint:
    """Read an ACET v1 file back into a checkpoint.

    Raises ContainerFormatError with a distinct diagnostic for each way a
    file can be malformed: bad magic, unsupported version, truncated data,
    overlapping or misaligned offsets, unknown dtype, index size mismatch.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ContainerFormatError("bad magic")
    if len(raw) < 16:
        raise ContainerFormatError("truncated data: file shorter than fixed header")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise ContainerFormatError(f"unsupported version {version}")
    header_len = struct.unpack_from("<Q", raw, 8)[0]
    if 16 + header_len > len(raw):
        raise ContainerFormatError("truncated data: header extends past end of file")
    try:
        index = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"invalid header JSON: {exc}") from exc
    if not isinstance(index, dict):
        raise ContainerFormatError("invalid header JSON: index is not an object")

    metadata = index.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerFormatError("invalid metadata: must map strings to strings")

    data_start = _align8(16 + header_len)
    data = raw[data_start:]

    entries = []
    for name, entry in index.items():
        if not isinstance(entry, dict):
            raise ContainerFormatError(f"invalid index entry for {name!r}")
        try:
            tag = entry["dtype"]
            shape = entry["shape"]
            offset = entry["offset"]
            nbytes = entry["nbytes"]
        except (KeyError, TypeError) as exc:
            raise ContainerFormatError(f"invalid index entry for {name!r}: {exc}") from exc
        if tag not in _TAG_TO_DTYPE:
            raise ContainerFormatError(f"unknown dtype {tag!r} for tensor {name!r}")
        dtype = _TAG_TO_DTYPE[tag]
        if (
            not isinstance(shape, list)
            or len(shape) > MAX_RANK
            or not all(isinstance(e, int) and e >= 0 for e in shape)
        ):
            raise ContainerFormatError(f"invalid shape for tensor {name!r}")
        count = 1
        for extent in shape:
            count *= extent
        if not isinstance(offset, int) or not isinstance(nbytes, int) or offset < 0 or nbytes < 0:
            raise ContainerFormatError(f"invalid offsets for tensor {name!r}")
        if nbytes != count * dtype.itemsize:
            raise ContainerFormatError(f"index size mismatch for tensor {name!r}")
        if offset % 8 != 0:
            raise ContainerFormatError(f"misaligned offset for tensor {name!r}")
        if offset + nbytes > len(data):
            raise ContainerFormatError(f"truncated data: tensor {name!r} extends past end of file")
        entries.append((offset, nbytes, name, dtype, shape, count))

    entries.sort()
    for (off_a, nb_a, name_a, *_), (off_b, _, name_b, *_) in zip(entries, entries[1:]):
        if off_a + nb_a > off_b:
            raise ContainerFormatError(f"overlapping offsets: {name_a!r} and {name_b!r}")

    ckpt = Checkpoint(metadata=metadata)
    for offset, _, name, dtype, shape, count in entries:
        values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        ckpt.add(name, values.reshape(shape).copy())
    return ckpt


def shape_diff(a: Checkpoint, b: Checkpoint) -> list[tuple[str, str]]:
    """Compare tensor inventories of two checkpoints.

    Returns ``(kind, name)`` pairs sorted by name, with kind one of
    ``missing-in-a``, ``missing-in-b``, ``shape-mismatch``,
    ``dtype-mismatch``; empty iff the checkpoints share names, shapes and
    dtypes.  Used as the architecture precondition before merging.
    """
    diffs: list[tuple[str, str]] = []
    for name in sorted(set(a.names()) | set(b.names())):
        if name not in b:
            diffs.append(("missing-in-b", name))
        elif name not in a:
            diffs.append(("missing-in-a", name))
        elif a[name].shape != b[name].shape:
            diffs.append(("shape-mismatch", name))
        elif a[name].dtype != b[name].dtype:
            diffs.append(("dtype-mismatch", name))
    return diffs
