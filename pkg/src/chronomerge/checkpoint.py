"""Named-tensor checkpoints, task-vector algebra, and the on-disk format.

A checkpoint is an ordered map from tensor names to float32 arrays plus a
small string metadata dict. Tensors are immutable after construction and
iterate in lexicographic name order, so equal checkpoints serialize to
identical bytes.

File format (little-endian), extension ``.cmrg``::

    magic b"CMRG" | u32 version=1 | u32 header_len | header JSON | blobs | u32 crc32

The header is compact UTF-8 JSON ``{"tensors": {name: {"shape", "dtype",
"offset", "nbytes"}}, "meta": {...}}``; offsets are relative to the start
of the blob section. The trailing CRC32 covers every preceding byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import EmptyBuffer, FormatError, KeyMismatch, ShapeMismatch

MAGIC = b"CMRG"
FORMAT_VERSION = 1
DTYPE = np.float32


class _TensorMap:
    """Shared storage/validation for checkpoint-like keyed tensor maps."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors):
        items = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            arr = np.array(tensors[name], dtype=DTYPE, order="C")
            if arr.size == 0:
                raise ValueError(f"tensor {name!r} has zero elements")
            arr.flags.writeable = False
            items[name] = arr
        if not items:
            raise ValueError("a checkpoint needs at least one tensor")
        self._tensors = items

    def names(self) -> list[str]:
        return list(self._tensors)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._tensors[name].shape

    def tensor(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)


class Checkpoint(_TensorMap):
    """Model weights as named float32 tensors plus string metadata."""

    __slots__ = ("meta",)

    def __init__(self, tensors, meta=None):
        super().__init__(tensors)
        self.meta = {str(k): str(v) for k, v in (meta or {}).items()}

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {self.num_params()} params)"


class TaskVector(_TensorMap):
    """Element-wise difference of two structurally identical checkpoints."""

    __slots__ = ("base_id",)

    def __init__(self, deltas, base_id: str = ""):
        super().__init__(deltas)
        self.base_id = base_id

    def __repr__(self) -> str:
        return f"TaskVector({len(self)} tensors, base_id={self.base_id!r})"


def structural_check(a, b) -> None:
    """Raise KeyMismatch/ShapeMismatch unless a and b share names and shapes.

    Works on anything exposing names()/shape(), i.e. checkpoints, task
    vectors, and file readers alike.
    """
    names_a, names_b = a.names(), b.names()
    if names_a != names_b:
        only_a = sorted(set(names_a) - set(names_b))
        only_b = sorted(set(names_b) - set(names_a))
        raise KeyMismatch(f"tensor names differ (left-only {only_a}, right-only {only_b})")
    for name in names_a:
        if tuple(a.shape(name)) != tuple(b.shape(name)):
            raise ShapeMismatch(
                f"tensor {name!r}: shape {tuple(a.shape(name))} vs {tuple(b.shape(name))}"
            )


def checkpoint_add(a: Checkpoint, b: Checkpoint) -> Checkpoint:
    """Element-wise sum of two structurally identical checkpoints."""
    structural_check(a, b)
    return Checkpoint({name: a.tensor(name) + b.tensor(name) for name in a.names()})


def checkpoint_scale(a: Checkpoint, c: float) -> Checkpoint:
    """Every element multiplied by the scalar c."""
    return Checkpoint({name: a.tensor(name) * DTYPE(c) for name in a.names()})


def zeros_like(a) -> Checkpoint:
    return Checkpoint({name: np.zeros(a.shape(name), dtype=DTYPE) for name in a.names()})


def task_vector(expert: Checkpoint, base: Checkpoint, base_id: str | None = None) -> TaskVector:
    """Difference expert - base, recording which base it was taken against."""
    structural_check(expert, base)
    if base_id is None:
        base_id = base.meta.get("task_id", "")
    deltas = {name: expert.tensor(name) - base.tensor(name) for name in expert.names()}
    return TaskVector(deltas, base_id=base_id)


def apply_task_vector(base: Checkpoint, delta: TaskVector, scale: float = 1.0) -> Checkpoint:
    """base + scale * delta."""
    structural_check(base, delta)
    out = {
        name: base.tensor(name) + DTYPE(scale) * delta.tensor(name) for name in base.names()
    }
    return Checkpoint(out)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _encode(ckpt: Checkpoint) -> bytes:
    tensors = {}
    offset = 0
    blobs = []
    for name, arr in ckpt.items():
        raw = arr.tobytes()
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"tensors": tensors, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint; load_checkpoint(path) restores it bit-identically."""
    Path(path).write_bytes(_encode(ckpt))


def _parse_header(blob: bytes, path) -> tuple[dict, int]:
    """Validate container framing; return (header dict, data section start)."""
    if len(blob) < 12:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    data_start = 12 + header_len
    if data_start + 4 > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"{path}: header missing tensor table")
    return header, data_start


def _check_entry(name, info, data_len, path):
    shape = tuple(int(s) for s in info["shape"])
    nbytes = int(info["nbytes"])
    offset = int(info["offset"])
    if info.get("dtype") != "f32":
        raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {info.get('dtype')}")
    expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
    if nbytes != expected:
        raise FormatError(f"{path}: tensor {name!r} nbytes {nbytes} != shape size {expected}")
    if offset < 0 or offset + nbytes > data_len:
        raise FormatError(f"{path}: tensor {name!r} blob out of range")
    return shape, offset, nbytes


def load_checkpoint(path) -> Checkpoint:
    """Read a .cmrg file, verifying framing and the trailing checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes)")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    body = blob[:-4]
    if zlib.crc32(body) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch")
    header, data_start = _parse_header(body, path)
    data = body[data_start:]
    tensors = {}
    for name, info in header["tensors"].items():
        shape, offset, nbytes = _check_entry(name, info, len(data), path)
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(shape)
    return Checkpoint(tensors, meta=header.get("meta", {}))


class CheckpointFileReader:
    """Random access to single tensors of a .cmrg file without a full load.

    Validates framing on open but skips the trailing CRC so a merge can
    stream one tensor at a time; use load_checkpoint for a verified load.
    """

    def __init__(self, path):
        self.path = Path(path)
        blob = self.path.read_bytes()
        header, data_start = _parse_header(blob, path)
        self._data_start = data_start
        self._entries = {}
        data_len = len(blob) - data_start - 4
        for name, info in header["tensors"].items():
            self._entries[name] = _check_entry(name, info, data_len, path)
        self.meta = header.get("meta", {})

    def names(self) -> list[str]:
        return sorted(self._entries)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entries[name][0]

    def tensor(self, name: str) -> np.ndarray:
        shape, offset, nbytes = self._entries[name]
        with open(self.path, "rb") as fh:
            fh.seek(self._data_start + offset)
            raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError(f"{self.path}: truncated blob for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        arr.flags.writeable = False
        return arr

    def load(self) -> Checkpoint:
        return load_checkpoint(self.path)


class CheckpointBuffer:
    """Append-only on-disk store of expert checkpoints with a JSON index.

    Layout: ``<dir>/task_<index>.cmrg`` plus ``<dir>/index.json`` listing
    entries in append order. Entries are immutable; task indices start at
    1 and increase by one per append. One writer, any number of readers.
    """

    INDEX_NAME = "index.json"

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._entries: list[dict] = []
        index_path = self.directory / self.INDEX_NAME
        if index_path.exists():
            self._entries = json.loads(index_path.read_text(encoding="utf-8"))["entries"]

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, ckpt: Checkpoint) -> int:
        task_index = len(self._entries) + 1
        fname = f"task_{task_index}.cmrg"
        save_checkpoint(ckpt, self.directory / fname)
        self._entries.append({"task_index": task_index, "file": fname})
        index_path = self.directory / self.INDEX_NAME
        index_path.write_text(
            json.dumps({"entries": self._entries}, indent=1), encoding="utf-8"
        )
        return task_index

    def _entry(self, task_index: int) -> dict:
        if not self._entries:
            raise EmptyBuffer("buffer has no entries")
        if not 1 <= task_index <= len(self._entries):
            raise KeyError(f"task index {task_index} not in buffer (1..{len(self._entries)})")
        return self._entries[task_index - 1]

    def reader(self, task_index: int) -> CheckpointFileReader:
        return CheckpointFileReader(self.directory / self._entry(task_index)["file"])

    def readers(self) -> list[CheckpointFileReader]:
        """All entries in task order, as streaming readers."""
        return [self.reader(i) for i in range(1, len(self._entries) + 1)]

    def load(self, task_index: int) -> Checkpoint:
        return load_checkpoint(self.directory / self._entry(task_index)["file"])

    def last(self) -> Checkpoint:
        if not self._entries:
            raise EmptyBuffer("buffer has no entries")
        return self.load(len(self._entries))
