"""Binary checkpoints for parameter groups.

The format is deliberately dumb: a little-endian header followed by one
record per parameter, each carrying its dotted name, rank, extents, and
raw float32 data. No pickling, no compression, so a file written on one
machine loads bit-exactly on any other.

Layout::

    magic   4 bytes  b"SAFT"
    version u32
    count   u32
    then per entry:
        name_len u16
        name     utf-8 bytes
        rank     u8
        extents  u32 * rank
        data     f32 * prod(extents)
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .params import ParamGroup

MAGIC = b"SAFT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is malformed or does not match the model."""


def _write_entry(fh: BinaryIO, name: str, value: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"parameter name too long: {name!r}")
    arr = np.asarray(value, dtype="<f4", order="C")  # keeps 0-d ranks intact
    if arr.ndim > 0xFF:
        raise CheckpointError(f"parameter rank too large: {name!r}")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def _read_entry(fh: BinaryIO):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(path, params: ParamGroup) -> None:
    entries = list(params.named_params())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, p in entries:
            _write_entry(fh, name, p.data)


def load_checkpoint(path, params: ParamGroup) -> None:
    """Load values into an existing parameter group, matching by name.

    Every entry in the file must correspond to a parameter of the same
    shape, and every parameter must be covered; anything else is an error
    rather than a silent partial load.
    """
    targets = dict(params.named_params())
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        seen = set()
        for _ in range(count):
            name, data = _read_entry(fh)
            if name not in targets:
                raise CheckpointError(f"unknown parameter in checkpoint: {name}")
            p = targets[name]
            if tuple(data.shape) != tuple(p.data.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: file {data.shape}, model {p.data.shape}")
            p.data = data.astype(p.data.dtype)
            seen.add(name)
        trailing = fh.read(1)
    if trailing:
        raise CheckpointError("trailing bytes after last checkpoint entry")
    missing = sorted(set(targets) - seen)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {', '.join(missing[:5])}")
