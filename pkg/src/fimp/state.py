"""Byte-exact serialization of model states and checkpoints.

A model state is written as::

    b"FIMPSTATE1\\n"  u32 record_count
    per record: u16 name_len, utf-8 name, u8 ndim, ndim x u32 dims,
                prod(dims) x float64 (little-endian)

A checkpoint is a sequence of named model states::

    b"FIMPCKPT1\\n"  u32 section_count
    per section: u16 name_len, utf-8 name, u64 payload_len, serialized state
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FeatureFileError

STATE_MAGIC = b"FIMPSTATE1\n"
CKPT_MAGIC = b"FIMPCKPT1\n"


def serialize_state(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [STATE_MAGIC, struct.pack("<I", len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() emits C order
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def serialized_size(state: Mapping[str, np.ndarray]) -> int:
    size = len(STATE_MAGIC) + 4
    for name, value in state.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * np.ndim(value) + 8 * np.size(value)
    return size


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FeatureFileError(f"truncated payload: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_state(buf: bytes) -> OrderedDict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(len(STATE_MAGIC)) != STATE_MAGIC:
        raise FeatureFileError("bad model-state magic")
    (count,) = r.unpack("<I")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FeatureFileError(f"{len(buf) - r.pos} trailing bytes after model state")
    return out


def save_checkpoint(path: str | Path, sections: Mapping[str, Mapping[str, np.ndarray]]) -> int:
    parts = [CKPT_MAGIC, struct.pack("<I", len(sections))]
    for name, state in sections.items():
        payload = serialize_state(state)
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<Q", len(payload)), payload]
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path: str | Path) -> OrderedDict[str, OrderedDict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FeatureFileError(f"{path}: not a checkpoint file")
    (count,) = r.unpack("<I")
    out: OrderedDict[str, OrderedDict[str, np.ndarray]] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (size,) = r.unpack("<Q")
        out[name] = deserialize_state(r.take(size))
    return out
