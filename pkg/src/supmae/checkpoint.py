"""The ``.smae`` checkpoint format.

Layout, all integers little-endian::

    b"SMAE"  u32 version
    u32 len  config text (canonical key = value, UTF-8)
    u32 n    n tensor records          # parameters
    u32 n    n tensor records          # buffers (batch-norm running stats)
    u8 flag  [u64 step, u32 n, n records (m), u32 n, n records (v)]   # optimizer, if flag
    u32 len  RNG state as JSON
    u32      epoch
    u32      CRC-32 of every preceding byte

A tensor record is ``u16 name length, UTF-8 name, u8 dtype code, u8 rank,
rank x u32 extents, little-endian IEEE-754 payload``.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SMAE"
VERSION = 1
DTYPE_CODES = {2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class MissingTensors(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int | None = None
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    version: int = VERSION

    @property
    def has_optimizer(self) -> bool:
        return self.opt_step is not None


# ---------------------------------------------------------------- encode

def _tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _CODE_OF[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _tensors(d: dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(d)) + b"".join(_tensor(k, v) for k, v in d.items())


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ck.version), _blob(ck.config_text.encode()), _tensors(ck.params),
             _tensors(ck.buffers)]
    if ck.has_optimizer:
        parts += [b"\x01", struct.pack("<Q", ck.opt_step), _tensors(ck.opt_m), _tensors(ck.opt_v)]
    else:
        parts.append(b"\x00")
    rng = b"" if ck.rng_state is None else json.dumps(ck.rng_state, sort_keys=True).encode()
    parts += [_blob(rng), struct.pack("<I", ck.epoch)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(path, ck: Checkpoint) -> None:
    """Write atomically: a temp file renamed over the target."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


# ---------------------------------------------------------------- decode

class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf, self.pos, self.origin = buf, 0, origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"{self.origin}: truncated at byte offset {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode()
        code, rank = self.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CorruptCheckpoint(f"{self.origin}: {name}: unknown dtype code {code}")
        dims = self.unpack(f"<{rank}I")
        dt = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="))

    def tensors(self) -> dict[str, np.ndarray]:
        (n,) = self.unpack("<I")
        return dict(self.tensor() for _ in range(n))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def decode(buf: bytes, origin: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12:
        raise CorruptCheckpoint(f"{origin}: truncated at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise CorruptCheckpoint(f"{origin}: bad magic")
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise CorruptCheckpoint(f"{origin}: checksum mismatch (truncated or corrupted file)")
    r = _Reader(buf[:-4], origin)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"{origin}: format version {version}, this build reads {VERSION}; no migration known")
    ck = Checkpoint(r.blob().decode(), r.tensors(), r.tensors())
    (flag,) = r.unpack("<B")
    if flag:
        (ck.opt_step,) = r.unpack("<Q")
        ck.opt_m = r.tensors()
        ck.opt_v = r.tensors()
    rng = r.blob()
    ck.rng_state = json.loads(rng) if rng else None
    (ck.epoch,) = r.unpack("<I")
    if r.pos != len(r.buf):
        raise CorruptCheckpoint(f"{origin}: {len(r.buf) - r.pos} trailing bytes")
    return ck


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return decode(buf, str(path))


def select(tensors: dict[str, np.ndarray], names, subset: bool = False) -> dict[str, np.ndarray]:
    """Pick ``names`` from a checkpoint; missing names are an error unless ``subset``."""
    missing = [n for n in names if n not in tensors]
    if missing and not subset:
        raise MissingTensors(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}; use subset mode")
    return {n: tensors[n] for n in names if n in tensors}
