"""Binary checkpoint and dataset containers, plus atomic file writes.

Checkpoint layout (all integers little-endian)::

    b"GTTS2" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u8 dtype (1 = f64) | u32 rank | rank x u64 dims | f64 payload ) |
    u32 crc32(everything before)

The dataset file follows the same conventions under the magic ``b"GTTSD"``.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .toyworld import Utterance

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_dataset",
    "load_dataset",
    "atomic_write",
]

MAGIC = b"GTTS2"
VERSION = 1
DATA_MAGIC = b"GTTSD"
DATA_VERSION = 1
F64 = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or unsupported checkpoint/dataset file."""


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype.kind not in "fiub":
            raise TypeError(f"{name!r}: only numeric arrays can be stored")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", F64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _check_crc(buf: bytes, magic: bytes) -> bytes:
    if len(buf) < len(magic) + 12:
        raise CheckpointError("truncated file")
    if buf[: len(magic)] != magic:
        raise CheckpointError("bad magic")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    return body


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(_check_crc(buf, MAGIC))
    r.take(len(MAGIC))
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        if name in out:
            raise CheckpointError(f"duplicate array name {name!r}")
        dtype, rank = r.unpack("<BI")
        if dtype != F64:
            raise CheckpointError(f"unsupported dtype tag {dtype}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last array")
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def save_dataset(path, utterances, channels: int, num_classes: int, speakers: Mapping[int, np.ndarray]) -> None:
    """Store utterances with a speaker table of (id, embedding)."""
    d = len(next(iter(speakers.values()))) if speakers else 0
    parts = [DATA_MAGIC, struct.pack("<IIIII", DATA_VERSION, channels, num_classes, d, len(speakers))]
    for sid, e in speakers.items():
        parts.append(struct.pack("<I", sid) + np.asarray(e, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(utterances)))
    for u in utterances:
        u.validate(channels, num_classes)
        n = len(u.phonemes)
        parts.append(struct.pack("<II", u.speaker, n))
        parts.append(np.asarray(u.phonemes, dtype="<u4").tobytes())
        parts.append(np.asarray(u.spans, dtype="<u4").tobytes())
        parts.append(struct.pack("<I", len(u)) + np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
    body = b"".join(parts)
    atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> tuple[list[Utterance], dict]:
    """Returns (utterances, header) where header has channels, num_classes and the speaker table."""
    r = _Reader(_check_crc(Path(path).read_bytes(), DATA_MAGIC))
    r.take(len(DATA_MAGIC))
    version, C, K, d, ns = r.unpack("<IIIII")
    if version != DATA_VERSION:
        raise CheckpointError(f"unsupported dataset version {version}")
    speakers = {}
    for _ in range(ns):
        (sid,) = r.unpack("<I")
        speakers[sid] = np.frombuffer(r.take(8 * d), dtype="<f8").astype(np.float64)
    (count,) = r.unpack("<I")
    utts = []
    for _ in range(count):
        sid, n = r.unpack("<II")
        ph = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
        spans = np.frombuffer(r.take(8 * n), dtype="<u4").astype(np.int64).reshape(n, 2)
        (L,) = r.unpack("<I")
        frames = np.frombuffer(r.take(8 * L * C), dtype="<f8").astype(np.float64).reshape(L, C)
        u = Utterance(frames, ph, spans, sid)
        try:
            u.validate(C, K)
        except ValueError as exc:
            raise CheckpointError(f"invalid record: {exc}") from exc
        utts.append(u)
    return utts, {"channels": C, "num_classes": K, "speakers": speakers}
