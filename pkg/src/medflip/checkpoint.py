"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"MFCK"              magic
    u32 version
    u32 meta_len, meta   UTF-8 JSON: step, config snapshot, vocabulary
    u32 n_tensors
    per tensor:
        u16 name_len, name (UTF-8)
        u8  ndim
        u32 * ndim dims
        f64 * prod(dims) values, C order
    u32 CRC32 of every preceding byte

Model parameters are stored as ``param/<name>``; optimizer moments as
``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MFCK"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16:
        raise CheckpointError(f"checkpoint truncated ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    try:
        pos = 12
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(blob) - 4:
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
