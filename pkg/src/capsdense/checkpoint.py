"""Binary checkpoint format for named float32 tensors.

Layout (little-endian)::

    b"CDCK"  u32 version
    u32 count
    count x { u32 name_len, name (UTF-8), u8 dtype_tag, u32 rank, rank x u32 extent }
    float32 payloads in manifest order
    u32 CRC32 of the payload bytes

Run metadata (model spec, epoch, data settings) is kept in a JSON sidecar
``<path>.json`` so the tensor file stays purely numeric.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError

MAGIC = b"CDCK"
VERSION = 1
DTYPE_F32 = 0


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    header = io.BytesIO()
    header.write(MAGIC)
    header.write(struct.pack("<II", VERSION, len(tensors)))
    payload = io.BytesIO()
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        header.write(struct.pack("<I", len(encoded)))
        header.write(encoded)
        header.write(struct.pack("<BI", DTYPE_F32, array.ndim))
        header.write(struct.pack(f"<{array.ndim}I", *array.shape))
        payload.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = payload.getvalue()
    with open(path, "wb") as f:
        f.write(header.getvalue())
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise IntegrityError(f"{path}: truncated at byte offset {len(raw)} (needed {pos + n})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise IntegrityError(f"{path}: bad magic, not a CDCK checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported format version {version}")
    manifest = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IntegrityError(f"{path}: corrupt tensor name") from exc
        tag, rank = struct.unpack("<BI", take(5))
        if tag != DTYPE_F32:
            raise IntegrityError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        manifest.append((name, shape))
    start = pos
    out = OrderedDict()
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    body = raw[start:pos]
    (crc,) = struct.unpack("<I", take(4))
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: CRC32 mismatch, payload corrupted")
    if pos != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - pos} trailing bytes after checksum")
    return out


def save_checkpoint(path, params: Mapping[str, np.ndarray], optimizer: Mapping[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Parameters as ``param/<name>``, optimizer state as ``adam/<key>``, metadata beside it."""
    tensors = OrderedDict((f"param/{k}", v) for k, v in params.items())
    for k, v in (optimizer or {}).items():
        tensors[f"adam/{k}"] = v
    write_tensors(path, tensors)
    Path(str(path) + ".json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", "OrderedDict[str, np.ndarray]", dict]:
    tensors = read_tensors(path)
    params = OrderedDict((k[6:], v) for k, v in tensors.items() if k.startswith("param/"))
    optimizer = OrderedDict((k[5:], v) for k, v in tensors.items() if k.startswith("adam/"))
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return params, optimizer, meta
