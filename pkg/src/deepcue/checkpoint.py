"""``CUE1`` checkpoint files.

Layout: magic ``b"CUE1"``, u32 LE header length, UTF-8 JSON header, then the
arrays as float32 LE row-major, concatenated in manifest order. Arrays are
stored sorted by name and the header is serialized with sorted keys, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Mapping

import numpy as np

from .errors import ParseError, ValidationError

MAGIC = b"CUE1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_kind: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"array {name!r} has non-finite values")
        raw = arr.astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": ckpt.model_kind,
        "arrays": manifest,
        "config": ckpt.config,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC or len(data) < 8:
        raise ParseError("not a CUE1 checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = data[8 + hlen :]
    arrays, expected = {}, 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != expected or expected + n > len(payload):
            raise ParseError(f"array {entry['name']!r}: offset/shape inconsistent with payload")
        arrays[entry["name"]] = np.frombuffer(payload[expected : expected + n], dtype="<f4").reshape(shape).astype(np.float64)
        expected += n
    if expected != len(payload):
        raise ParseError("trailing bytes after checkpoint payload")
    return Checkpoint(header["model_kind"], arrays, header["config"])


def save_checkpoint(path: str | PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path: str | PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def subset(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in arrays.items() if k.startswith(prefix)}
