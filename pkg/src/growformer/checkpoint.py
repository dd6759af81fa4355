"""Flat, bit-exact checkpoint files (``.grwf``).

Layout::

    b"GRWF"            magic
    u32 LE             format version (1)
    u32 LE             header length N
    N bytes            UTF-8 JSON: {"config": {...}, "tensors": [manifest entries]}
    payload            little-endian float32 tensors, row-major, manifest order

Each manifest entry carries name, shape, offset (relative to payload start),
nbytes and the SHA-256 of the tensor bytes. The JSON is written with sorted
keys and fixed separators so identical models give identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .transformer import ModelConfig, check_params, param_shapes

MAGIC = b"GRWF"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


def _encode(config: ModelConfig, params: dict[str, np.ndarray]) -> bytes:
    check_params(config, params)
    manifest = []
    chunks = []
    offset = 0
    for name in param_shapes(config):
        arr = np.ascontiguousarray(params[name], dtype=_LE_F32)
        raw = arr.tobytes(order="C")
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config.to_dict(), "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header, *chunks])


def save(config: ModelConfig, params: dict[str, np.ndarray], path: str | Path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    data = _encode(config, params)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a GRWF checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this reader supports {VERSION}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = memoryview(data)[12 + hlen:]

    expected = param_shapes(config)
    names = [e["name"] for e in manifest]
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        raise ShapeError(f"{path}: tensor set does not match the embedded config")
    params = {}
    cursor = 0
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise ShapeError(f"{path}: {name} has shape {shape}, config implies {expected[name]}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != cursor or entry["nbytes"] != nbytes:
            raise ShapeError(f"{path}: {name} offset/length inconsistent with manifest order")
        raw = bytes(payload[cursor:cursor + nbytes])
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: payload truncated at {name}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch for {name}")
        params[name] = np.frombuffer(raw, dtype=_LE_F32).reshape(shape).astype(np.float32)
        cursor += nbytes
    if cursor != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - cursor} trailing payload bytes")
    return config, {name: params[name] for name in expected}


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
