"""Tagged binary container shared by model checkpoints and CCA files.

Layout (all integers little-endian)::

    magic     4 bytes   e.g. b"GLSC"
    version   u32
    hdr_len   u32       byte length of the JSON header
    header    UTF-8 JSON, keys sorted; lists tensors as [name, shape] pairs
    payload   float64 LE tensors, concatenated in header order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from glstm.errors import StorageError, TruncatedFileError, VersionError

VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["tensors"] = [[name, list(np.shape(t))] for name, t in tensors.items()]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", VERSION, len(hdr)), hdr]
    for t in tensors.values():
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12:
        if data[:4] != magic[: len(data[:4])]:
            raise VersionError(f"bad magic {data[:4]!r}, expected {magic!r}")
        raise TruncatedFileError("file shorter than container preamble")
    if data[:4] != magic:
        raise VersionError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version, hdr_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}, expected {VERSION}")
    end = 12 + hdr_len
    if len(data) < end:
        raise TruncatedFileError("file truncated inside header")
    try:
        header = json.loads(data[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedFileError(f"unreadable header: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = end
    for name, shape in header.get("tensors", []):
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if len(data) < offset + nbytes:
            raise TruncatedFileError(f"file truncated inside tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise TruncatedFileError(f"{len(data) - offset} trailing bytes after payload")
    return header, tensors


def write(path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(magic, header, tensors))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode(data, magic)
