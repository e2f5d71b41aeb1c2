"""Binary container for named float32 tensors plus key=value metadata.

Layout (all integers little-endian u32)::

    b"DPJK"  version:u8=1  tensor_count
    repeated tensor_count times:
        name_len  name(utf-8)  rank  extent*rank  float32 payload (row-major)
    meta_len  meta(utf-8 "key=value\\n" lines, keys sorted)

Checkpoints, datasets (``clip/<i>``) and fitted LMMSE models
(``lmmse/<field>``) all use this one format.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DPJK"
VERSION = 1


class ContainerError(ValueError):
    """The byte stream is not a valid container."""


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<{arr.ndim + 1}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    lines = []
    for key in sorted(meta or {}):
        value = str(meta[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ContainerError(f"metadata entry {key!r} cannot be encoded on one line")
        lines.append(f"{key}={value}\n")
    block = "".join(lines).encode("utf-8")
    parts.append(struct.pack("<I", len(block)))
    parts.append(block)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic")
    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").astype(np.float32).reshape(shape)
        if name in tensors:
            raise ContainerError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    (mlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in bytes(take(mlen)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after metadata")
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
