"""Binary tensor-record files.

Layout (all integers little-endian)::

    b"RPTL"            magic
    u32                format version (1)
    u64 + bytes        JSON header (UTF-8), ``{}`` when absent
    u64                record count
    per record:
      u32 + bytes      name (UTF-8)
      u32              rank
      u64 * rank       extents
      f64 * prod       data, row-major

Every checkpoint in the package (backbones, prompts, per-epoch training
state) uses this one format.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"RPTL"
VERSION = 1


def _header_bytes(header: Mapping | None) -> bytes:
    return json.dumps(dict(header or {}), sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    hb = _header_bytes(header)
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.require(arr, dtype="<f8", requirements="C")  # keeps rank 0
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse bytes produced by :func:`dumps`; returns ``(header, tensors)``."""
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise ContractError("not an RPTL tensor-record file (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise ContractError(f"unsupported RPTL format version {version}")
    pos = 8
    (hlen,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        if name in tensors:
            raise ContractError(f"duplicate tensor record {name!r}")
        tensors[name] = arr.astype(np.float64)
    if pos != len(raw):
        raise ContractError("trailing bytes after last tensor record")
    return header, tensors


def save(path: str | Path, tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, header))
    return path


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def record_overhead(name: str, rank: int) -> int:
    """Bytes a record spends on everything except its data."""
    return 4 + len(name.encode("utf-8")) + 4 + 8 * rank


def file_overhead(header: Mapping | None) -> int:
    return 4 + 4 + 8 + len(_header_bytes(header)) + 8


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 of the serialized tensors (header-free), for bitwise comparisons."""
    return hashlib.sha256(dumps(tensors)).hexdigest()
