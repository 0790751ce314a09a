"""Binary checkpoints for parameters and virtual concepts.

Layout (all integers little-endian u32 unless noted)::

    b"FVC1" | version | entry count
    per entry: name length | UTF-8 name | dtype code (u8, 4=float32, 8=float64)
               | rank | dims... | raw little-endian payload

Concepts are stored next to model weights as ``vc.concepts`` and one
``vc.upsilon.<client>`` vector per client.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from src.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"FVC1"
VERSION = 1
CONCEPTS_KEY = "vc.concepts"
UPSILON_PREFIX = "vc.upsilon."

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_entries(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        arr = arr.astype(_DTYPE_CODES[arr.dtype.itemsize], copy=False)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", arr.dtype.itemsize, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_entries(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(blob)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint at byte offset {offset}")
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an FVC1 checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")

    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{source}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = take(size * dtype.itemsize)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if offset != len(view):
        logger.warning("%s: %d trailing bytes ignored", source, len(view) - offset)
    return entries


def write_checkpoint(
    path: Path,
    params: Mapping[str, np.ndarray],
    concepts: np.ndarray | None = None,
    upsilons: Mapping[int, np.ndarray] | None = None,
) -> Path:
    entries = {name: np.asarray(getattr(v, "data", v)) for name, v in params.items()}
    if concepts is not None:
        entries[CONCEPTS_KEY] = np.asarray(concepts)
    for client_id, upsilon in sorted((upsilons or {}).items()):
        entries[f"{UPSILON_PREFIX}{client_id}"] = np.asarray(upsilon)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_entries(entries))
    logger.debug("Checkpoint written to %s (%d entries)", path, len(entries))
    return path


def read_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_entries(path.read_bytes(), source=str(path))


def split_checkpoint(
    entries: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], np.ndarray | None, dict[int, np.ndarray]]:
    """Separate model weights, the concept matrix and per-client preference weights."""
    params: dict[str, np.ndarray] = {}
    upsilons: dict[int, np.ndarray] = {}
    concepts = None
    for name, value in entries.items():
        if name == CONCEPTS_KEY:
            concepts = value
        elif name.startswith(UPSILON_PREFIX):
            upsilons[int(name[len(UPSILON_PREFIX):])] = value
        else:
            params[name] = value
    return params, concepts, upsilons


def describe_checkpoint(path: Path) -> list[dict]:
    rows = []
    for name, value in read_checkpoint(path).items():
        rows.append({
            "name": name,
            "dtype": str(value.dtype),
            "shape": list(value.shape),
            "l2_norm": float(np.linalg.norm(value.astype(np.float64))),
        })
    return rows
