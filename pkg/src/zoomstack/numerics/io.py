"""Binary tensor formats.

ZTEN: ``b"ZTEN"``, u32 rank, rank x u32 dims, little-endian f64 payload.

ZCKP: ``b"ZCKP"``, u32 manifest length, UTF-8 JSON manifest listing each
named tensor's shape and element offset (plus free-form ``meta``), then one
little-endian f64 payload holding all tensors back to back in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ContractViolation

ZTEN_MAGIC = b"ZTEN"
ZCKP_MAGIC = b"ZCKP"


def zten_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    head = ZTEN_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def zten_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != ZTEN_MAGIC:
        raise ContractViolation("not a ZTEN file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 8 * count:
        raise ContractViolation(f"ZTEN payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def save_zten(path, array) -> None:
    Path(path).write_bytes(zten_bytes(array))


def load_zten(path) -> np.ndarray:
    return zten_from_bytes(Path(path).read_bytes())


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(tensors)
    entries = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(np.asarray(tensors[n], dtype="<f8")).tobytes() for n in names
    )
    Path(path).write_bytes(ZCKP_MAGIC + struct.pack("<I", len(manifest)) + manifest + payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != ZCKP_MAGIC:
        raise ContractViolation(f"{path}: not a ZCKP checkpoint")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
    payload = np.frombuffer(buf, dtype="<f8", offset=8 + mlen)
    out = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + n > payload.size:
            raise ContractViolation(f"{path}: truncated payload for {entry['name']}")
        out[entry["name"]] = payload[start : start + n].reshape(entry["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
