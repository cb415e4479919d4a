"""Flat key -> tensor archive.

Layout (all integers little-endian)::

    8 bytes   magic  b"SPLDCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length L
    L bytes   UTF-8 JSON header (keys sorted, no whitespace)
    ...       tensor payloads, each 8-byte aligned, C order

The header records ``byteorder`` (always "little"), and per tensor its
``key``, ``dtype`` (numpy dtype string such as "<f4"), ``shape``, ``offset``
(relative to the first payload byte) and ``nbytes``. An optional ``meta``
object carries JSON-serializable extras (config snapshot, iteration...).

Model keys follow the module tree, e.g.
``backbone.conv3.dw.weight``, ``backbone.conv3.pw.bn_gamma``,
``backbone.conv3.pw.bn_mean``. Writing is deterministic, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPLDCKPT"
VERSION = 1
_ALIGN = 8


def _le_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" or (dt.byteorder == "=" and not np.little_endian) else dt


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for key in sorted(tensors):
        arr = np.asarray(tensors[key])
        arr = np.ascontiguousarray(arr.astype(_le_dtype(arr.dtype), copy=False))
        raw = arr.tobytes(order="C")
        entries.append({"key": key, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % _ALIGN
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = {"byteorder": "little", "tensors": entries, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    hbytes += b" " * ((-len(hbytes) - len(MAGIC) - 12) % _ALIGN)
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def loads(data: bytes):
    """Returns ``(tensors, meta)``."""
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint archive (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(data[start: start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        tensors[e["key"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header.get("meta", {})


def save(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    tmp.replace(path)


def load(path):
    return loads(Path(path).read_bytes())
