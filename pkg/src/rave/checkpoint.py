"""Flat named-tensor checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"RAVECKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: {"spec", "step", "meta", "tensors": [...]}
    ...       raw tensor bytes, little-endian, C order, at the header offsets
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"RAVECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, params: dict, *, spec: dict, step: int, meta: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"spec": spec, "step": int(step), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, spec, step, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + header_len
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    params = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return params, header["spec"], header["step"], header.get("meta", {})
