"""Checkpoint files: a JSON header followed by raw little-endian float32 data.

Layout::

    b"HSANETCK"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, keys sorted
    payload                          float32 LE buffers in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParamStore
from .tensor import Tensor

MAGIC = b"HSANETCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamStore, config: ModelConfig, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    buffers = []
    for name, t in params:
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(buf)
        buffers.append(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict(),
        "entries": entries,
        "payload_bytes": offset,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in buffers:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    store = ParamStore()
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        store.add(e["name"], Tensor(arr.astype(np.float32).reshape(e["shape"])))
    return store, ModelConfig.from_dict(header["model"]), header.get("meta", {})
