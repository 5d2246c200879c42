"""Versioned binary checkpoints.

Layout (little-endian)::

    b"BPTCKPT\\0" | u32 version | u32 header length | header (UTF-8 JSON) | arrays

The header holds the run config, free-form metadata and the array manifest
``[name, dtype, shape]``; raw array bytes follow in manifest order. Equal
inputs give equal bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from bpt.config import RunConfig
from bpt.errors import InvalidInputError
from bpt.numeric import AdamState

MAGIC = b"BPTCKPT\0"
VERSION = 1


def dumps(config: RunConfig, params: dict, state: AdamState | None = None, meta: dict | None = None) -> bytes:
    arrays = list(params.items())
    opt = None
    if state is not None:
        opt = {f: getattr(state, f) for f in ("lr", "beta1", "beta2", "eps", "warmup", "step")}
        arrays += [(f"adam.m/{k}", v) for k, v in state.m.items()]
        arrays += [(f"adam.v/{k}", v) for k, v in state.v.items()]
    manifest = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append([name, le.dtype.str, list(arr.shape)])
        blobs.append(le.tobytes())
    header = {
        "config": dataclasses.asdict(config),
        "meta": meta or {},
        "optimizer": opt,
        "arrays": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def loads(blob: bytes) -> tuple[RunConfig, dict, AdamState | None, dict]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise InvalidInputError("not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise InvalidInputError("corrupt checkpoint header") from None
    pos = 16 + hlen
    params, m, v = {}, {}, {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(blob):
            raise InvalidInputError(f"checkpoint truncated inside array {name!r}")
        arr = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        pos += size
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if pos != len(blob):
        raise InvalidInputError("trailing bytes in checkpoint")
    state = None
    if header["optimizer"] is not None:
        state = AdamState(**header["optimizer"], m=m, v=v)
    return RunConfig(**header["config"]), params, state, header["meta"]


def save(path: str | Path, config: RunConfig, params: dict, state: AdamState | None = None, meta=None) -> None:
    Path(path).write_bytes(dumps(config, params, state, meta))


def load(path: str | Path):
    return loads(Path(path).read_bytes())
