"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CHGKCKPT"
    version    u32
    digest     32 bytes  sha256 of the canonical config JSON
    meta_len   u32, then meta_len bytes of UTF-8 JSON (epoch, best IoU, config, ...)
    count      u32 tensor records, each:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u8, then ndim x u32 dims
        payload  raw little-endian array bytes
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = b"CHGKCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = -1
    best_val_iou: float = float("nan")
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(ckpt.config.digest())
    meta = {
        "epoch": ckpt.epoch,
        "best_val_iou": ckpt.best_val_iou,
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    records = [(name, arr) for name, arr in ckpt.params.items()]
    records += [(f"opt/{name}", arr) for name, arr in ckpt.opt_state.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def loads(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(take(32))
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    config = RunConfig.from_dict(meta["config"])
    if config.digest() != digest:
        raise CheckpointError("config digest mismatch: header and stored config disagree")
    (count,) = struct.unpack("<I", take(4))
    params, opt_state = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dtype = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(n * dtype.itemsize)), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name.startswith("opt/"):
            opt_state[name[4:]] = arr
        else:
            params[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} unexpected trailing bytes")
    return Checkpoint(
        params=params,
        config=config,
        opt_state=opt_state,
        epoch=meta["epoch"],
        best_val_iou=meta["best_val_iou"],
        step=meta["step"],
        extra=meta.get("extra", {}),
    )
