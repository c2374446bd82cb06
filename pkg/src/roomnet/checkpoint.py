"""Binary checkpoint format.

All integers are little-endian.  Layout::

    b"RNCK"                         magic
    u32    version                  (FORMAT_VERSION)
    u64    header length, then a UTF-8 JSON header (model config, epoch,
           RNG state, optimizer hyper-parameters, free-form extras)
    u32    record count, then per record:
        u16  name length, UTF-8 name
        u8   dtype code (see _DTYPES)
        u8   ndim, then ndim x u64 dims
        u64  payload length, raw C-order payload

Record names are ``param/<name>``, ``buffer/<name>`` and
``momentum/<param name>``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from roomnet.errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError

MAGIC = b"RNCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict                   # record name -> ndarray
    epoch: int = 0
    rng_state: Optional[dict] = None
    optimizer: dict = field(default_factory=dict)   # lr, momentum, weight_decay
    extra: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _encode(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    header = json.dumps({"model_config": ckpt.model_config, "epoch": int(ckpt.epoch),
                         "rng_state": ckpt.rng_state, "optimizer": ckpt.optimizer,
                         "extra": ckpt.extra}, sort_keys=True).encode()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt).str not in {d.str for d in _DTYPES.values()}:
            raise CheckpointError(f"cannot store tensor {name!r} of dtype {arr.dtype}")
        code = _CODES[np.dtype(np.dtype(dt).str)]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(struct.pack("<Q", len(raw)) + raw)
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    data = _encode(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.path}: truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    r = _Reader(buf, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: record {name!r} payload size does not match its shape")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(header["model_config"], tensors, header["epoch"], header["rng_state"],
                      header.get("optimizer", {}), header.get("extra", {}))
