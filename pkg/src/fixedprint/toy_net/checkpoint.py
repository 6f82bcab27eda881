"""Versioned parameter checkpoints: JSON config + named float32 blocks.

Layout (all little-endian): magic ``FPCK``, version u8, config-JSON
length u32 + bytes, block count u32, then per block a u16-length-prefixed
UTF-8 name, ndim u8, ndim x u32 dims, and the raw float32 data.  Tensors
are stored in 32-bit regardless of the in-memory compute dtype.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .._io import atomic_write_bytes
from ..errors import FormatError
from .net import NetConfig, NetParams, init_params

CHECKPOINT_MAGIC = b"FPCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: NetParams, path) -> None:
    """Writes params atomically in the named-block format."""
    cfg_json = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<BI", CHECKPOINT_VERSION, len(cfg_json)),
        cfg_json,
        struct.pack("<I", len(params.tensors)),
    ]
    for name in sorted(params.tensors):
        t = params.tensors[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    atomic_write_bytes(Path(path), b"".join(parts))


class _Cursor:
    """Bounds-checked reader over a checkpoint blob."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> NetParams:
    """Reads a checkpoint and validates it against its own config.

    The block names and shapes must exactly match what init_params
    produces for the stored config.
    """
    cur = _Cursor(Path(path).read_bytes())
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, cfg_len = cur.unpack("<BI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg_dict = json.loads(cur.take(cfg_len).decode("utf-8"))
        config = NetConfig(**cfg_dict)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from None
    (n_blocks,) = cur.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(cur.take(count * 4), dtype="<f4").reshape(shape)
        if name in tensors:
            raise FormatError(f"duplicate checkpoint block {name!r}")
        tensors[name] = data.astype(config.dtype)
    if cur.pos != len(cur.blob):
        raise FormatError("trailing bytes after the last checkpoint block")

    reference = init_params(config).tensors
    if set(tensors) != set(reference):
        missing = sorted(set(reference) ^ set(tensors))
        raise FormatError(f"checkpoint blocks do not match the config: {missing}")
    for name, ref in reference.items():
        if tensors[name].shape != ref.shape:
            raise FormatError(
                f"block {name!r} has shape {tensors[name].shape}, expected {ref.shape}"
            )
    return NetParams(config=config, tensors=tensors)
