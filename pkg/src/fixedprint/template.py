"""Fixed-length templates: branch fusion, cosine scoring, 2 kB payload.

A template is the unit-normalized concatenation of the texture and
minutiae branch embeddings (texture half first). Scores are plain cosine
similarity, accumulated in 64-bit and returned as 32-bit so scoring is
bit-exactly symmetric.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from fixedprint._io import atomic_write_bytes
from fixedprint.errors import DegenerateEmbeddingError, FormatError, ValidationError

MAGIC = b"FPFL"
FORMAT_VERSION = 1
HEADER_LEN = 16

# matcher operating point at FAR = 0.1%
DEFAULT_ACCEPT_THRESHOLD = 0.69


@dataclass(frozen=True)
class BranchEmbedding:
    """One branch's output vector, tagged texture or minutiae."""

    values: np.ndarray
    kind: Literal["texture", "minutiae"]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size < 1:
            raise ValidationError(f"embedding must be a non-empty 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding contains non-finite values")
        if self.kind not in ("texture", "minutiae"):
            raise ValidationError(f"unknown embedding kind {self.kind!r}")
        v = v.copy() if v.flags.writeable else v
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class FixedTemplate:
    """Unit-norm fixed-length representation; texture half then minutiae half."""

    values: np.ndarray
    texture_dim: int = -1  # -1 means an even split

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size < 1:
            raise ValidationError(f"template must be a non-empty 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("template contains non-finite values")
        n = float(np.linalg.norm(v.astype(np.float64)))
        if abs(n - 1.0) > 1e-5:
            raise ValidationError(f"template norm {n!r} is not 1 within 1e-5")
        td = v.size // 2 if self.texture_dim < 0 else int(self.texture_dim)
        if not 0 <= td <= v.size:
            raise ValidationError(f"texture_dim {td} outside [0, {v.size}]")
        v = v.copy() if v.flags.writeable else v
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "texture_dim", td)

    @property
    def dim(self) -> int:
        return int(self.values.size)


def fuse(x1: BranchEmbedding, x2: BranchEmbedding) -> FixedTemplate:
    """Concatenate texture then minutiae embeddings and normalize to unit length.

    Raises DegenerateEmbeddingError when both inputs are zero vectors: a
    zero template would score arbitrarily and hides an upstream failure.
    """
    if x1.kind != "texture" or x2.kind != "minutiae":
        raise ValidationError(f"fuse expects (texture, minutiae), got ({x1.kind}, {x2.kind})")
    cat = np.concatenate([x1.values, x2.values]).astype(np.float64)
    norm = float(np.linalg.norm(cat))
    if norm == 0.0:
        raise DegenerateEmbeddingError("both branch embeddings are zero")
    return FixedTemplate((cat / norm).astype(np.float32), texture_dim=x1.dim)


def match_score(t1: FixedTemplate, t2: FixedTemplate) -> float:
    """Cosine similarity, 64-bit accumulation, 32-bit result.

    Symmetric bit-exactly: both orders multiply the same pairs and reduce
    in the same index order.
    """
    if t1.dim != t2.dim:
        raise ValidationError(f"dimension mismatch: {t1.dim} vs {t2.dim}")
    s = np.dot(t1.values.astype(np.float64), t2.values.astype(np.float64))
    return float(np.float32(s))


def serialize(t: FixedTemplate) -> bytes:
    """16-byte header + little-endian float32 payload (2048 bytes at dim 512)."""
    header = MAGIC + struct.pack("<BBH", FORMAT_VERSION, 0, t.dim) + b"\x00" * 8
    return header + t.values.astype("<f4").tobytes()


def deserialize(data: bytes) -> FixedTemplate:
    """Parse and validate a serialized template; any defect is a FormatError."""
    if len(data) < HEADER_LEN:
        raise FormatError(f"template blob is {len(data)} bytes, shorter than the {HEADER_LEN}-byte header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    version, _reserved, dim = struct.unpack("<BBH", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dim < 1:
        raise FormatError("dimension field is zero")
    expected = HEADER_LEN + 4 * dim
    if len(data) != expected:
        raise FormatError(f"template blob is {len(data)} bytes, expected {expected} for dim {dim}")
    values = np.frombuffer(data, dtype="<f4", count=dim, offset=HEADER_LEN)
    if not np.all(np.isfinite(values)):
        raise FormatError("payload contains non-finite values")
    norm = float(np.linalg.norm(values.astype(np.float64)))
    if abs(norm - 1.0) > 1e-4:
        raise FormatError(f"payload norm {norm!r} is not 1 within 1e-4")
    return FixedTemplate(values)


def write_template(t: FixedTemplate, path: str | Path) -> None:
    atomic_write_bytes(path, serialize(t))


def read_template(path: str | Path) -> FixedTemplate:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read template {path}: {e}") from e
    return deserialize(data)
