"""Differentiable crop-and-align: bounded affine parameters plus a bilinear
grid sampler with analytic parameter gradients.

Coordinate conventions used everywhere downstream:

* Normalized coordinates span [-1, 1] per axis with pixel centers at
  (2*j + 1)/w - 1, so a translation of w/2 input pixels is a normalized
  offset of 1.0 and the 224-px clamp bound maps to exactly 1.0 at w = 448.
* The affine matrix maps target (output) coordinates to source (input)
  coordinates. Sampling reads source pixels bilinearly; locations outside
  the image use zero padding by default, clamp-to-edge optionally.
* The sampler expands the normalized map into pixel coordinates
  symbolically rather than normalizing and denormalizing, so an identity
  matrix lands on exact pixel centers and reproduces the input bit for bit.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fixedprint._io import atomic_write_bytes
from fixedprint.errors import DomainError, FormatError, ValidationError

TRANSLATION_BOUND = 224.0
ROTATION_BOUND = math.pi / 3.0
CROP_WINDOW = 285.0

_PIL_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class GrayImage:
    """A float32 grayscale image, values nominally in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 2:
            raise ValidationError(f"image must be 2-d, got shape {p.shape}")
        if p.shape[0] < 2 or p.shape[1] < 2:
            raise ValidationError(f"image must be at least 2x2, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValidationError("image contains non-finite pixels")
        p = p.copy() if p.flags.writeable else p
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AlignmentParams:
    """Bounded alignment parameters; construction clamps into the bounds.

    tx, ty are translations in input pixels, theta a rotation in radians.
    window is the fixed crop side (not learned).
    """

    tx: float
    ty: float
    theta: float
    window: float = CROP_WINDOW

    def __post_init__(self):
        for name, v in (("tx", self.tx), ("ty", self.ty), ("theta", self.theta), ("window", self.window)):
            if not math.isfinite(float(v)):
                raise DomainError(f"non-finite {name}: {v}")
        if self.window <= 0:
            raise DomainError(f"window must be positive, got {self.window}")
        object.__setattr__(self, "tx", min(TRANSLATION_BOUND, max(-TRANSLATION_BOUND, float(self.tx))))
        object.__setattr__(self, "ty", min(TRANSLATION_BOUND, max(-TRANSLATION_BOUND, float(self.ty))))
        object.__setattr__(self, "theta", min(ROTATION_BOUND, max(-ROTATION_BOUND, float(self.theta))))
        object.__setattr__(self, "window", float(self.window))


def clamp_params(raw_tx: float, raw_ty: float, raw_theta: float) -> AlignmentParams:
    """Saturating clamp of raw localization outputs into the legal box."""
    return AlignmentParams(raw_tx, raw_ty, raw_theta)


@dataclass(frozen=True)
class AffineMatrix:
    """2x3 matrix mapping normalized target coords to normalized source coords."""

    a11: float
    a12: float
    a13: float
    a21: float
    a22: float
    a23: float

    def rows(self) -> np.ndarray:
        return np.array(
            [[self.a11, self.a12, self.a13], [self.a21, self.a22, self.a23]], dtype=np.float64
        )

    @classmethod
    def identity(cls) -> "AffineMatrix":
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def similarity_matrix(
    scale: float, theta: float = 0.0, tx_norm: float = 0.0, ty_norm: float = 0.0
) -> AffineMatrix:
    """Similarity-form matrix in normalized coordinates (test/augmentation helper)."""
    c, s = math.cos(theta), math.sin(theta)
    return AffineMatrix(scale * c, -scale * s, tx_norm, scale * s, scale * c, ty_norm)


def build_affine(params: AlignmentParams, w_in: int, h_in: int) -> AffineMatrix:
    """Similarity matrix for a window crop at (tx, ty) rotated by theta.

    Scale is window/w_in horizontally and window/h_in vertically; the
    translation entries are 2*tx/w_in and 2*ty/h_in (pixels to normalized).
    """
    if w_in < 1 or h_in < 1:
        raise ValidationError(f"input dims must be positive, got {w_in}x{h_in}")
    sx = params.window / w_in
    sy = params.window / h_in
    c, s = math.cos(params.theta), math.sin(params.theta)
    return AffineMatrix(sx * c, -sx * s, 2.0 * params.tx / w_in, sy * s, sy * c, 2.0 * params.ty / h_in)


# --- sampling core (dtype-preserving array level) ----------------------------


def _rows_of(matrix) -> tuple[float, float, float, float, float, float]:
    if isinstance(matrix, AffineMatrix):
        return (matrix.a11, matrix.a12, matrix.a13, matrix.a21, matrix.a22, matrix.a23)
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.shape != (2, 3):
        raise ValidationError(f"affine matrix must be 2x3, got {arr.shape}")
    return tuple(float(v) for v in arr.ravel())  # type: ignore[return-value]


def _source_coords(rows, h, w, out_h, out_w):
    """Source pixel coordinates for every target cell, in float64.

    Expanded form of denormalize(A @ normalize(target)); the identity
    matrix yields exact integer coordinates for any image size.
    """
    a11, a12, a13, a21, a22, a23 = rows
    u = 2.0 * np.arange(out_w, dtype=np.float64) + 1.0 - out_w  # x_t_norm * out_w
    v = 2.0 * np.arange(out_h, dtype=np.float64) + 1.0 - out_h
    x = (a11 * (w / out_w) * u[None, :] + a12 * (w / out_h) * v[:, None] + (a13 + 1.0) * w - 1.0) * 0.5
    y = (a21 * (h / out_w) * u[None, :] + a22 * (h / out_h) * v[:, None] + (a23 + 1.0) * h - 1.0) * 0.5
    return x, y, u, v


def _gather(p, yi, xi):
    """Zero-padded gather: out-of-range corner indices contribute 0."""
    h, w = p.shape
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    vals = p[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, vals, 0.0)


def sample_array(pixels, matrix, out_h: int, out_w: int, padding: str = "zero") -> np.ndarray:
    """Bilinear sampling of a 2-d array; returns the input's dtype.

    Internally float64; ``padding`` is "zero" (default) or "edge".
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output dims must be positive, got {out_h}x{out_w}")
    if padding not in ("zero", "edge"):
        raise ValidationError(f"unknown padding {padding!r}")
    p = np.asarray(pixels)
    p64 = p.astype(np.float64, copy=False)
    h, w = p.shape
    x, y, _, _ = _source_coords(_rows_of(matrix), h, w, out_h, out_w)
    if padding == "edge":
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    v00 = _gather(p64, y0i, x0i)
    v10 = _gather(p64, y0i, x0i + 1)
    v01 = _gather(p64, y0i + 1, x0i)
    v11 = _gather(p64, y0i + 1, x0i + 1)
    out = (1.0 - wx) * (1.0 - wy) * v00 + wx * (1.0 - wy) * v10 + (1.0 - wx) * wy * v01 + wx * wy * v11
    return out.astype(p.dtype, copy=False)


def sample_backward_array(pixels, matrix, out_grad, padding: str = "zero"):
    """Gradient of sum(out * out_grad) w.r.t. (tx, ty, theta).

    The parameterization is build_affine's: a13 = 2*tx/w, a23 = 2*ty/h, and
    the linear block is scale times rotation by theta (so dA/dtheta is
    expressible from the matrix entries themselves). At exact integer
    source coordinates the left/top interval's derivative is used.
    """
    if padding not in ("zero", "edge"):
        raise ValidationError(f"unknown padding {padding!r}")
    p64 = np.asarray(pixels).astype(np.float64, copy=False)
    og = np.asarray(out_grad, dtype=np.float64)
    out_h, out_w = og.shape
    h, w = p64.shape
    rows = _rows_of(matrix)
    a11, a12, _, a21, a22, _ = rows
    x, y, u, v = _source_coords(rows, h, w, out_h, out_w)
    if padding == "edge":
        inside_x = (x > 0.0) & (x < w - 1.0)
        inside_y = (y > 0.0) & (y < h - 1.0)
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    xf = np.floor(x)
    yf = np.floor(y)
    x0 = np.where(x == xf, xf - 1.0, xf)  # left interval at exact integers
    y0 = np.where(y == yf, yf - 1.0, yf)
    wx = x - x0
    wy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    v00 = _gather(p64, y0i, x0i)
    v10 = _gather(p64, y0i, x0i + 1)
    v01 = _gather(p64, y0i + 1, x0i)
    v11 = _gather(p64, y0i + 1, x0i + 1)
    dvdx = (1.0 - wy) * (v10 - v00) + wy * (v11 - v01)
    dvdy = (1.0 - wx) * (v01 - v00) + wx * (v11 - v10)
    if padding == "edge":
        dvdx = dvdx * inside_x
        dvdy = dvdy * inside_y
    # dx_pix/dtx = (w/2) * d(a13)/dtx = 1; same for ty vertically
    g_tx = float(np.sum(og * dvdx))
    g_ty = float(np.sum(og * dvdy))
    # normalized target coordinates
    x_t = u / out_w
    y_t = v / out_h
    dxdt = (w / 2.0) * (a12 * x_t[None, :] - a11 * y_t[:, None])
    dydt = (h / 2.0) * (a22 * x_t[None, :] - a21 * y_t[:, None])
    g_theta = float(np.sum(og * (dvdx * dxdt + dvdy * dydt)))
    return g_tx, g_ty, g_theta


def grid_sample(
    image: GrayImage, matrix: AffineMatrix, out_h: int = 448, out_w: int = 448, padding: str = "zero"
) -> GrayImage:
    """Sample an aligned crop of ``image`` through ``matrix``."""
    return GrayImage(sample_array(image.pixels, matrix, out_h, out_w, padding))


def grid_sample_backward(image: GrayImage, matrix: AffineMatrix, out_grad) -> tuple[float, float, float]:
    """Parameter gradients (tx, ty, theta) for sum(grid_sample(...) * out_grad)."""
    return sample_backward_array(image.pixels, matrix, out_grad)


# --- pixel-space motion helpers ----------------------------------------------


def pixel_affine(m, w_in: int, h_in: int, out_h: int, out_w: int) -> AffineMatrix:
    """Convert a 2x3 target->source *pixel* affine to normalized form.

    ``m`` maps target pixel coordinates (centers at integers) to source
    pixel coordinates: x_s = m00*x_t + m01*y_t + m02, y_s likewise.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 3):
        raise ValidationError(f"pixel affine must be 2x3, got {m.shape}")
    (m00, m01, m02), (m10, m11, m12) = m
    a11 = m00 * out_w / w_in
    a12 = m01 * out_h / w_in
    a13 = (m00 * (out_w - 1) + m01 * (out_h - 1) + 2.0 * m02 + 1.0) / w_in - 1.0
    a21 = m10 * out_w / h_in
    a22 = m11 * out_h / h_in
    a23 = (m10 * (out_w - 1) + m11 * (out_h - 1) + 2.0 * m12 + 1.0) / h_in - 1.0
    return AffineMatrix(a11, a12, a13, a21, a22, a23)


def rotate_points(xs, ys, angle: float, cx: float, cy: float, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0):
    """Forward rigid/similarity motion of points about (cx, cy).

    A point p maps to c + (dx, dy) + scale * R(angle) (p - c). Matches the
    image motion applied by warp_rigid.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    rx = xs - cx
    ry = ys - cy
    return cx + dx + scale * (c * rx - s * ry), cy + dy + scale * (s * rx + c * ry)


def warp_rigid(pixels, angle: float, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0, padding: str = "zero"):
    """Move image content by a forward rigid/similarity motion about center.

    Content at source point p lands at c + (dx, dy) + scale*R(angle)(p - c);
    identity parameters return the input unchanged (no resampling).
    """
    p = np.asarray(pixels)
    if angle == 0.0 and dx == 0.0 and dy == 0.0 and scale == 1.0:
        return p.copy()
    if scale <= 0:
        raise DomainError(f"scale must be positive, got {scale}")
    h, w = p.shape
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    ox = cx + dx
    oy = cy + dy
    m = np.array(
        [
            [c / scale, s / scale, cx - (c * ox + s * oy) / scale],
            [-s / scale, c / scale, cy - (-s * ox + c * oy) / scale],
        ]
    )
    return sample_array(p, pixel_affine(m, w, h, h, w), h, w, padding)


# --- image file I/O -----------------------------------------------------------


def read_image(path: str | Path) -> GrayImage:
    """Read an 8-bit grayscale PNG or PGM; values map to [0, 1] by /255."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"cannot read image {path}: {e}") from e
    return GrayImage(arr.astype(np.float32) / 255.0)


def write_image(image: GrayImage, path: str | Path) -> None:
    """Write as 8-bit grayscale; format chosen by suffix (.png or .pgm)."""
    path = Path(path)
    fmt = _PIL_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ValidationError(f"unsupported image suffix {path.suffix!r} (use .png or .pgm)")
    arr = np.clip(image.pixels, 0.0, 1.0)
    arr = np.rint(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())
