"""Minutiae-map encoding: variable-length minutiae sets to fixed-size heatmaps.

A minutiae template is an ordered set of (x, y, theta) points taken from a
fingerprint image. ``encode_map`` rasterizes the set into an
``h_map x w_map x c`` grid: every minutia adds, at every cell, a Gaussian
spatial contribution (distance from the minutia to the cell center) times
an orientation contribution (circular distance from the minutia direction
to the channel's bin center). ``peak_extract`` approximately inverts the
encoding and doubles as the round-trip oracle in the tests.

Conventions:

* Cell (i, j) of the map has its center at (x, y) = (j + 0.5, i + 0.5) in
  map-cell units; minutia pixel coordinates are scaled by
  (w_map / w_img, h_map / h_img) before encoding, so the map is independent
  of the source resolution.
* Channel k covers direction 2*pi*k/c. The orientation falloff divides the
  plain (unsquared) circular distance by 2*sigma_o**2.
* Accumulation runs in float64 in template order; storage is float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fixedprint._io import atomic_write_bytes
from fixedprint.errors import DomainError, FormatError, ValidationError

TWO_PI = 2.0 * math.pi

MNT_MAGIC = "MNT"
MAP_MAGIC = "MAP"


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class Minutia:
    """A single minutia: location in image pixels and direction in radians.

    x runs rightward from the top-left origin, y downward. theta is a full
    direction (period 2*pi, unlike a pi-periodic ridge orientation) and is
    reduced into [0, 2*pi) on construction.
    """

    x: float
    y: float
    theta: float

    def __post_init__(self):
        x, y, theta = float(self.x), float(self.y), float(self.theta)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(theta)):
            raise DomainError(f"non-finite minutia ({self.x}, {self.y}, {self.theta})")
        theta = theta % TWO_PI
        if theta >= TWO_PI:  # % can round up to the modulus itself
            theta = 0.0
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta", theta)


@dataclass(frozen=True)
class MinutiaeTemplate:
    """An ordered minutiae set plus the dimensions of the source image."""

    minutiae: tuple[Minutia, ...]
    w_img: int = 448
    h_img: int = 448

    def __post_init__(self):
        object.__setattr__(self, "minutiae", tuple(self.minutiae))
        if int(self.w_img) < 1 or int(self.h_img) < 1:
            raise ValidationError(f"image dims must be positive, got {self.w_img}x{self.h_img}")
        object.__setattr__(self, "w_img", int(self.w_img))
        object.__setattr__(self, "h_img", int(self.h_img))
        for m in self.minutiae:
            if not (0.0 <= m.x < self.w_img and 0.0 <= m.y < self.h_img):
                raise ValidationError(
                    f"minutia ({m.x}, {m.y}) outside image {self.w_img}x{self.h_img}"
                )

    def __len__(self) -> int:
        return len(self.minutiae)


@dataclass(frozen=True)
class MapConfig:
    """Geometry and bandwidths of the encoded map.

    sigma_s is the spatial Gaussian bandwidth in map cells. sigma_o is the
    orientation bandwidth; None means "use sigma_s". truncation_radius is
    in multiples of sigma_s: cells farther than that from a minutia skip
    its contribution. A non-positive radius disables truncation entirely
    (exact brute-force mode). The default 6.5 keeps each skipped tail below
    7e-10 so truncated and exact maps agree to well under 1e-6 even after
    float32 storage rounding.
    """

    h_map: int = 128
    w_map: int = 128
    c: int = 6
    sigma_s: float = 2.0
    sigma_o: float | None = None
    truncation_radius: float = 6.5

    def __post_init__(self):
        if self.h_map < 1 or self.w_map < 1 or self.c < 1:
            raise ValidationError(f"map dims must be positive, got {self.h_map}x{self.w_map}x{self.c}")
        if not (math.isfinite(self.sigma_s) and self.sigma_s > 0):
            raise DomainError(f"sigma_s must be positive and finite, got {self.sigma_s}")
        sigma_o = self.sigma_s if self.sigma_o is None else float(self.sigma_o)
        if not (math.isfinite(sigma_o) and sigma_o > 0):
            raise DomainError(f"sigma_o must be positive and finite, got {self.sigma_o}")
        object.__setattr__(self, "sigma_o", sigma_o)
        if not math.isfinite(self.truncation_radius):
            raise DomainError(f"truncation_radius must be finite, got {self.truncation_radius}")


@dataclass(frozen=True)
class MinutiaeMap:
    """An encoded map: (h_map, w_map, c) float32 values plus its config."""

    values: np.ndarray
    config: MapConfig

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        expected = (self.config.h_map, self.config.w_map, self.config.c)
        if v.shape != expected:
            raise ValidationError(f"map shape {v.shape} does not match config {expected}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("map contains non-finite values")
        if np.any(v < 0):
            raise ValidationError("map contains negative values")
        v = v.copy() if v.flags.writeable else v
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


# --- contribution kernels ---------------------------------------------------


def orientation_diff(theta1: float, theta2: float) -> float:
    """Minimal angular distance between two directions on the 2*pi circle.

    Accepts any finite reals (reduced modulo 2*pi); the result is in
    [0, pi] and symmetric in its arguments.
    """
    if not (math.isfinite(theta1) and math.isfinite(theta2)):
        raise DomainError(f"non-finite angle ({theta1}, {theta2})")
    d = abs(float(theta1) - float(theta2)) % TWO_PI
    return d if d <= math.pi else TWO_PI - d


def _orientation_diff_grid(theta: float, centers: np.ndarray) -> np.ndarray:
    d = np.abs(theta - centers) % TWO_PI
    return np.minimum(d, TWO_PI - d)


def spatial_contribution(mx: float, my: float, i: int, j: int, sigma_s: float) -> float:
    """Gaussian falloff from a minutia (map-cell coordinates) to cell (i, j).

    Cell (i, j) has center (j + 0.5, i + 0.5); the exponent is the squared
    Euclidean distance over 2*sigma_s**2.
    """
    if not (math.isfinite(mx) and math.isfinite(my)):
        raise DomainError(f"non-finite minutia position ({mx}, {my})")
    if not (math.isfinite(sigma_s) and sigma_s > 0):
        raise DomainError(f"sigma_s must be positive and finite, got {sigma_s}")
    dx = mx - (j + 0.5)
    dy = my - (i + 0.5)
    return math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s))


def orientation_contribution(theta: float, k: int, c: int, sigma_o: float) -> float:
    """Orientation falloff from direction theta to channel k's bin 2*pi*k/c.

    The exponent divides the plain circular distance (not its square) by
    2*sigma_o**2, so sigma_o acts on an angle rather than an angle squared.
    """
    if c < 1 or not 0 <= k < c:
        raise DomainError(f"channel k={k} outside [0, {c})")
    if not (math.isfinite(sigma_o) and sigma_o > 0):
        raise DomainError(f"sigma_o must be positive and finite, got {sigma_o}")
    return math.exp(-orientation_diff(theta, TWO_PI * k / c) / (2.0 * sigma_o * sigma_o))


# --- encoding ---------------------------------------------------------------


def encode_map(template: MinutiaeTemplate, config: MapConfig | None = None) -> MinutiaeMap:
    """Encode a minutiae template into an (h_map, w_map, c) heatmap.

    Each cell accumulates, over minutiae in template order, the product of
    the spatial and orientation contributions. With a positive
    truncation_radius, cells farther than radius*sigma_s from a minutia
    skip that minutia (the dropped tail is below exp(-radius**2 / 2) per
    minutia); a non-positive radius evaluates every cell exactly.

    An empty template yields the all-zero map.
    """
    cfg = config if config is not None else MapConfig()
    h, w, c = cfg.h_map, cfg.w_map, cfg.c
    acc = np.zeros((h, w, c), dtype=np.float64)
    if len(template) == 0:
        return MinutiaeMap(acc.astype(np.float32), cfg)

    sx = w / template.w_img
    sy = h / template.h_img
    centers_x = np.arange(w, dtype=np.float64) + 0.5
    centers_y = np.arange(h, dtype=np.float64) + 0.5
    bin_centers = TWO_PI * np.arange(c, dtype=np.float64) / c
    inv_2ss = 1.0 / (2.0 * cfg.sigma_s * cfg.sigma_s)
    inv_2so = 1.0 / (2.0 * cfg.sigma_o * cfg.sigma_o)
    radius = cfg.truncation_radius * cfg.sigma_s if cfg.truncation_radius > 0 else None

    for m in template.minutiae:
        mx = m.x * sx
        my = m.y * sy
        if radius is None:
            i0, i1, j0, j1 = 0, h - 1, 0, w - 1
        else:
            j0 = max(0, int(math.floor(mx - 0.5 - radius)))
            j1 = min(w - 1, int(math.ceil(mx - 0.5 + radius)))
            i0 = max(0, int(math.floor(my - 0.5 - radius)))
            i1 = min(h - 1, int(math.ceil(my - 0.5 + radius)))
            if j0 > j1 or i0 > i1:
                continue
        dx = mx - centers_x[j0 : j1 + 1]
        dy = my - centers_y[i0 : i1 + 1]
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        cs = np.exp(-d2 * inv_2ss)
        if radius is not None:
            cs[d2 > radius * radius] = 0.0
        co = np.exp(-_orientation_diff_grid(m.theta, bin_centers) * inv_2so)
        acc[i0 : i1 + 1, j0 : j1 + 1, :] += cs[:, :, None] * co[None, None, :]

    return MinutiaeMap(acc.astype(np.float32), cfg)


def peak_extract(
    mmap: MinutiaeMap, threshold: float, w_img: int = 448, h_img: int = 448
) -> MinutiaeTemplate:
    """Recover a minutiae template from map peaks (approximate inverse).

    A peak is a cell with value >= threshold that is at least as large as
    its full 3x3 spatial by channel-adjacent (cyclic in k) neighborhood.
    Within an exact-tie plateau only the first cell in scan order is kept.
    Peaks map back to image pixels at cell centers and channel-center
    directions, so positions are quantized to one map cell and directions
    to pi/c.
    """
    if not (math.isfinite(threshold) and 0.0 < threshold <= 1.0):
        raise DomainError(f"threshold must be in (0, 1], got {threshold}")
    H = mmap.values
    h, w, c = H.shape

    padded = np.full((h + 2, w + 2, c), -np.inf, dtype=H.dtype)
    padded[1:-1, 1:-1, :] = H
    neigh = np.full_like(H, -np.inf)
    for dk in (-1, 0, 1):
        rolled = np.roll(padded, dk, axis=2)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if dk == 0 and di == 0 and dj == 0:
                    continue
                shifted = rolled[1 + di : 1 + di + h, 1 + dj : 1 + dj + w, :]
                np.maximum(neigh, shifted, out=neigh)

    cand = (H >= threshold) & (H >= neigh)
    idx = np.argwhere(cand)  # scan order (i, j, k)

    # exact-tie plateaus keep only the scan-order-first cell
    accepted_mask = np.zeros_like(cand)
    out = []
    for i, j, k in idx:
        tied = False
        for dk in (-1, 0, 1):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if dk == 0 and di == 0 and dj == 0:
                        continue
                    ii, jj, kk = i + di, j + dj, (k + dk) % c
                    if 0 <= ii < h and 0 <= jj < w:
                        if accepted_mask[ii, jj, kk] and H[ii, jj, kk] == H[i, j, k]:
                            tied = True
        if tied:
            continue
        accepted_mask[i, j, k] = True
        out.append(
            Minutia(
                x=(j + 0.5) * w_img / w,
                y=(i + 0.5) * h_img / h,
                theta=TWO_PI * k / c,
            )
        )
    return MinutiaeTemplate(tuple(out), w_img=w_img, h_img=h_img)


# --- text / binary formats --------------------------------------------------


def write_mnt(template: MinutiaeTemplate, path: str | Path) -> None:
    """Write a template as text: ``MNT <w> <h> <n>`` then ``x y theta`` lines."""
    lines = [f"{MNT_MAGIC} {template.w_img} {template.h_img} {len(template)}"]
    for m in template.minutiae:
        lines.append(f"{m.x!r} {m.y!r} {m.theta!r}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_mnt(path: str | Path) -> MinutiaeTemplate:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read minutiae file {path}: {e}") from e
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty minutiae file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != MNT_MAGIC:
        raise FormatError(f"{path}: bad header {lines[0]!r}")
    try:
        w_img, h_img, n = int(head[1]), int(head[2]), int(head[3])
    except ValueError as e:
        raise FormatError(f"{path}: bad header fields {lines[0]!r}") from e
    if n != len(lines) - 1:
        raise FormatError(f"{path}: header says {n} minutiae, found {len(lines) - 1}")
    minutiae = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise FormatError(f"{path}: bad minutia line {ln!r}")
        try:
            x, y, theta = (float(p) for p in parts)
        except ValueError as e:
            raise FormatError(f"{path}: bad minutia line {ln!r}") from e
        minutiae.append(Minutia(x, y, theta))
    return MinutiaeTemplate(tuple(minutiae), w_img=w_img, h_img=h_img)


def write_map_dump(mmap: MinutiaeMap, path: str | Path) -> None:
    """Write a map as ``MAP <h> <w> <c> <sigma_s> <sigma_o>`` + LE float32 cells.

    Payload is row-major, channel-last.
    """
    cfg = mmap.config
    header = f"{MAP_MAGIC} {cfg.h_map} {cfg.w_map} {cfg.c} {cfg.sigma_s!r} {cfg.sigma_o!r}\n"
    atomic_write_bytes(path, header.encode("ascii") + mmap.values.astype("<f4").tobytes())


def read_map_dump(path: str | Path) -> MinutiaeMap:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        head = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: undecodable header") from e
    if len(head) != 6 or head[0] != MAP_MAGIC:
        raise FormatError(f"{path}: bad header {data[:nl]!r}")
    try:
        h, w, c = int(head[1]), int(head[2]), int(head[3])
        sigma_s, sigma_o = float(head[4]), float(head[5])
    except ValueError as e:
        raise FormatError(f"{path}: bad header fields") from e
    payload = data[nl + 1 :]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    try:
        cfg = MapConfig(h_map=h, w_map=w, c=c, sigma_s=sigma_s, sigma_o=sigma_o)
        return MinutiaeMap(values, cfg)
    except (DomainError, ValidationError) as e:
        raise FormatError(f"{path}: {e}") from e
