"""Deterministic generator of labeled fingerprint-like synthetic data.

An identity is a smooth ridge-orientation field, a ridge frequency, and a
master minutiae set.  Rendering draws an oriented sinusoid of the field
whose phase is locally disturbed around each minutia, which is what lets
a map-prediction objective find the minutiae in the pixels.  Impressions
perturb a master rendering with a rigid motion, additive Gaussian noise,
and a brightness offset; the ground-truth minutiae ride along under the
same rigid motion.

Everything here is a pure function of its seeds, so datasets can be
regenerated bit-identically from a manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError, FormatError
from .minutiae_map import Minutia, MinutiaeTemplate, read_mnt, write_mnt
from .spatial_transform import GrayImage, read_image, rotate_points, warp_rigid, write_image
from ._io import atomic_write_text

TWO_PI = 2.0 * math.pi

MIN_MINUTIAE = 15
MAX_MINUTIAE = 40
RIDGE_FREQ_RANGE = (0.08, 0.12)

# width (in pixels) of the Gaussian phase disturbance around a minutia
ANOMALY_RADIUS = 2.5
# minutiae stay this far from the border so moderate motions keep them in frame
PLACEMENT_MARGIN = 6.0

# hard caps on the perturbation model; alignment stays learnable inside these
MAX_ROTATION_DEG = 20.0
MAX_TRANSLATION_PX = 10.0
MAX_NOISE_SIGMA = 0.05
MAX_BRIGHTNESS = 0.1

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "fixedprint-dataset"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticIdentity:
    """One synthetic finger: orientation field, frequency, master minutiae."""

    id: str
    master_minutiae: MinutiaeTemplate
    orientation_field: np.ndarray
    ridge_frequency: float

    def __post_init__(self):
        field = np.asarray(self.orientation_field, dtype=np.float64)
        if field.ndim != 2:
            raise ValidationError("orientation field must be 2-d")
        if not np.isfinite(field).all():
            raise ValidationError("orientation field contains non-finite values")
        if field.min() < 0.0 or field.max() >= math.pi:
            raise ValidationError("orientation field values must lie in [0, pi)")
        if len(self.master_minutiae) == 0:
            raise ValidationError("identity needs a non-empty master minutiae set")
        if not (0.0 < self.ridge_frequency < 0.5):
            raise ValidationError(f"ridge frequency {self.ridge_frequency} not in (0, 0.5)")
        field = field.copy()
        field.flags.writeable = False
        object.__setattr__(self, "orientation_field", field)

    @property
    def height(self) -> int:
        return self.orientation_field.shape[0]

    @property
    def width(self) -> int:
        return self.orientation_field.shape[1]


@dataclass(frozen=True)
class PerturbationConfig:
    """Bounds for the per-impression perturbation draws.

    Rotation/translation are sampled uniformly in +-bound, noise is
    additive Gaussian with the given sigma, brightness is a uniform
    +-bound offset.  All-zero bounds reproduce the master rendering
    bit-exactly.
    """

    max_rotation_deg: float = 15.0
    max_translation_px: float = 8.0
    noise_sigma: float = 0.03
    max_brightness: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.max_rotation_deg <= MAX_ROTATION_DEG):
            raise ValidationError(
                f"rotation bound {self.max_rotation_deg} outside [0, {MAX_ROTATION_DEG}] deg"
            )
        if not (0.0 <= self.max_translation_px <= MAX_TRANSLATION_PX):
            raise ValidationError(
                f"translation bound {self.max_translation_px} outside [0, {MAX_TRANSLATION_PX}] px"
            )
        if not (0.0 <= self.noise_sigma <= MAX_NOISE_SIGMA):
            raise ValidationError(
                f"noise sigma {self.noise_sigma} outside [0, {MAX_NOISE_SIGMA}]"
            )
        if not (0.0 <= self.max_brightness <= MAX_BRIGHTNESS):
            raise ValidationError(
                f"brightness bound {self.max_brightness} outside [0, {MAX_BRIGHTNESS}]"
            )


ZERO_PERTURBATION = PerturbationConfig(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ImpressionParams:
    """The perturbation actually applied to one impression."""

    rotation_rad: float
    dx: float
    dy: float
    brightness: float
    noise_sigma: float
    seed: int


@dataclass(frozen=True)
class Impression:
    """A rendered, perturbed view of one identity with ground truth."""

    image: GrayImage
    minutiae: MinutiaeTemplate
    label: int
    params: ImpressionParams


@dataclass(frozen=True)
class Dataset:
    """Deterministic train/holdout split of rendered impressions."""

    train: tuple[Impression, ...]
    holdout: tuple[Impression, ...]
    identities: tuple[SyntheticIdentity, ...]
    seed: int
    impressions_per_class: int
    image_size: int
    perturbation: PerturbationConfig

    @property
    def num_classes(self) -> int:
        return len(self.identities)


# ---------------------------------------------------------------------------
# Identity generation
# ---------------------------------------------------------------------------


def _harmonic_orientation_field(rng, size: int) -> np.ndarray:
    """Smooth angle grid in [0, pi) from a low-order complex harmonic mix.

    The doubled-angle trick keeps the field pi-periodic and smooth: a
    random complex field z with a few low spatial frequencies is built,
    and the orientation is arg(z) / 2.
    """
    u = np.arange(size, dtype=np.float64)[None, :] / size
    v = np.arange(size, dtype=np.float64)[:, None] / size
    z = np.zeros((size, size), dtype=np.complex128)
    # constant term keeps z away from 0 over most of the frame
    z += rng.normal(0.0, 1.0) + 1j * rng.normal(0.0, 1.0)
    for p in (-2, -1, 0, 1, 2):
        for q in (-2, -1, 0, 1, 2):
            if p == 0 and q == 0:
                continue
            amp = rng.normal(0.0, 0.5) + 1j * rng.normal(0.0, 0.5)
            z += amp * np.exp(2j * math.pi * (p * u + q * v))
    phi = (np.angle(z) % TWO_PI) / 2.0
    return np.where(phi >= math.pi, 0.0, phi)


def gen_identity(seed, size: int = 64, name: str | None = None) -> SyntheticIdentity:
    """Draws a synthetic identity as a pure function of the seed.

    Args:
        seed: Anything ``np.random.default_rng`` accepts.
        size: Side length of the square frame in pixels.
        name: Identifier; defaults to ``subject_<seed>``.

    Returns:
        SyntheticIdentity with 15-40 master minutiae whose directions
        follow the local orientation field up to a random half-turn flip.
    """
    if size < 16:
        raise ValidationError(f"frame size {size} too small to place minutiae")
    rng = np.random.default_rng(seed)
    field = _harmonic_orientation_field(rng, size)
    freq = float(rng.uniform(*RIDGE_FREQ_RANGE))
    count = int(rng.integers(MIN_MINUTIAE, MAX_MINUTIAE + 1))
    xs = rng.uniform(PLACEMENT_MARGIN, size - PLACEMENT_MARGIN, count)
    ys = rng.uniform(PLACEMENT_MARGIN, size - PLACEMENT_MARGIN, count)
    flips = rng.integers(0, 2, count)
    minutiae = []
    for x, y, flip in zip(xs, ys, flips):
        local = field[int(y), int(x)]
        minutiae.append(Minutia(float(x), float(y), float(local + math.pi * flip)))
    return SyntheticIdentity(
        id=name if name is not None else f"subject_{seed}",
        master_minutiae=MinutiaeTemplate(tuple(minutiae), w_img=size, h_img=size),
        orientation_field=field,
        ridge_frequency=freq,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_master(identity: SyntheticIdentity) -> np.ndarray:
    """Renders the unperturbed ridge pattern of an identity.

    The value at pixel (i, j) is ``0.5 * (1 + cos(2*pi*f*(x*cos(phi) +
    y*sin(phi)) + phase))`` where phi is the local orientation and phase
    accumulates a pi-high Gaussian bump around every master minutia.
    """
    h, w = identity.orientation_field.shape
    x = np.arange(w, dtype=np.float64)[None, :]
    y = np.arange(h, dtype=np.float64)[:, None]
    phi = identity.orientation_field
    phase = np.zeros((h, w), dtype=np.float64)
    inv = 1.0 / (2.0 * ANOMALY_RADIUS * ANOMALY_RADIUS)
    for m in identity.master_minutiae.minutiae:
        d2 = (x - m.x) ** 2 + (y - m.y) ** 2
        phase += math.pi * np.exp(-d2 * inv)
    carrier = TWO_PI * identity.ridge_frequency * (x * np.cos(phi) + y * np.sin(phi))
    return (0.5 * (1.0 + np.cos(carrier + phase))).astype(np.float32)


def render_impression(
    identity: SyntheticIdentity,
    seed,
    config: PerturbationConfig | None = None,
    label: int = 0,
) -> Impression:
    """Renders one perturbed impression of an identity.

    Draws a rigid motion, noise, and brightness offset from the seed,
    applies the motion to the master rendering and to the master
    minutiae alike, drops minutiae that leave the frame, and clamps
    pixels to [0, 1].  Zero perturbation bounds reproduce the master
    rendering and minutiae exactly.
    """
    if config is None:
        config = PerturbationConfig()
    rng = np.random.default_rng(seed)
    max_rot = math.radians(config.max_rotation_deg)
    rotation = float(rng.uniform(-max_rot, max_rot)) if max_rot > 0 else 0.0
    bound = config.max_translation_px
    dx = float(rng.uniform(-bound, bound)) if bound > 0 else 0.0
    dy = float(rng.uniform(-bound, bound)) if bound > 0 else 0.0
    brightness = (
        float(rng.uniform(-config.max_brightness, config.max_brightness))
        if config.max_brightness > 0
        else 0.0
    )

    master = render_master(identity)
    pixels = warp_rigid(master, rotation, dx, dy)  # identity motion short-circuits
    if config.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, config.noise_sigma, pixels.shape)
    if brightness != 0.0:
        pixels = pixels + brightness
    if config.noise_sigma > 0 or brightness != 0.0:
        pixels = np.clip(pixels, 0.0, 1.0)

    moved = transform_minutiae(identity.master_minutiae, rotation, dx, dy)
    return Impression(
        image=GrayImage(np.asarray(pixels, dtype=np.float32)),
        minutiae=moved,
        label=label,
        params=ImpressionParams(
            rotation_rad=rotation,
            dx=dx,
            dy=dy,
            brightness=brightness,
            noise_sigma=config.noise_sigma,
            seed=int(seed),
        ),
    )


def transform_minutiae(
    template: MinutiaeTemplate, rotation: float, dx: float, dy: float, scale: float = 1.0
) -> MinutiaeTemplate:
    """Applies an impression's rigid/similarity motion to a minutiae set.

    Points move with the image content (scaled rotation about the frame
    center, then translation); directions turn by the rotation angle.
    Points landing outside the frame are dropped.
    """
    w, h = template.w_img, template.h_img
    if not template.minutiae:
        return MinutiaeTemplate((), w_img=w, h_img=h)
    if rotation == 0.0 and dx == 0.0 and dy == 0.0 and scale == 1.0:
        return template
    xs = np.array([m.x for m in template.minutiae])
    ys = np.array([m.y for m in template.minutiae])
    if rotation == 0.0 and scale == 1.0:  # pure translation shifts exactly
        nx, ny = xs + dx, ys + dy
    else:
        nx, ny = rotate_points(
            xs, ys, rotation, (w - 1) / 2.0, (h - 1) / 2.0, dx, dy, scale
        )
    kept = []
    for x, y, m in zip(nx, ny, template.minutiae):
        if 0.0 <= x < w and 0.0 <= y < h:
            kept.append(Minutia(float(x), float(y), m.theta + rotation))
    return MinutiaeTemplate(tuple(kept), w_img=w, h_img=h)


# ---------------------------------------------------------------------------
# Dataset assembly and persistence
# ---------------------------------------------------------------------------


def _derive_seeds(seed: int, num_classes: int, impressions_per_class: int):
    """Deterministic (identity seeds, impression seeds) for one dataset seed."""
    rng = np.random.default_rng(seed)
    id_seeds = rng.integers(0, 2**62, size=num_classes, dtype=np.int64)
    imp_seeds = rng.integers(
        0, 2**62, size=(num_classes, impressions_per_class), dtype=np.int64
    )
    return id_seeds, imp_seeds


def make_dataset(
    num_classes: int,
    impressions_per_class: int,
    seed: int,
    size: int = 64,
    config: PerturbationConfig | None = None,
) -> Dataset:
    """Builds a deterministic labeled dataset with a per-class holdout.

    The last impression of every class is reserved for evaluation, so
    ``(20, 8, seed)`` yields 140 training and 20 holdout impressions.
    """
    if num_classes < 2:
        raise ValidationError("need at least 2 classes")
    if impressions_per_class < 2:
        raise ValidationError("need at least 2 impressions per class")
    if config is None:
        config = PerturbationConfig()
    id_seeds, imp_seeds = _derive_seeds(seed, num_classes, impressions_per_class)
    identities = []
    train = []
    holdout = []
    for k in range(num_classes):
        identity = gen_identity(int(id_seeds[k]), size=size, name=f"class_{k:03d}")
        identities.append(identity)
        for j in range(impressions_per_class):
            imp = render_impression(identity, int(imp_seeds[k, j]), config, label=k)
            if j == impressions_per_class - 1:
                holdout.append(imp)
            else:
                train.append(imp)
    return Dataset(
        train=tuple(train),
        holdout=tuple(holdout),
        identities=tuple(identities),
        seed=int(seed),
        impressions_per_class=int(impressions_per_class),
        image_size=int(size),
        perturbation=config,
    )


def write_dataset(dataset: Dataset, root) -> None:
    """Writes `class_<k>/imp_<j>.pgm` + `.mnt` files plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    per_class: dict[int, int] = {}
    for split, impressions in (("train", dataset.train), ("holdout", dataset.holdout)):
        for imp in impressions:
            j = per_class.get(imp.label, 0)
            per_class[imp.label] = j + 1
            cls_dir = root / f"class_{imp.label:03d}"
            cls_dir.mkdir(exist_ok=True)
            stem = f"imp_{j}"
            write_image(imp.image, cls_dir / f"{stem}.pgm")
            write_mnt(imp.minutiae, cls_dir / f"{stem}.mnt")
            entries.append(
                {
                    "class": imp.label,
                    "class_id": dataset.identities[imp.label].id,
                    "file": f"class_{imp.label:03d}/{stem}.pgm",
                    "mnt": f"class_{imp.label:03d}/{stem}.mnt",
                    "split": split,
                    "params": asdict(imp.params),
                }
            )
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "num_classes": dataset.num_classes,
        "impressions_per_class": dataset.impressions_per_class,
        "image_size": dataset.image_size,
        "perturbation": asdict(dataset.perturbation),
        "impressions": entries,
    }
    atomic_write_text(root / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")


def load_dataset(root) -> Dataset:
    """Reads a dataset directory back into memory.

    Images round-trip through 8-bit PGM, so pixel values are quantized
    to 1/255 steps relative to the generated dataset; minutiae and
    params round-trip exactly.  Identities are regenerated from the
    manifest seed, bit-identical to the original generation.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable manifest: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError("manifest is not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')}")

    config = PerturbationConfig(**manifest["perturbation"])
    id_seeds, _ = _derive_seeds(
        manifest["seed"], manifest["num_classes"], manifest["impressions_per_class"]
    )
    identities = tuple(
        gen_identity(int(id_seeds[k]), size=manifest["image_size"], name=f"class_{k:03d}")
        for k in range(manifest["num_classes"])
    )
    train = []
    holdout = []
    for entry in manifest["impressions"]:
        imp = Impression(
            image=read_image(root / entry["file"]),
            minutiae=read_mnt(root / entry["mnt"]),
            label=int(entry["class"]),
            params=ImpressionParams(**entry["params"]),
        )
        (train if entry["split"] == "train" else holdout).append(imp)
    return Dataset(
        train=tuple(train),
        holdout=tuple(holdout),
        identities=identities,
        seed=manifest["seed"],
        impressions_per_class=manifest["impressions_per_class"],
        image_size=manifest["image_size"],
        perturbation=config,
    )
