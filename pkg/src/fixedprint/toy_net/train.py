"""Training loops: the joint multitask objective and distillation.

train() runs epochs of shuffled minibatches with optional on-the-fly
augmentation; every augmented sample gets its ground-truth map re-encoded
from the moved minutiae, so the map target always matches the pixels.
distill() regresses a student's fused embedding onto precomputed teacher
embeddings with a plain L2 objective (no augmentation, dropout, or weight
decay — the student only has to copy the teacher on clean inputs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import TrainingDivergedError, ValidationError
from ..minutiae_map import MapConfig, encode_map
from ..spatial_transform import GrayImage, warp_rigid
from ..synth_data import transform_minutiae
from ..template import BranchEmbedding, FixedTemplate, fuse
from .net import (
    LossTerms,
    NetConfig,
    NetParams,
    _backward_core,
    backward,
    forward,
    init_params,
    loss,
)
from .optim import init_opt_state, rmsprop_step

DEFAULT_MAP_SIGMA = 1.0
EMBED_CHUNK = 64


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """One minibatch: images, class labels, ground-truth minutiae maps."""

    images: np.ndarray
    labels: np.ndarray
    gt_maps: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels)
        gt_maps = np.asarray(self.gt_maps)
        if images.ndim != 3:
            raise ValidationError(f"batch images must be (B, h, w), got {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise ValidationError("labels must be one integer per image")
        if labels.size and labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        if gt_maps.ndim != 4 or gt_maps.shape[0] != images.shape[0]:
            raise ValidationError(
                f"gt_maps must be (B, map_h, map_w, map_c), got {gt_maps.shape}"
            )
        if not np.isfinite(images).all() or not np.isfinite(gt_maps).all():
            raise ValidationError("batch contains non-finite values")
        if gt_maps.size and gt_maps.min() < 0:
            raise ValidationError("ground-truth maps must be non-negative")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "gt_maps", gt_maps)

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class AugmentConfig:
    """On-the-fly perturbation bounds for training samples."""

    max_rotation_deg: float = 15.0
    max_translation_px: float = 4.0
    max_brightness: float = 0.1
    max_zoom: float = 1.15

    def __post_init__(self):
        if self.max_rotation_deg < 0 or self.max_translation_px < 0:
            raise ValidationError("augmentation bounds must be non-negative")
        if self.max_brightness < 0:
            raise ValidationError("brightness bound must be non-negative")
        if self.max_zoom < 1.0:
            raise ValidationError("max_zoom must be >= 1 (crop-and-resize zooms in)")


def _augment_sample(impression, augment: AugmentConfig, rng):
    """Random rotate/translate/zoom/brighten one impression.

    Returns the new pixel array and the consistently moved minutiae.
    """
    rot = float(rng.uniform(-1.0, 1.0)) * math.radians(augment.max_rotation_deg)
    dx = float(rng.uniform(-augment.max_translation_px, augment.max_translation_px))
    dy = float(rng.uniform(-augment.max_translation_px, augment.max_translation_px))
    bright = float(rng.uniform(-augment.max_brightness, augment.max_brightness))
    zoom = float(rng.uniform(1.0, augment.max_zoom))
    pixels = warp_rigid(impression.image.pixels, rot, dx, dy, scale=zoom)
    if bright != 0.0:
        pixels = np.clip(pixels + bright, 0.0, 1.0)
    minutiae = transform_minutiae(impression.minutiae, rot, dx, dy, scale=zoom)
    return np.asarray(pixels, dtype=np.float32), minutiae


def make_batch(
    impressions,
    config: NetConfig,
    map_sigma: float = DEFAULT_MAP_SIGMA,
    augment: AugmentConfig | None = None,
    rng=None,
    base_maps=None,
) -> TrainBatch:
    """Assembles a TrainBatch, re-encoding maps for augmented samples.

    base_maps, when given, supplies the precomputed unaugmented map per
    impression (parallel to ``impressions``) to skip re-encoding.
    """
    map_cfg = MapConfig(
        h_map=config.map_h, w_map=config.map_w, c=config.map_c, sigma_s=map_sigma
    )
    images, labels, maps = [], [], []
    for i, imp in enumerate(impressions):
        if augment is not None:
            pixels, minutiae = _augment_sample(imp, augment, rng)
            gt = encode_map(minutiae, map_cfg).values
        else:
            pixels = imp.image.pixels
            gt = base_maps[i] if base_maps is not None else encode_map(
                imp.minutiae, map_cfg
            ).values
        images.append(pixels)
        labels.append(imp.label)
        maps.append(gt)
    return TrainBatch(
        images=np.stack(images), labels=np.asarray(labels), gt_maps=np.stack(maps)
    )


def _training_items(dataset):
    items = list(dataset.train) if hasattr(dataset, "train") else list(dataset)
    if not items:
        raise ValidationError("no training impressions")
    return items


def train(
    dataset,
    config: NetConfig,
    epochs: int,
    batch_size: int = 30,
    lr: float = 1e-3,
    rmsprop_decay: float = 0.9,
    epsilon: float = 1e-8,
    augment: AugmentConfig | None = AugmentConfig(),
    map_sigma: float = DEFAULT_MAP_SIGMA,
    seed: int | None = None,
    init: NetParams | None = None,
) -> tuple[NetParams, tuple[LossTerms, ...]]:
    """Trains the joint objective; returns final params and the loss curve.

    The curve holds one sample-weighted mean LossTerms per epoch.  A
    non-finite batch loss aborts with TrainingDivergedError carrying the
    epoch and term breakdown (the usual signal of a too-hot learning
    rate).
    """
    items = _training_items(dataset)
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    max_label = max(imp.label for imp in items)
    if max_label >= config.num_classes:
        raise ValidationError(
            f"dataset has label {max_label} but config.num_classes={config.num_classes}"
        )
    params = init_params(config) if init is None else init
    if init is not None and init.config != config:
        raise ValidationError("init params were built for a different config")
    state = init_opt_state(params, lr=lr, decay=rmsprop_decay, epsilon=epsilon)
    rng = np.random.default_rng(config.seed if seed is None else seed)

    base_maps = None
    if augment is None:
        map_cfg = MapConfig(
            h_map=config.map_h, w_map=config.map_w, c=config.map_c, sigma_s=map_sigma
        )
        base_maps = [encode_map(imp.minutiae, map_cfg).values for imp in items]

    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        sums = np.zeros(5)
        seen = 0
        for start in range(0, len(items), batch_size):
            idx = order[start : start + batch_size]
            picked = [items[i] for i in idx]
            maps = [base_maps[i] for i in idx] if base_maps is not None else None
            batch = make_batch(picked, config, map_sigma, augment, rng, base_maps=maps)
            outputs = forward(params, batch.images, train_mode=True, dropout_rng=rng)
            terms = loss(outputs, batch, params)
            if not math.isfinite(terms.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: ce1={terms.ce1} "
                    f"ce2={terms.ce2} map={terms.map_mse} decay={terms.decay} "
                    f"(lower the learning rate)"
                )
            grads = backward(params, batch, outputs)
            params = rmsprop_step(params, grads, state)
            n = batch.size
            sums += n * np.array(
                [terms.ce1, terms.ce2, terms.map_mse, terms.decay, terms.total]
            )
            seen += n
        curve.append(LossTerms(*(sums / seen)))
    return params, tuple(curve)


# ---------------------------------------------------------------------------
# Embedding extraction
# ---------------------------------------------------------------------------


def fused_embeddings(params: NetParams, images) -> np.ndarray:
    """Unit-norm fused embeddings, one row per image, in 64-bit.

    Inference mode (no dropout); chunked so large image sets stay
    memory-bounded.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    rows = []
    for start in range(0, images.shape[0], EMBED_CHUNK):
        outputs = forward(params, images[start : start + EMBED_CHUNK], train_mode=False)
        v = np.concatenate([outputs.x1, outputs.x2], axis=1).astype(np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise TrainingDivergedError("embedding collapsed to the zero vector")
        rows.append(v / norms)
    return np.concatenate(rows, axis=0)


def extract_embedding(params: NetParams, image) -> FixedTemplate:
    """Inference-mode forward of one image, fused into a FixedTemplate."""
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    if pixels.ndim != 2:
        raise ValidationError(f"expected one 2-d image, got shape {pixels.shape}")
    outputs = forward(params, pixels[None], train_mode=False)
    x1 = outputs.x1[0].astype(np.float32)
    x2 = outputs.x2[0].astype(np.float32)
    return fuse(BranchEmbedding(x1, "texture"), BranchEmbedding(x2, "minutiae"))


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def distill_pair_loss(target, predicted) -> float:
    """Per-sample distillation loss 0.5 * ||target - predicted||^2."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise ValidationError(f"embedding shapes differ: {t.shape} vs {p.shape}")
    return 0.5 * float(np.sum(np.square(t - p)))


def distill(
    teacher_params: NetParams,
    student_config: NetConfig,
    dataset,
    epochs: int,
    batch_size: int = 30,
    lr: float = 1e-3,
    rmsprop_decay: float = 0.9,
    epsilon: float = 1e-8,
    seed: int | None = None,
    init: NetParams | None = None,
) -> tuple[NetParams, tuple[float, ...]]:
    """Trains a student to reproduce the teacher's fused embeddings.

    Teacher embeddings over the training images are computed once; each
    epoch minimizes the mean per-sample 0.5*||x_t - x_s||^2 through the
    student's fuse normalization.  Returns the student and the per-epoch
    mean loss curve.
    """
    if student_config.embed_dim != teacher_params.config.embed_dim:
        raise ValidationError(
            "student embed_dim must match the teacher's "
            f"({student_config.embed_dim} vs {teacher_params.config.embed_dim})"
        )
    if (student_config.in_h, student_config.in_w) != (
        teacher_params.config.in_h,
        teacher_params.config.in_w,
    ):
        raise ValidationError("student and teacher must consume the same image size")
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    items = _training_items(dataset)
    images = np.stack([imp.image.pixels for imp in items])
    targets = fused_embeddings(teacher_params, images)

    student = init_params(student_config) if init is None else init
    state = init_opt_state(student, lr=lr, decay=rmsprop_decay, epsilon=epsilon)
    rng = np.random.default_rng(student_config.seed if seed is None else seed)
    dt = student_config.dtype
    d = student_config.embed_dim

    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        total = 0.0
        for start in range(0, len(items), batch_size):
            idx = order[start : start + batch_size]
            outputs = forward(student, images[idx], train_mode=False)
            b = len(idx)
            v = np.concatenate([outputs.x1, outputs.x2], axis=1).astype(np.float64)
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise TrainingDivergedError("student embedding collapsed to zero")
            xhat = v / norms
            diff = xhat - targets[idx]
            batch_loss = 0.5 * float(np.mean(np.sum(np.square(diff), axis=1)))
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"non-finite distill loss at epoch {epoch}")
            d_xhat = diff / b
            # through the normalization: dv = (g - xhat (xhat . g)) / ||v||
            d_v = (d_xhat - xhat * np.sum(xhat * d_xhat, axis=1, keepdims=True)) / norms
            zeros1 = np.zeros_like(outputs.logits1)
            zeros2 = np.zeros_like(outputs.logits2)
            zeros_map = np.zeros((b, student_config.map_dim), dtype=dt)
            grads = _backward_core(
                student,
                outputs.cache,
                zeros1,
                zeros2,
                zeros_map,
                d_x1_extra=d_v[:, :d],
                d_x2_extra=d_v[:, d:],
                include_decay=False,
            )
            student = rmsprop_step(student, grads, state)
            total += batch_loss * b
        curve.append(total / len(items))
    return student, tuple(curve)
