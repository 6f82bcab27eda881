"""Multitask embedding network: shared stem, texture + minutiae branches.

The stem is a stack of [3x3 conv -> ReLU -> 2x2 maxpool] stages shared by
both branches.  The texture branch global-average-pools its conv features
into the embedding x1.  The minutiae branch keeps a coarse 4x4-pooled
spatial layout and maps it to the embedding x2 and to a predicted
minutiae map, which is what injects fingerprint domain knowledge into the
shared features.  Each embedding feeds a linear classification head
(dropout in front, training only).  An optional localization head
predicts a bounded crop-and-rotate alignment that is applied to the input
through the bilinear sampler before the stem; its gradients flow through
the sampler, so the whole network stays finite-difference checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..spatial_transform import (
    CROP_WINDOW,
    AlignmentParams,
    build_affine,
    sample_array,
    sample_backward_array,
)
from .layers import (
    avgpool_backward,
    avgpool_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    fc_backward,
    fc_forward,
    gap_backward,
    gap_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)

LOC_HIDDEN = 16
LOC_POOL = 4
# crop side as a fraction of the input side, matching the aligner's
# full-scale window-to-frame ratio
CROP_FRACTION = CROP_WINDOW / 448.0
MIN_BRANCH_POOL = 4


@dataclass(frozen=True)
class NetConfig:
    """Architecture and training-behavior knobs.

    loss_weights scales (ce1, ce2, map) terms; the objective is their
    unweighted sum by default.  use_float64 switches every tensor and
    activation to 64-bit for gradient verification.
    """

    in_h: int = 64
    in_w: int = 64
    stem_channels: tuple[int, ...] = (8, 16)
    branch_channels: int = 16
    embed_dim: int = 32
    num_classes: int = 10
    map_h: int = 16
    map_w: int = 16
    map_c: int = 6
    use_localizer: bool = False
    dropout_keep: float = 0.8
    weight_decay: float = 4e-5
    loc_lr_scale: float = 0.035
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    use_float64: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "stem_channels", tuple(int(c) for c in self.stem_channels)
        )
        object.__setattr__(
            self, "loss_weights", tuple(float(w) for w in self.loss_weights)
        )
        if not self.stem_channels or any(c < 1 for c in self.stem_channels):
            raise ValidationError(f"bad stem channels {self.stem_channels}")
        for name in ("in_h", "in_w", "branch_channels", "embed_dim", "map_h", "map_w", "map_c"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValidationError(f"dropout keep {self.dropout_keep} outside (0, 1]")
        if self.weight_decay < 0:
            raise ValidationError("weight decay must be non-negative")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ValidationError(f"bad loss weights {self.loss_weights}")
        divisor = (2 ** len(self.stem_channels)) * MIN_BRANCH_POOL
        if self.in_h % divisor or self.in_w % divisor:
            raise ValidationError(
                f"input dims must be divisible by {divisor}, got {self.in_h}x{self.in_w}"
            )

    @property
    def dtype(self):
        return np.float64 if self.use_float64 else np.float32

    @property
    def stem_out_hw(self) -> tuple[int, int]:
        f = 2 ** len(self.stem_channels)
        return self.in_h // f, self.in_w // f

    @property
    def min_feat_dim(self) -> int:
        sh, sw = self.stem_out_hw
        return self.branch_channels * (sh // MIN_BRANCH_POOL) * (sw // MIN_BRANCH_POOL)

    @property
    def map_dim(self) -> int:
        return self.map_h * self.map_w * self.map_c

    @property
    def loc_feat_dim(self) -> int:
        return (self.in_h // LOC_POOL) * (self.in_w // LOC_POOL)


@dataclass(frozen=True, eq=False)
class NetParams:
    """Immutable snapshot of every named parameter tensor."""

    config: NetConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise ValidationError(f"parameter block {name!r} contains non-finite values")

    def norm_sq(self) -> float:
        """Sum of squared entries over all blocks, in 64-bit."""
        return float(
            sum(np.sum(np.square(t.astype(np.float64))) for t in self.tensors.values())
        )


@dataclass(frozen=True, eq=False)
class NetOutputs:
    """Forward results plus the cache backward replays."""

    logits1: np.ndarray
    logits2: np.ndarray
    map_pred: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    cache: dict = field(repr=False)


@dataclass(frozen=True)
class LossTerms:
    """Per-term breakdown of the joint objective."""

    ce1: float
    ce2: float
    map_mse: float
    decay: float
    total: float


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_params(config: NetConfig) -> NetParams:
    """He-style random initialization, a pure function of config.seed.

    The localizer's final layer starts at zero so training begins from
    the centered, unrotated crop.
    """
    rng = np.random.default_rng(config.seed)
    dt = config.dtype
    t: dict[str, np.ndarray] = {}

    def conv_block(name, cin, cout):
        scale = math.sqrt(2.0 / (cin * 9))
        t[f"{name}.w"] = (rng.standard_normal((cout, cin, 3, 3)) * scale).astype(dt)
        t[f"{name}.b"] = np.zeros(cout, dtype=dt)

    def fc_block(name, fin, fout, relu=False):
        scale = math.sqrt((2.0 if relu else 1.0) / fin)
        t[f"{name}.w"] = (rng.standard_normal((fin, fout)) * scale).astype(dt)
        t[f"{name}.b"] = np.zeros(fout, dtype=dt)

    cin = 1
    for i, cout in enumerate(config.stem_channels):
        conv_block(f"stem{i}", cin, cout)
        cin = cout
    conv_block("tex.conv", cin, config.branch_channels)
    conv_block("min.conv", cin, config.branch_channels)
    fc_block("tex.fc", config.branch_channels, config.embed_dim)
    fc_block("min.fc", config.min_feat_dim, config.embed_dim)
    fc_block("min.map", config.min_feat_dim, config.map_dim)
    fc_block("cls1", config.embed_dim, config.num_classes)
    fc_block("cls2", config.embed_dim, config.num_classes)
    if config.use_localizer:
        fc_block("loc.fc1", config.loc_feat_dim, LOC_HIDDEN, relu=True)
        t["loc.fc2.w"] = np.zeros((LOC_HIDDEN, 3), dtype=dt)
        t["loc.fc2.b"] = np.zeros(3, dtype=dt)
    return NetParams(config=config, tensors=t)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _loc_bounds(config: NetConfig) -> np.ndarray:
    return np.array(
        [config.in_w / 2.0, config.in_h / 2.0, math.pi / 3.0], dtype=np.float64
    )


def forward(
    params: NetParams,
    images,
    train_mode: bool = False,
    dropout_rng=None,
) -> NetOutputs:
    """Runs the network on a batch of (B, in_h, in_w) images.

    In train_mode, dropout masks are drawn from dropout_rng (falling
    back to a config-seeded generator) and cached for backward replay.
    """
    cfg = params.config
    t = params.tensors
    dt = cfg.dtype
    x = np.asarray(images, dtype=dt)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.in_h, cfg.in_w):
        raise ValidationError(
            f"images must be (B, {cfg.in_h}, {cfg.in_w}), got {x.shape}"
        )
    b = x.shape[0]
    cache: dict = {"raw": x, "train_mode": train_mode}

    if cfg.use_localizer:
        pooled, loc_pc = avgpool_forward(x[:, None], LOC_POOL)
        loc_flat = pooled.reshape(b, -1)
        h_pre, loc_c1 = fc_forward(loc_flat, t["loc.fc1.w"], t["loc.fc1.b"])
        h_act, loc_rm = relu_forward(h_pre)
        raw3, loc_c2 = fc_forward(h_act, t["loc.fc2.w"], t["loc.fc2.b"])
        tanh3 = np.tanh(raw3)
        bounds = _loc_bounds(cfg)
        loc_out = tanh3 * bounds  # (tx, ty, theta) per sample, strictly in-bounds
        window = CROP_FRACTION * cfg.in_w
        mats = []
        aligned = np.empty_like(x)
        for i in range(b):
            ap = AlignmentParams(
                float(loc_out[i, 0]), float(loc_out[i, 1]), float(loc_out[i, 2]),
                window=window,
            )
            m = build_affine(ap, cfg.in_w, cfg.in_h)
            mats.append(m)
            aligned[i] = sample_array(x[i], m, cfg.in_h, cfg.in_w)
        cache.update(
            loc_pc=loc_pc, loc_c1=loc_c1, loc_rm=loc_rm, loc_c2=loc_c2,
            loc_tanh=tanh3, loc_mats=mats, aligned=aligned,
        )
        stem_in = aligned
    else:
        stem_in = x

    a = stem_in[:, None]
    stem_caches = []
    for i in range(len(cfg.stem_channels)):
        a, cc = conv2d_forward(a, t[f"stem{i}.w"], t[f"stem{i}.b"])
        a, rm = relu_forward(a)
        a, pc = maxpool2_forward(a)
        stem_caches.append((cc, rm, pc))
    cache["stem"] = stem_caches

    tz, tex_cc = conv2d_forward(a, t["tex.conv.w"], t["tex.conv.b"])
    tr, tex_rm = relu_forward(tz)
    tg, tex_gc = gap_forward(tr)
    x1, tex_fc_c = fc_forward(tg, t["tex.fc.w"], t["tex.fc.b"])
    cache.update(tex_cc=tex_cc, tex_rm=tex_rm, tex_gc=tex_gc, tex_fc_c=tex_fc_c)

    mz, min_cc = conv2d_forward(a, t["min.conv.w"], t["min.conv.b"])
    mr, min_rm = relu_forward(mz)
    mp, min_pc = avgpool_forward(mr, MIN_BRANCH_POOL)
    mflat = mp.reshape(b, -1)
    x2, min_fc_c = fc_forward(mflat, t["min.fc.w"], t["min.fc.b"])
    map_flat, map_fc_c = fc_forward(mflat, t["min.map.w"], t["min.map.b"])
    map_pred = map_flat.reshape(b, cfg.map_h, cfg.map_w, cfg.map_c)
    cache.update(
        min_cc=min_cc, min_rm=min_rm, min_pc=min_pc, mp_shape=mp.shape,
        min_fc_c=min_fc_c, map_fc_c=map_fc_c,
    )

    if train_mode and cfg.dropout_keep < 1.0:
        rng = dropout_rng if dropout_rng is not None else np.random.default_rng(cfg.seed)
        x1d, m1 = dropout_forward(x1, cfg.dropout_keep, rng)
        x2d, m2 = dropout_forward(x2, cfg.dropout_keep, rng)
    else:
        x1d, m1 = x1, np.ones((), dtype=dt)
        x2d, m2 = x2, np.ones((), dtype=dt)
    cache.update(drop1=m1, drop2=m2)

    logits1, cls1_c = fc_forward(x1d, t["cls1.w"], t["cls1.b"])
    logits2, cls2_c = fc_forward(x2d, t["cls2.w"], t["cls2.b"])
    cache.update(cls1_c=cls1_c, cls2_c=cls2_c)

    return NetOutputs(
        logits1=logits1, logits2=logits2, map_pred=map_pred, x1=x1, x2=x2, cache=cache
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss(outputs: NetOutputs, batch, params: NetParams) -> LossTerms:
    """Joint objective: w1*CE1 + w2*CE2 + w3*mapMSE + decay.

    Cross-entropies are batch means; the map term sums squared residuals
    over cells and averages over the batch; decay is
    weight_decay * ||params||^2 / 2 over every tensor.
    """
    cfg = params.config
    w1, w2, w3 = cfg.loss_weights
    ce1, _ = softmax_cross_entropy(outputs.logits1, batch.labels)
    ce2, _ = softmax_cross_entropy(outputs.logits2, batch.labels)
    resid = outputs.map_pred.astype(np.float64) - batch.gt_maps.astype(np.float64)
    map_mse = float(np.mean(np.sum(np.square(resid), axis=(1, 2, 3))))
    decay = 0.5 * cfg.weight_decay * params.norm_sq()
    total = w1 * ce1 + w2 * ce2 + w3 * map_mse + decay
    return LossTerms(ce1=ce1, ce2=ce2, map_mse=map_mse, decay=decay, total=total)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _backward_core(
    params: NetParams,
    cache: dict,
    d_logits1,
    d_logits2,
    d_map_flat,
    d_x1_extra=None,
    d_x2_extra=None,
    include_decay: bool = True,
) -> dict[str, np.ndarray]:
    """Reverse pass from head gradients to every parameter block.

    d_x1_extra / d_x2_extra inject gradients directly at the branch
    embeddings (before dropout), which is how distillation drives the
    network without touching the classification or map heads.
    """
    cfg = params.config
    t = params.tensors
    g: dict[str, np.ndarray] = {}

    d_x1d, g["cls1.w"], g["cls1.b"] = fc_backward(cache["cls1_c"], d_logits1)
    d_x2d, g["cls2.w"], g["cls2.b"] = fc_backward(cache["cls2_c"], d_logits2)
    d_x1 = dropout_backward(cache["drop1"], d_x1d)
    d_x2 = dropout_backward(cache["drop2"], d_x2d)
    if d_x1_extra is not None:
        d_x1 = d_x1 + d_x1_extra
    if d_x2_extra is not None:
        d_x2 = d_x2 + d_x2_extra

    d_mflat_fc, g["min.fc.w"], g["min.fc.b"] = fc_backward(cache["min_fc_c"], d_x2)
    d_mflat_map, g["min.map.w"], g["min.map.b"] = fc_backward(
        cache["map_fc_c"], d_map_flat
    )
    d_mp = (d_mflat_fc + d_mflat_map).reshape(cache["mp_shape"])
    d_mr = avgpool_backward(cache["min_pc"], d_mp)
    d_mz = relu_backward(cache["min_rm"], d_mr)
    d_a_min, g["min.conv.w"], g["min.conv.b"] = conv2d_backward(cache["min_cc"], d_mz)

    d_tg, g["tex.fc.w"], g["tex.fc.b"] = fc_backward(cache["tex_fc_c"], d_x1)
    d_tr = gap_backward(cache["tex_gc"], d_tg)
    d_tz = relu_backward(cache["tex_rm"], d_tr)
    d_a_tex, g["tex.conv.w"], g["tex.conv.b"] = conv2d_backward(cache["tex_cc"], d_tz)

    d_a = d_a_min + d_a_tex
    for i in reversed(range(len(cfg.stem_channels))):
        cc, rm, pc = cache["stem"][i]
        d_a = maxpool2_backward(pc, d_a)
        d_a = relu_backward(rm, d_a)
        d_a, g[f"stem{i}.w"], g[f"stem{i}.b"] = conv2d_backward(cc, d_a)

    if cfg.use_localizer:
        raw = cache["raw"]
        mats = cache["loc_mats"]
        d_aligned = d_a[:, 0]
        b = raw.shape[0]
        g_loc = np.zeros((b, 3), dtype=np.float64)
        for i in range(b):
            g_loc[i] = sample_backward_array(raw[i], mats[i], d_aligned[i])
        d_tanh = g_loc * _loc_bounds(cfg)
        d_raw3 = d_tanh * (1.0 - np.square(cache["loc_tanh"]))
        d_hidden, g["loc.fc2.w"], g["loc.fc2.b"] = fc_backward(cache["loc_c2"], d_raw3)
        d_hpre = relu_backward(cache["loc_rm"], d_hidden)
        _, g["loc.fc1.w"], g["loc.fc1.b"] = fc_backward(cache["loc_c1"], d_hpre)

    if include_decay and cfg.weight_decay > 0:
        for name, v in t.items():
            g[name] = g[name] + cfg.weight_decay * v
    return {name: np.asarray(v, dtype=t[name].dtype) for name, v in g.items()}


def backward(params: NetParams, batch, outputs: NetOutputs) -> dict[str, np.ndarray]:
    """Exact gradients of loss() w.r.t. every parameter block."""
    cfg = params.config
    w1, w2, w3 = cfg.loss_weights
    b = outputs.logits1.shape[0]
    _, d1 = softmax_cross_entropy(outputs.logits1, batch.labels)
    _, d2 = softmax_cross_entropy(outputs.logits2, batch.labels)
    resid = outputs.map_pred.astype(np.float64) - batch.gt_maps.astype(np.float64)
    d_map_flat = (2.0 * w3 / b) * resid.reshape(b, -1)
    return _backward_core(
        params, outputs.cache, w1 * d1, w2 * d2, d_map_flat, include_decay=True
    )
