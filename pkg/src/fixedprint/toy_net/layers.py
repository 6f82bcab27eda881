"""Array-level building blocks with exact reverse-mode derivatives.

Every forward returns ``(out, cache)`` and the matching backward consumes
``(cache, dout)``, so each block is independently finite-difference
checkable.  Activations are NCHW; fully-connected activations are (B, F).
All functions preserve the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ValidationError


# --- 3x3 same-padding convolution ---------------------------------------------


def conv2d_forward(x, w, b):
    """Cross-correlates x (B,C,H,W) with w (O,C,kh,kw), zero 'same' padding."""
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 != 1 or kw % 2 != 1:
        raise ValidationError("conv kernels must have odd sides")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(f"conv expects {w.shape[1]} channels, got {x.shape[1]}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,H,W,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,O
    out = np.moveaxis(out, 3, 1) + b[None, :, None, None]
    return np.ascontiguousarray(out), (x, w)


def conv2d_backward(cache, dout):
    """Returns (dx, dw, db) for conv2d_forward."""
    x, w = cache
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    h, w_sp = x.shape[2], x.shape[3]
    db = dout.sum(axis=(0, 2, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            # out[b,o,y,x] uses xp[b,c,y+i,x+j] * w[o,c,i,j]
            piece = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # B,H,W,C
            dxp[:, :, i : i + h, j : j + w_sp] += np.moveaxis(piece, 3, 1)
    dx = dxp[:, :, ph : ph + h, pw : pw + w_sp]
    return dx, dw, db


# --- pointwise and pooling ------------------------------------------------------


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, (x > 0.0)


def relu_backward(cache, dout):
    return dout * cache


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; ties route to the first window element."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValidationError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    flat = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(cache, dout):
    idx, shape = cache
    b, c, h, w = shape
    dflat = np.zeros((b, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    return (
        dflat.reshape(b, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )


def avgpool_forward(x, k: int):
    """k x k stride-k average pooling."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValidationError(f"avgpool{k} needs dims divisible by {k}, got {h}x{w}")
    out = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return out, (k, x.shape)


def avgpool_backward(cache, dout):
    k, shape = cache
    b, c, h, w = shape
    spread = np.broadcast_to(
        dout[:, :, :, None, :, None] / (k * k), (b, c, h // k, k, w // k, k)
    )
    return spread.reshape(b, c, h, w).astype(dout.dtype, copy=False)


def gap_forward(x):
    """Global average pool (B,C,H,W) -> (B,C)."""
    b, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (h, w)


def gap_backward(cache, dout):
    h, w = cache
    return np.broadcast_to(
        dout[:, :, None, None] / (h * w), dout.shape + (h, w)
    ).astype(dout.dtype, copy=False)


# --- dense / regularization -----------------------------------------------------


def fc_forward(x, w, b):
    """y = x @ w + b with x (B,F), w (F,D)."""
    if x.shape[1] != w.shape[0]:
        raise ValidationError(f"fc expects {w.shape[0]} features, got {x.shape[1]}")
    return x @ w + b, (x, w)


def fc_backward(cache, dout):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, keep: float, rng):
    """Inverted dropout; keep == 1 is an exact identity."""
    if not (0.0 < keep <= 1.0):
        raise ValidationError(f"keep probability {keep} outside (0, 1]")
    if keep == 1.0:
        return x, np.ones((), dtype=x.dtype)
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


def dropout_backward(mask, dout):
    return dout * mask


# --- losses ---------------------------------------------------------------------


def softmax(logits):
    """Row-wise softmax, numerically shifted."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its logit gradient, accumulated in 64-bit.

    Returns ``(mean_ce, dlogits)`` where dlogits is the gradient of the
    batch-mean cross-entropy, i.e. (softmax - onehot) / B.
    """
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError("label outside [0, num_classes)")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = float(np.mean(lse - z[np.arange(b), labels]))
    d = softmax(z)
    d[np.arange(b), labels] -= 1.0
    return ce, d / b
