"""RMSProp with a per-name learning-rate scale for localizer parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .net import NetParams

LOC_PREFIX = "loc."


@dataclass
class OptState:
    """Per-parameter squared-gradient accumulators plus hyperparameters."""

    lr: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    acc: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.decay < 1.0):
            raise ValidationError(f"decay {self.decay} outside [0, 1)")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


def init_opt_state(
    params: NetParams, lr: float = 1e-3, decay: float = 0.9, epsilon: float = 1e-8
) -> OptState:
    """Zero accumulators matching every parameter block."""
    acc = {
        name: np.zeros_like(t, dtype=np.float64) for name, t in params.tensors.items()
    }
    return OptState(lr=lr, decay=decay, epsilon=epsilon, acc=acc)


def rmsprop_step(
    params: NetParams,
    grads: dict[str, np.ndarray],
    state: OptState,
    loc_lr_scale: float | None = None,
) -> NetParams:
    """One update: acc <- d*acc + (1-d)*g^2; p <- p - lr*g/(sqrt(acc)+eps).

    Blocks named ``loc.*`` step with lr scaled by loc_lr_scale (defaults
    to the config value).  Accumulators update in place; a new NetParams
    snapshot is returned.
    """
    if set(grads) != set(params.tensors):
        missing = set(params.tensors) ^ set(grads)
        raise ValidationError(f"gradient keys do not match parameters: {sorted(missing)}")
    if set(state.acc) != set(params.tensors):
        raise ValidationError("optimizer state does not match parameters")
    if loc_lr_scale is None:
        loc_lr_scale = params.config.loc_lr_scale
    new_tensors: dict[str, np.ndarray] = {}
    for name, p in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(
                f"gradient for {name!r} has shape {g.shape}, expected {p.shape}"
            )
        a = state.acc[name]
        a *= state.decay
        a += (1.0 - state.decay) * np.square(g)
        lr = state.lr * (loc_lr_scale if name.startswith(LOC_PREFIX) else 1.0)
        step = lr * g / (np.sqrt(a) + state.epsilon)
        new_tensors[name] = (p.astype(np.float64) - step).astype(p.dtype)
    return NetParams(config=params.config, tensors=new_tensors)
