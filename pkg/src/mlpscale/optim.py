"""Parameter update rules.

Both optimizers mutate the parameter dict in place (the only code allowed to)
and keep per-parameter state keyed by parameter name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUPS = ("head", "body")


def param_group(name: str) -> str:
    """The final classifier is the ``head``; everything else is the ``body``."""
    return "head" if name.startswith("head.") else "body"


def _resolve_lr(lr, name: str) -> float:
    if isinstance(lr, dict):
        group = param_group(name)
        if group not in lr:
            raise KeyError(f"no learning rate for group {group!r} (parameter {name})")
        return float(lr[group])
    return float(lr)


def _check_pair(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")


@dataclass
class LionState:
    """Sign-momentum optimizer state.

    ``lr`` is a float, or a ``{"head": ..., "body": ...}`` dict for
    per-group rates. ``weight_decay`` is decoupled from the gradient.
    """

    lr: float | dict = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError(f"betas must lie in (0, 1), got {b}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class SgdMomentumState:
    lr: float | dict = field(default_factory=lambda: {"head": 0.01, "body": 0.001})
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def lion_step(params, grads, state: LionState):
    """One update of every parameter that has a gradient.

    c = b1*m + (1-b1)*g;  theta -= lr*(sign(c) + wd*theta);  m = b2*m + (1-b2)*g
    """
    _check_pair(params, grads)
    b1, b2, wd = state.beta1, state.beta2, state.weight_decay
    for name, g in grads.items():
        lr = _resolve_lr(state.lr, name)
        if lr < 0:
            raise ValueError(f"negative learning rate for {name}")
        theta = params[name]
        m = state.momentum.get(name)
        if m is None:
            m = state.momentum[name] = np.zeros_like(theta)
        c = b1 * m + (1.0 - b1) * g
        update = np.sign(c)
        if wd:
            update = update + wd * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
        m *= b2
        m += (1.0 - b2) * g
    return params, state


def sgd_momentum_step(params, grads, state: SgdMomentumState):
    """v = mu*v + g;  theta -= lr_group * v."""
    _check_pair(params, grads)
    for name, g in grads.items():
        lr = _resolve_lr(state.lr, name)
        theta = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        if state.weight_decay:
            g = g + state.weight_decay * theta
        v *= state.momentum
        v += g
        theta -= (lr * v).astype(theta.dtype, copy=False)
    return params, state


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads, max_norm: float):
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype, copy=False) for name, g in grads.items()}


def optimizer_tensors(state) -> dict[str, np.ndarray]:
    """Flat view of the per-parameter buffers, for checkpointing."""
    buf = state.momentum if isinstance(state, LionState) else state.velocity
    return dict(buf)
