"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..tensor import ShapeError


def lr_at(epoch: int, config) -> float:
    """Learning rate for a 1-based epoch: linear warmup to ``lr_peak`` at
    ``warmup_epochs``, then cosine decay to ``lr_final`` at ``epochs_total``."""
    W, E = config.warmup_epochs, config.epochs_total
    if not 1 <= epoch <= E:
        raise ValueError(f"epoch {epoch} outside [1, {E}]")
    if epoch <= W:
        return config.lr_peak * epoch / W
    phase = math.pi * (epoch - W) / (E - W)
    return config.lr_final + (config.lr_peak - config.lr_final) * (1 + math.cos(phase)) / 2


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, config) -> dict:
    """One AdamW update of the parameters named in ``grads``.

    Returns the new arrays for those names; ``state`` is updated in place.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    b1, b2, eps, wd = config.beta1, config.beta2, config.adam_eps, config.weight_decay
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    updated = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if m.shape != p.shape:
            raise ShapeError(f"{name}: optimizer moment {m.shape} vs param {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        updated[name] = (p * (1 - lr * wd) - lr * update).astype(p.dtype)
    return updated
