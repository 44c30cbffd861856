"""Blockwise AdamW with decoupled weight decay, plus the linear LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import Matrix
from .errors import NumericError, ParameterError, ShapeError
from .model import BlockId


@dataclass
class AdamWHyper:
    lr_base: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    """First/second moments per trainable block; moments appear lazily."""

    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    step: int = 0
    m: dict[BlockId, Matrix] = field(default_factory=dict)
    v: dict[BlockId, Matrix] = field(default_factory=dict)


def adamw_step(
    params: dict[BlockId, Matrix],
    update: dict[BlockId, Matrix],
    state: AdamWState,
    lr: float,
) -> None:
    """One AdamW step, in place on the parameter arrays.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

    Only blocks present in the update move; frozen backbone weights are never
    part of either mapping.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    h = state.hyper
    state.step += 1
    t = state.step
    for bid, g in update.items():
        if bid not in params:
            raise ParameterError(f"update names unknown block {bid}")
        theta = params[bid]
        if theta.shape != g.shape:
            raise ShapeError(f"block {bid}: gradient {g.shape} vs parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient entries in block {bid}")
        m = state.m.get(bid)
        if m is None:
            m = state.m[bid] = np.zeros_like(theta)
            state.v[bid] = np.zeros_like(theta)
        v = state.v[bid]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        m_hat = m / (1.0 - h.beta1**t)
        v_hat = v / (1.0 - h.beta2**t)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + h.eps) + h.weight_decay * theta)


def linear_decay_lr(step: int, total_steps: int, lr_base: float) -> float:
    """lr_base * (1 - step / total_steps); hits zero at the final step."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return lr_base * (1.0 - step / total_steps)
