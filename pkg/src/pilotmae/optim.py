"""AdamW with decoupled weight decay, learning-rate schedules, gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.005
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: dict[str, Tensor], lr: float,
               grads: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam update, in place on the parameter tree.

    Decay multiplies the parameter directly (never enters the moments); moments
    are bias-corrected. Parameters with no gradient this step are skipped,
    including by the decay term.
    """
    if lr <= 0:
        raise ValueError("adamw_step requires lr > 0")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        K.adamw_update(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                       state.m[name].reshape(-1), state.v[name].reshape(-1),
                       lr, b1, b2, state.eps, state.weight_decay, bc1, bc2)
    return params


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g).real)
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0
                     ) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds it."""
    gnorm = global_grad_norm(grads)
    if not math.isfinite(gnorm):
        raise FloatingPointError("non-finite gradient norm")
    if gnorm > max_norm:
        scale = max_norm / gnorm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return grads


def cosine_lr(e: int, total: int, eta_start: float, eta_min: float) -> float:
    """Cosine decay from eta_start at epoch 0 to eta_min at epoch total-1."""
    if total < 1:
        raise ValueError("cosine_lr requires total >= 1")
    if not 0 <= e <= total - 1:
        raise ValueError(f"epoch {e} outside [0, {total - 1}]")
    if total == 1:
        return eta_start
    return eta_min + 0.5 * (eta_start - eta_min) * (1.0 + math.cos(math.pi * e / (total - 1)))


def warmup_cosine_lr(e: int, total: int, warmup: int, eta_start: float,
                     eta_min: float) -> float:
    """Linear ramp to eta_start over `warmup` epochs, then cosine decay."""
    if warmup <= 0:
        return cosine_lr(e, total, eta_start, eta_min)
    if e < warmup:
        return eta_start * (e + 1) / warmup
    return cosine_lr(e - warmup, total - warmup, eta_start, eta_min)
