"""AdamW with decoupled weight decay, cosine learning-rate schedule, and
global-norm gradient clipping.

All training stages share this optimizer; the schedule is the plain cosine
lr(t) = lr_min + (lr_max - lr_min)/2 * (1 + cos(pi * t / total_steps))
with no warmup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError, ShapeError


@dataclass
class AdamWConfig:
    lr_max: float
    total_steps: int
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ContractError("lr_max must be positive")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ContractError("need 0 <= lr_min <= lr_max")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ContractError("eps must be > 0 and weight_decay >= 0")
        if self.total_steps < 1:
            raise ContractError("total_steps must be a positive integer")


def cosine_lr(cfg: AdamWConfig, step: int) -> float:
    """Cosine decay from lr_max at step 0 down to lr_min at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


@dataclass
class AdamWState:
    """Per-parameter first/second moment buffers plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Accumulation runs in sorted name order so the norm (and therefore the
    whole run) does not depend on dict construction order.
    """
    total = 0.0
    for name in sorted(params):
        p = params[name]
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def adamw_step(params: dict[str, Tensor], state: AdamWState, cfg: AdamWConfig, step: int) -> float:
    """One bias-corrected AdamW update on every parameter with a gradient.

    Weight decay is decoupled: with a zero gradient the update is exactly
    param *= (1 - lr(step) * weight_decay). Parameters whose grad is None
    are skipped entirely, which is what keeps frozen parameter sets
    bit-identical across steps. Returns the learning rate used.
    """
    if step >= cfg.total_steps:
        raise ContractError(f"step {step} >= total_steps {cfg.total_steps}")
    lr = cosine_lr(cfg, step)
    t = state.t + 1
    b1c = 1.0 - cfg.beta1**t
    b2c = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay != 0.0:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr / b1c) * m / (np.sqrt(v / b2c) + cfg.eps)
        p.grad = None
    state.t = t
    return lr
