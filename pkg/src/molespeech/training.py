"""Shared teacher-forced training loop.

Stages differ only in which parameters are trainable and how a batch is
turned into a loss, so the loop takes both as arguments. Gradients are
clipped at global norm 1.0 by default; each step appends one metrics
record (loss, lr, step).
"""

from __future__ import annotations

from .autodiff import Tensor
from .optim import AdamWConfig, AdamWState, adamw_step, clip_global_norm


def train_steps(
    loss_fn,
    trainable: dict[str, Tensor],
    opt_cfg: AdamWConfig,
    steps: int,
    clip_norm: float | None = 1.0,
    on_step=None,
) -> list[dict]:
    """Run `steps` optimizer updates of `trainable` on loss_fn(step)."""
    state = AdamWState.for_params(trainable)
    records = []
    for step in range(steps):
        loss = loss_fn(step)
        loss.backward()
        if clip_norm is not None:
            clip_global_norm(trainable, clip_norm)
        lr = adamw_step(trainable, state, opt_cfg, step)
        rec = {"step": step, "loss": loss.item(), "lr": lr}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records
