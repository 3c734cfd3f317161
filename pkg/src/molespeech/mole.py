"""Mixture of LoRA experts behind a learned router.

The router is a two-layer MLP over the mean-pooled input embedding of the
prompt (system + user tokens, before any generation). It emits one softmax
gate vector per request; the fused forward applies the gate-weighted sum
of expert deltas at every adapted target, uniformly across layers and
positions. Router training backpropagates the ordinary next-token loss
through the frozen base and experts into the router alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cross_entropy, matmul
from .data import Batch, BatchSampler, PromptedSample, collate
from .errors import ContractError
from .lora import Expert, TrainablePolicy, apply_policy, collect_params, expert_deltas
from .model import LanguageModel, generate, lm_forward
from .optim import AdamWConfig
from .prng import Prng
from .training import train_steps

ROUTER_HIDDEN = 64


def init_router(d_model: int, n_experts: int, rng: Prng, hidden: int = ROUTER_HIDDEN) -> dict[str, Tensor]:
    r = rng.child("router")
    return {
        "router.w1": Tensor(r.normal(0.02, (d_model, hidden)).astype(np.float32), requires_grad=True),
        "router.b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        "router.w2": Tensor(r.normal(0.02, (hidden, n_experts)).astype(np.float32), requires_grad=True),
        "router.b2": Tensor(np.zeros(n_experts, dtype=np.float32), requires_grad=True),
    }


@dataclass
class MoleModel:
    base: LanguageModel
    experts: list[Expert]
    router: dict[str, Tensor]
    hard_gates: bool = False
    expert_names: list[str] = field(init=False)

    def __post_init__(self):
        if len(self.experts) < 2:
            raise ContractError("a mixture needs at least 2 experts")
        if self.router["router.w2"].data.shape[1] != len(self.experts):
            raise ContractError("router output width does not match the expert count")
        self.expert_names = [e.name for e in self.experts]


def route_batch(mole: MoleModel, tokens: np.ndarray, prompt_lens: np.ndarray) -> Tensor:
    """Soft gates (B, K) from each sequence's prompt section."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ContractError("route_batch expects non-empty (B, T) tokens")
    t = tokens.shape[1]
    weights = (np.arange(t)[None, :] < np.asarray(prompt_lens)[:, None]).astype(np.float32)
    weights = weights / weights.sum(axis=1, keepdims=True)
    emb = ad.embedding(mole.base.params["embed.tok"], tokens)
    pooled = ad.tsum(ad.mul(emb, weights[:, :, None]), axis=1)
    h = ad.silu(ad.add(matmul(pooled, mole.router["router.w1"]), mole.router["router.b1"]))
    logits = ad.add(matmul(h, mole.router["router.w2"]), mole.router["router.b2"])
    return ad.softmax(logits, axis=-1)


def route(mole: MoleModel, prompt) -> np.ndarray:
    """Gate vector for one prompt; a point on the expert simplex."""
    prompt = np.asarray(list(prompt), dtype=np.int64)
    if prompt.size == 0:
        raise ContractError("prompt must be non-empty")
    with ad.no_grad():
        gates = route_batch(mole, prompt[None, :], np.array([prompt.size]))
    g = gates.data[0].astype(np.float64)
    return g / g.sum()  # exact simplex point after float32 rounding


def mole_deltas(mole: MoleModel, gates) -> dict:
    """Delta table with one gated contribution per expert per target."""
    if not isinstance(gates, Tensor):
        gates = Tensor(np.asarray(gates, dtype=np.float32).reshape(1, -1))
    k = len(mole.experts)
    if gates.data.shape[-1] != k:
        raise ContractError(f"gate vector has {gates.data.shape[-1]} entries for {k} experts")
    deltas: dict = {}
    for j, expert in enumerate(mole.experts):
        pick = np.zeros((k, 1), dtype=np.float32)
        pick[j, 0] = 1.0
        gate_j = matmul(gates, Tensor(pick)).reshape(gates.data.shape[0], 1, 1)
        for target, entries in expert_deltas(expert, gate=gate_j).items():
            deltas.setdefault(target, []).extend(entries)
    return deltas


def mole_forward(mole: MoleModel, tokens: np.ndarray, gates) -> Tensor:
    """Fused forward with per-sequence gates already computed."""
    return lm_forward(mole.base, tokens, deltas=mole_deltas(mole, gates))


def _inference_gates(mole: MoleModel, prompt) -> np.ndarray:
    g = route(mole, prompt)
    if mole.hard_gates:
        hard = np.zeros_like(g)
        hard[int(g.argmax())] = 1.0
        return hard
    return g


def mole_generate(mole: MoleModel, prompt, max_new: int, **kw) -> list[int]:
    """Route once on the prompt, then decode with the gated mixture."""
    gates = _inference_gates(mole, prompt)
    return generate(mole.base, prompt, max_new, deltas=mole_deltas(mole, gates.reshape(1, -1)), **kw)


def train_router(
    mole: MoleModel,
    mixed_data: list[PromptedSample],
    opt_cfg: AdamWConfig,
    steps: int,
    rng: Prng,
    batch_size: int = 32,
    sampler=None,
    on_step=None,
) -> list[dict]:
    """Stage-3: next-token loss on mixed-task data, router parameters only.

    `sampler` overrides plain length-bucketed sampling (e.g. to enforce a
    task mixing ratio); it just needs a .next() -> list[PromptedSample].
    """
    kinds = {s.kind for s in mixed_data}
    if len(kinds) < 2:
        warnings.warn(f"router training data covers only {sorted(kinds)}; the router may collapse", stacklevel=2)
    all_params = collect_params(mole.base, mole.experts, mole.router)
    trainable = apply_policy(all_params, TrainablePolicy.stage3(mole.router))
    if steps == 0:
        return []
    if sampler is None:
        sampler = BatchSampler(mixed_data, batch_size, rng.child("batches"))
    pad = mole.base.cfg.vocab.pad
    v = mole.base.n_vocab_rows

    def loss_fn(step: int) -> Tensor:
        batch: Batch = collate(sampler.next(), pad, mole.base.cfg.max_seq_len)
        gates = route_batch(mole, batch.inputs, batch.prompt_lens)
        logits = mole_forward(mole, batch.inputs, gates)
        return cross_entropy(logits.reshape(-1, v), batch.labels.reshape(-1), ignore_id=pad)

    return train_steps(loss_fn, trainable, opt_cfg, steps, on_step=on_step)
