"""Low-rank adapter experts over the frozen transformer.

An adapter adds (alpha/rank) * (x @ A) @ B to one target matmul; A starts
Gaussian, B starts zero, so a freshly injected expert is an exact no-op.
Experts bundle one adapter per target (all attention projections and both
feed-forward matrices of every layer). Stage policies pick which named
parameters an optimizer may touch; everything else stays bit-frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import LanguageModel
from .prng import Prng

ADAPTER_INIT_SCALE = 0.02


@dataclass
class LoraAdapter:
    target: str
    a: Tensor  # (d_in, rank)
    b: Tensor  # (rank, d_out)
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense additive update for the target, in (d_in, d_out) layout."""
        return (self.a.data.astype(np.float64) @ self.b.data.astype(np.float64) * self.scale).astype(self.a.data.dtype)


@dataclass
class Expert:
    name: str
    rank: int
    alpha: float
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    merged: bool = False

    def params(self) -> dict[str, Tensor]:
        out = {}
        for target, ad_ in self.adapters.items():
            out[f"experts.{self.name}.{target}.A"] = ad_.a
            out[f"experts.{self.name}.{target}.B"] = ad_.b
        return out


def inject_lora(model: LanguageModel, name: str, rank: int, alpha: float, rng: Prng) -> Expert:
    """Attach a fresh (zero-delta) expert covering every LoRA target."""
    if rank < 1:
        raise ContractError("rank must be >= 1")
    if name in model.experts:
        raise ContractError(f"expert {name!r} already attached")
    init = rng.child(f"lora-{name}")
    expert = Expert(name=name, rank=rank, alpha=alpha)
    for target in model.lora_targets():
        d_in, d_out = model.params[target].data.shape
        if rank > min(d_in, d_out):
            raise ContractError(f"rank {rank} exceeds min dimension of target {target} ({min(d_in, d_out)})")
        a = Tensor(init.normal(ADAPTER_INIT_SCALE, (d_in, rank)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros((rank, d_out), dtype=np.float32), requires_grad=True)
        expert.adapters[target] = LoraAdapter(target=target, a=a, b=b, rank=rank, alpha=alpha)
    model.experts[name] = expert
    return expert


def expert_deltas(expert: Expert, gate=None) -> dict:
    """Delta table for lm_forward: one (A, B, scale, gate) entry per target."""
    if expert.merged:
        raise ContractError(f"expert {expert.name!r} was merged; its adapters are spent")
    return {t: [(ad_.a, ad_.b, ad_.scale, gate)] for t, ad_ in expert.adapters.items()}


def merge_lora(model: LanguageModel, expert: Expert) -> LanguageModel:
    """Fold the expert into dense weights: W += (alpha/r) * A @ B per target.

    Returns a new dense model; the expert is consumed and cannot be merged
    twice without re-injection.
    """
    if expert.merged:
        raise ContractError(f"expert {expert.name!r} already merged")
    if model.experts.get(expert.name) is not expert:
        raise ContractError(f"expert {expert.name!r} is not attached to this model")
    merged = model.clone()
    for target, ad_ in expert.adapters.items():
        merged.params[target].data += ad_.delta()
    merged.experts = {}
    expert.merged = True
    return merged


@dataclass(frozen=True)
class TrainablePolicy:
    """Which named parameters one training stage may update."""

    stage: int
    names: tuple

    @classmethod
    def stage1(cls, expert: Expert) -> "TrainablePolicy":
        # Speech injection: both input embedding tables, the prediction
        # head, and the speech expert's adapters.
        names = ("embed.tok", "embed.pos", "head.w") + tuple(sorted(expert.params()))
        return cls(stage=1, names=names)

    @classmethod
    def stage2(cls, expert: Expert) -> "TrainablePolicy":
        return cls(stage=2, names=tuple(sorted(expert.params())))

    @classmethod
    def stage3(cls, router_params: dict[str, Tensor]) -> "TrainablePolicy":
        return cls(stage=3, names=tuple(sorted(router_params)))

    @classmethod
    def everything(cls, params: dict[str, Tensor]) -> "TrainablePolicy":
        return cls(stage=0, names=tuple(sorted(params)))


def apply_policy(all_params: dict[str, Tensor], policy: TrainablePolicy) -> dict[str, Tensor]:
    """Freeze everything outside the policy and return the training view.

    Frozen tensors drop out of graph recording entirely, so no gradient is
    ever produced for them and the optimizer cannot move them.
    """
    unknown = [n for n in policy.names if n not in all_params]
    if unknown:
        raise ConfigError(f"policy names not found among parameters: {unknown}")
    selected = set(policy.names)
    view = {}
    for name, p in all_params.items():
        p.requires_grad = name in selected
        p.grad = None
        if name in selected:
            view[name] = p
    return view


def collect_params(model: LanguageModel, experts=(), router: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    out = dict(model.params)
    for e in experts:
        out.update(e.params())
    if router:
        out.update(router)
    return out
