"""Decoder-only causal transformer over the unified text+speech id space.

Pre-norm blocks with RMS normalization, learned absolute position
embeddings, untied input embedding and prediction head. The forward pass
accepts an optional per-target low-rank delta table so adapter experts and
gated expert mixtures reuse one code path. Growing the vocabulary appends
embedding rows and head columns without touching existing weights, so
logits of old ids on old-token inputs stay bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, matmul
from .errors import ConfigError, ContractError, ShapeError
from .prng import Prng
from .vocab import UnifiedVocab

LORA_TARGET_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.w1", "ff.w2")


@dataclass
class LmConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    vocab: UnifiedVocab = field(default_factory=UnifiedVocab)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("model dimensions must be positive")


class LanguageModel:
    """Parameters live in a flat name->Tensor dict; names are the shared
    currency for checkpoints, trainable policies, and freeze checksums."""

    def __init__(self, cfg: LmConfig, params: dict[str, Tensor], n_vocab_rows: int):
        self.cfg = cfg
        self.params = params
        self.n_vocab_rows = n_vocab_rows
        self.experts: dict[str, object] = {}

    @classmethod
    def init(cls, cfg: LmConfig, rng: Prng, init_scale: float = 0.02, n_vocab_rows: int | None = None) -> "LanguageModel":
        if n_vocab_rows is None:
            n_vocab_rows = cfg.vocab.n_text
        w = rng.child("init")
        params: dict[str, Tensor] = {
            "embed.tok": Tensor(w.normal(init_scale, (n_vocab_rows, cfg.d_model)).astype(np.float32), requires_grad=True),
            "embed.pos": Tensor(w.normal(init_scale, (cfg.max_seq_len, cfg.d_model)).astype(np.float32), requires_grad=True),
        }
        params.update(init_decoder_params(cfg.n_layers, cfg.d_model, cfg.d_ff, w, init_scale))
        params["head.w"] = Tensor(w.normal(init_scale, (cfg.d_model, n_vocab_rows)).astype(np.float32), requires_grad=True)
        return cls(cfg, params, n_vocab_rows)

    def lora_targets(self) -> list[str]:
        return [f"layers.{i}.{suffix}" for i in range(self.cfg.n_layers) for suffix in LORA_TARGET_SUFFIXES]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def clone(self) -> "LanguageModel":
        params = {name: Tensor(p.data.copy(), requires_grad=True) for name, p in self.params.items()}
        return LanguageModel(self.cfg, params, self.n_vocab_rows)


def init_decoder_params(n_layers: int, d_model: int, d_ff: int, rng: Prng, init_scale: float = 0.02) -> dict[str, Tensor]:
    """Block weights: Gaussian projections, zeroed output projections so a
    fresh stack is the identity on the residual stream, unit norm gains."""
    params: dict[str, Tensor] = {}
    for i in range(n_layers):
        p = f"layers.{i}."
        params[p + "attn_norm.g"] = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
        params[p + "attn.wq"] = Tensor(rng.normal(init_scale, (d_model, d_model)).astype(np.float32), requires_grad=True)
        params[p + "attn.wk"] = Tensor(rng.normal(init_scale, (d_model, d_model)).astype(np.float32), requires_grad=True)
        params[p + "attn.wv"] = Tensor(rng.normal(init_scale, (d_model, d_model)).astype(np.float32), requires_grad=True)
        params[p + "attn.wo"] = Tensor(np.zeros((d_model, d_model), dtype=np.float32), requires_grad=True)
        params[p + "ff_norm.g"] = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
        params[p + "ff.w1"] = Tensor(rng.normal(init_scale, (d_model, d_ff)).astype(np.float32), requires_grad=True)
        params[p + "ff.w2"] = Tensor(np.zeros((d_ff, d_model), dtype=np.float32), requires_grad=True)
    params["final_norm.g"] = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
    return params


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(t: int, dtype) -> np.ndarray:
    key = (t, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
    return _MASK_CACHE[key]


def _adapted(params: dict[str, Tensor], name: str, x: Tensor, deltas) -> Tensor:
    y = matmul(x, params[name])
    if deltas:
        for a, b, scale, gate in deltas.get(name, ()):
            d = matmul(matmul(x, a), b) * scale
            if gate is not None:
                d = ad.mul(d, gate)
            y = y + d
    return y


def decoder_stack(params: dict[str, Tensor], x: Tensor, n_layers: int, n_heads: int, deltas=None) -> Tensor:
    """Pre-norm causal self-attention blocks over (B, T, d) activations,
    finished with the final RMS norm. Shared by both language models."""
    bsz, t, d_model = x.data.shape
    d_head = d_model // n_heads
    mask = _causal_mask(t, x.dtype)
    for i in range(n_layers):
        p = f"layers.{i}."
        h = ad.rms_norm(x, params[p + "attn_norm.g"])
        q = _adapted(params, p + "attn.wq", h, deltas).reshape(bsz, t, n_heads, d_head).transpose((0, 2, 1, 3))
        k = _adapted(params, p + "attn.wk", h, deltas).reshape(bsz, t, n_heads, d_head).transpose((0, 2, 1, 3))
        v = _adapted(params, p + "attn.wv", h, deltas).reshape(bsz, t, n_heads, d_head).transpose((0, 2, 1, 3))
        scores = ad.add(matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(d_head)), mask)
        ctx = matmul(ad.softmax(scores), v).transpose((0, 2, 1, 3)).reshape(bsz, t, d_model)
        x = x + _adapted(params, p + "attn.wo", ctx, deltas)
        h = ad.rms_norm(x, params[p + "ff_norm.g"])
        x = x + _adapted(params, p + "ff.w2", ad.silu(_adapted(params, p + "ff.w1", h, deltas)), deltas)
    return ad.rms_norm(x, params["final_norm.g"])


def lm_forward(model: LanguageModel, tokens: np.ndarray, deltas=None) -> Tensor:
    """Token ids (B, T) or (T,) -> logits (B, T, V) / (T, V).

    `deltas` maps a target weight name to (A, B, scale, gate) additive
    low-rank contributions; gate is None or a broadcastable per-sequence
    weight tensor.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (B, T) or (T,), got {tokens.shape}")
    bsz, t = tokens.shape
    if t == 0:
        raise ContractError("empty token sequence")
    if t > model.cfg.max_seq_len:
        raise ShapeError(f"sequence length {t} exceeds max_seq_len {model.cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.n_vocab_rows:
        raise IndexError(f"token id out of range [0, {model.n_vocab_rows})")

    cfg = model.cfg
    x = ad.add(ad.embedding(model.params["embed.tok"], tokens), ad.embedding(model.params["embed.pos"], np.arange(t)))
    x = decoder_stack(model.params, x, cfg.n_layers, cfg.n_heads, deltas)
    logits = matmul(x, model.params["head.w"])
    return logits.reshape(t, model.n_vocab_rows) if single else logits


def extend_vocabulary(model: LanguageModel, n_new: int, init_scale: float, rng: Prng) -> LanguageModel:
    """Append n_new embedding rows and head columns (Gaussian init).

    Every pre-existing weight is copied bit-for-bit, so the extended model
    is indistinguishable from the old one on all-old-token inputs.
    """
    if n_new < 1:
        raise ContractError("n_new must be >= 1")
    out = model.clone()
    grow = rng.child("vocab-extend")
    tok = out.params["embed.tok"].data
    head = out.params["head.w"].data
    new_rows = grow.normal(init_scale, (n_new, tok.shape[1])).astype(tok.dtype)
    new_cols = grow.normal(init_scale, (head.shape[0], n_new)).astype(head.dtype)
    out.params["embed.tok"] = Tensor(np.concatenate([tok, new_rows], axis=0), requires_grad=True)
    out.params["head.w"] = Tensor(np.concatenate([head, new_cols], axis=1), requires_grad=True)
    out.n_vocab_rows = model.n_vocab_rows + n_new
    return out


def generate(
    model: LanguageModel,
    prompt,
    max_new: int,
    mode: str = "greedy",
    top_k: int = 8,
    temperature: float = 1.0,
    stop_ids=frozenset(),
    allowed_ids=None,
    deltas=None,
    rng: Prng | None = None,
) -> list[int]:
    """Autoregressive continuation of `prompt`; returns the new ids only
    (including the stop id that ended decoding, when one was produced).

    With `allowed_ids`, decoding is restricted to that id set, which is how
    speech synthesis forces semantic-only output. Greedy mode is exactly
    deterministic; top-k draws from the caller's Prng.
    """
    prompt = [int(p) for p in prompt]
    if not prompt:
        raise ContractError("prompt must be non-empty")
    if mode not in ("greedy", "top_k"):
        raise ContractError(f"unknown decoding mode {mode!r}")
    if mode == "top_k" and rng is None:
        raise ContractError("top_k decoding needs a Prng")
    allow_mask = None
    if allowed_ids is not None:
        allow_mask = np.full(model.n_vocab_rows, -np.inf, dtype=np.float64)
        allow_mask[sorted(int(i) for i in allowed_ids)] = 0.0
    ids = list(prompt)
    out: list[int] = []
    with ad.no_grad():
        for _ in range(max_new):
            logits = lm_forward(model, np.asarray(ids[-model.cfg.max_seq_len :]), deltas)
            row = logits.data[-1].astype(np.float64)
            if allow_mask is not None:
                row = row + allow_mask
            if mode == "greedy" or temperature <= 0.0:
                nxt = int(row.argmax())
            else:
                k = min(top_k, np.isfinite(row).sum())
                top = np.argpartition(row, -k)[-k:]
                top = top[np.argsort(-row[top], kind="stable")]
                probs = ad.softmax_probs(row[top] / max(temperature, 1e-12))
                nxt = int(top[rng.choice(len(top), 1, p=probs)[0]])
            out.append(nxt)
            ids.append(nxt)
            if nxt in stop_ids:
                break
    return out
