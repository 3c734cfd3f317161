"""Acoustic language model: semantic tokens -> multi-codebook code grid.

Codebook s of the (S, T) grid is shifted right by s steps, so all S
codebooks decode autoregressively in T + S - 1 steps instead of S * T;
the triangular margins are PAD. The model embeds the semantic sequence as
a prefix, embeds each delayed step as the sum of its per-codebook
embeddings, runs a small causal decoder stack, and predicts the next
delayed step through S per-codebook heads. PAD is an input embedding only,
never a prediction target, and generated grids can never contain it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cross_entropy, matmul
from .errors import ConfigError, ContractError, DataError, FormatError
from .model import decoder_stack, init_decoder_params
from .optim import AdamWState, adamw_step, clip_global_norm
from .prng import Prng


@dataclass
class AcousticLmConfig:
    n_stages: int = 4
    n_entries: int = 64
    n_semantic: int = 64
    sem_offset: int = 64  # semantic ids arrive in the main LM's id range
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def pad_code(self) -> int:
        return self.n_entries


def apply_delay(grid: np.ndarray, pad_code: int) -> np.ndarray:
    """(S, T) -> (S, T + S - 1) with codebook s occupying steps s..s+T-1."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ContractError(f"expected a rectangular (S, T) grid, got {grid.shape}")
    s, t = grid.shape
    out = np.full((s, t + s - 1), pad_code, dtype=np.int64)
    for row in range(s):
        out[row, row : row + t] = grid[row]
    return out


def invert_delay(delayed: np.ndarray, pad_code: int) -> np.ndarray:
    """Exact inverse of apply_delay; malformed PAD margins are an error."""
    delayed = np.asarray(delayed)
    if delayed.ndim != 2:
        raise FormatError(f"expected (S, T + S - 1) delayed grid, got {delayed.shape}")
    s, width = delayed.shape
    t = width - s + 1
    if t < 0:
        raise FormatError(f"delayed grid of width {width} too narrow for {s} codebooks")
    for row in range(s):
        margin = np.concatenate([delayed[row, :row], delayed[row, row + t :]])
        if (margin != pad_code).any():
            raise FormatError(f"codebook {row}: PAD margin holds non-PAD codes")
        if (delayed[row, row : row + t] == pad_code).any():
            raise FormatError(f"codebook {row}: PAD inside the valid span")
    return np.stack([delayed[row, row : row + t] for row in range(s)], axis=0)


class AcousticLm:
    def __init__(self, cfg: AcousticLmConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: AcousticLmConfig, rng: Prng, init_scale: float = 0.02) -> "AcousticLm":
        w = rng.child("aclm-init")
        params: dict[str, Tensor] = {
            "emb.sem": Tensor(w.normal(init_scale, (cfg.n_semantic, cfg.d_model)).astype(np.float32), requires_grad=True),
            "emb.pos": Tensor(w.normal(init_scale, (cfg.max_seq_len, cfg.d_model)).astype(np.float32), requires_grad=True),
        }
        for s in range(cfg.n_stages):
            params[f"emb.cb{s}"] = Tensor(
                w.normal(init_scale, (cfg.n_entries + 1, cfg.d_model)).astype(np.float32), requires_grad=True
            )
        params.update(init_decoder_params(cfg.n_layers, cfg.d_model, cfg.d_ff, w, init_scale))
        for s in range(cfg.n_stages):
            params[f"head.cb{s}"] = Tensor(
                w.normal(init_scale, (cfg.d_model, cfg.n_entries)).astype(np.float32), requires_grad=True
            )
        return cls(cfg, params)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def _semantic_rows(aclm: AcousticLm, sem: np.ndarray) -> np.ndarray:
    rows = np.asarray(sem, dtype=np.int64) - aclm.cfg.sem_offset
    if rows.size and (rows.min() < 0 or rows.max() >= aclm.cfg.n_semantic):
        raise IndexError(f"semantic id outside [{aclm.cfg.sem_offset}, {aclm.cfg.sem_offset + aclm.cfg.n_semantic})")
    return rows


def aclm_forward(aclm: AcousticLm, sem: np.ndarray, delayed_in: np.ndarray) -> list[Tensor]:
    """Teacher-forced forward.

    sem: (B, T_sem) conditioning ids; delayed_in: (B, S, L_in) delayed-step
    inputs (PAD in the margins). Returns per-codebook logits over the whole
    (T_sem + L_in) sequence; position T_sem - 1 + j predicts delayed step j.
    """
    cfg = aclm.cfg
    sem_rows = _semantic_rows(aclm, sem)
    x = ad.embedding(aclm.params["emb.sem"], sem_rows)
    if delayed_in.shape[-1]:
        step = ad.embedding(aclm.params["emb.cb0"], delayed_in[:, 0, :])
        for s in range(1, cfg.n_stages):
            step = ad.add(step, ad.embedding(aclm.params[f"emb.cb{s}"], delayed_in[:, s, :]))
        x = ad.concat([x, step], axis=1)
    total = x.data.shape[1]
    if total > cfg.max_seq_len:
        raise DataError(f"sequence of {total} steps exceeds max_seq_len {cfg.max_seq_len}")
    x = ad.add(x, ad.embedding(aclm.params["emb.pos"], np.arange(total)))
    x = decoder_stack(aclm.params, x, cfg.n_layers, cfg.n_heads)
    return [matmul(x, aclm.params[f"head.cb{s}"]) for s in range(cfg.n_stages)]


def aclm_loss(aclm: AcousticLm, sem: np.ndarray, grids: np.ndarray) -> Tensor:
    """Sum of per-codebook cross-entropies; PAD target cells are ignored."""
    cfg = aclm.cfg
    bsz, t = np.asarray(sem).shape
    delayed = np.stack([apply_delay(g, cfg.pad_code) for g in grids], axis=0)  # (B, S, L)
    length = delayed.shape[2]
    logits = aclm_forward(aclm, sem, delayed[:, :, :-1])
    total = t + length - 1
    ignore = cfg.pad_code
    loss = None
    for s in range(cfg.n_stages):
        labels = np.full((bsz, total), ignore, dtype=np.int64)
        labels[:, t - 1 : t - 1 + length] = delayed[:, s, :]
        piece = cross_entropy(logits[s].reshape(-1, cfg.n_entries), labels.reshape(-1), ignore_id=ignore)
        loss = piece if loss is None else loss + piece
    return loss


def acoustic_generate(aclm: AcousticLm, sem: np.ndarray) -> np.ndarray:
    """Greedy decode of the (S, T) grid for one semantic sequence."""
    cfg = aclm.cfg
    sem = np.asarray(sem, dtype=np.int64)
    if sem.ndim != 1 or sem.size == 0:
        raise ContractError("acoustic generation needs a non-empty 1-D semantic sequence")
    t = sem.size
    length = t + cfg.n_stages - 1
    delayed = np.full((cfg.n_stages, length), cfg.pad_code, dtype=np.int64)
    with ad.no_grad():
        for j in range(length):
            logits = aclm_forward(aclm, sem[None, :], delayed[None, :, :j])
            for s in range(cfg.n_stages):
                if s <= j <= s + t - 1:
                    delayed[s, j] = int(logits[s].data[0, -1].argmax())
    return invert_delay(delayed, cfg.pad_code)


def train_acoustic_lm(
    aclm: AcousticLm,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    opt_cfg,
    steps: int,
    rng: Prng,
    batch_size: int = 32,
    on_step=None,
) -> list[dict]:
    """Teacher-forced training on aligned (semantic sequence, grid) pairs."""
    if not pairs:
        raise DataError("no training pairs")
    for sem, grid in pairs:
        if np.asarray(grid).shape != (aclm.cfg.n_stages, len(sem)):
            raise DataError(
                f"misaligned pair: {len(sem)} semantic tokens vs grid {np.asarray(grid).shape};"
                " expected one grid column per semantic token"
            )
    by_len: dict[int, list[int]] = {}
    for i, (sem, _) in enumerate(pairs):
        by_len.setdefault(len(sem), []).append(i)
    groups = [np.array(v) for _, v in sorted(by_len.items())]
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    group_p = sizes / sizes.sum()

    trainable = {f"aclm.{k}": p for k, p in aclm.params.items()}
    for p in trainable.values():
        p.requires_grad = True
    state = AdamWState.for_params(trainable)
    batches = rng.child("batches")
    records = []
    for step in range(steps):
        g = groups[int(batches.choice(len(groups), 1, p=group_p)[0])]
        idx = [int(g[i]) for i in batches.integers(0, len(g), size=batch_size)]
        sem = np.stack([pairs[i][0] for i in idx], axis=0)
        grids = np.stack([pairs[i][1] for i in idx], axis=0)
        loss = aclm_loss(aclm, sem, grids)
        loss.backward()
        clip_global_norm(trainable, 1.0)
        lr = adamw_step(trainable, state, opt_cfg, step)
        rec = {"step": step, "loss": loss.item(), "lr": lr}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records
