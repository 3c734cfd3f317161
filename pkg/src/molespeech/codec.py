"""Discrete audio tokenizers: semantic VQ codebook and RVQ acoustic codec.

The semantic tokenizer is a k-means codebook over per-frame log-magnitude
spectra; one token per 64-sample frame. The acoustic tokenizer is a linear
autoencoder whose 16-dim latents are quantized by a multi-stage residual
vector quantizer; its decoder doubles as the vocoder. Entry 0 of every RVQ
stage is pinned to the zero vector, so picking it leaves the residual
unchanged and the stage-to-stage residual norm can never grow.

All fitting is deterministic given the caller's Prng stream. Ties in every
nearest-neighbour search break toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import FRAME, Waveform, spectra
from .autodiff import Tensor, matmul, tmean, tsum
from .errors import ContractError, DataError, ShapeError
from .optim import AdamWConfig, AdamWState, adamw_step
from .prng import Prng


@dataclass
class CodecConfig:
    k_semantic: int = 64
    semantic_iters: int = 25
    semantic_id_base: int = 64
    rvq_stages: int = 4
    rvq_entries: int = 64
    rvq_iters: int = 20
    d_latent: int = 16
    ae_steps: int = 1500
    ae_batch: int = 128
    ae_lr: float = 1e-2
    decoder_ft_steps: int = 500


@dataclass
class SemanticCodebook:
    centroids: np.ndarray  # (K, 33)
    id_base: int
    objective_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class RvqCodec:
    enc_w: np.ndarray  # (frame, d_latent)
    enc_b: np.ndarray
    dec_w: np.ndarray  # (d_latent, frame)
    dec_b: np.ndarray
    codebooks: np.ndarray  # (stages, entries, d_latent); entry 0 pinned to zero

    @property
    def n_stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def n_entries(self) -> int:
        return self.codebooks.shape[1]


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lowest-index argmin of squared Euclidean distance, plus the distances."""
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    d2 = np.maximum(p2 - 2.0 * (points @ centroids.T) + c2, 0.0)
    return d2.argmin(axis=1), d2


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: Prng, pinned_zero: bool) -> np.ndarray:
    n, d = points.shape
    centroids = np.empty((k, d), dtype=points.dtype)
    if pinned_zero:
        centroids[0] = 0.0
        start = 1
        dist = (points * points).sum(axis=1)
    else:
        centroids[0] = points[int(rng.integers(0, n))]
        start = 1
        dist = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(start, k):
        total = dist.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, 1, p=dist / total)[0])
        centroids[i] = points[idx]
        dist = np.minimum(dist, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def lloyd_kmeans(
    points: np.ndarray, k: int, iters: int, rng: Prng, pinned_zero: bool = False
) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded from the point currently farthest from its
    centroid. With pinned_zero, entry 0 stays the exact zero vector and is
    excluded from updates and re-seeding. Returns float64 centroids and the
    per-iteration mean-squared-distance objective (non-increasing).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"expected (n, d) points, got {points.shape}")
    if points.shape[0] < k:
        raise DataError(f"k-means needs at least {k} samples, got {points.shape[0]}")
    centroids = _kmeans_pp_seed(points, k, rng, pinned_zero)
    history: list[float] = []
    prev_codes = None
    first_free = 1 if pinned_zero else 0
    for _ in range(iters):
        codes, d2 = nearest_centroid(points, centroids)
        chosen = d2[np.arange(points.shape[0]), codes]
        history.append(float(chosen.mean()))
        counts = np.bincount(codes, minlength=k)
        for empty in np.nonzero(counts[first_free:] == 0)[0] + first_free:
            far = int(chosen.argmax())
            centroids[empty] = points[far]
            codes[far] = empty
            chosen[far] = 0.0
            counts = np.bincount(codes, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, codes, points)
        nonzero = counts > 0
        nonzero[:first_free] = False
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        if prev_codes is not None and np.array_equal(codes, prev_codes):
            break
        prev_codes = codes
    return centroids, history


# -- semantic tokenizer -------------------------------------------------------


def fit_semantic_codebook(frames: np.ndarray, k: int, iters: int, rng: Prng, id_base: int) -> SemanticCodebook:
    """k-means over frame spectra; token id t maps to centroid t - id_base."""
    centroids, history = lloyd_kmeans(frames, k, iters, rng)
    return SemanticCodebook(centroids=centroids.astype(np.float32), id_base=id_base, objective_history=history)


def semantic_encode(wave: Waveform, book: SemanticCodebook) -> np.ndarray:
    """One token per frame, in the language model's semantic id range."""
    codes, _ = nearest_centroid(spectra(wave).astype(np.float64), book.centroids.astype(np.float64))
    return codes.astype(np.int64) + book.id_base


# -- residual vector quantizer -----------------------------------------------


def rvq_quantize_batch(latents: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Stage-by-stage nearest-entry codes for a batch of latents: (S, N)."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != codebooks.shape[2]:
        raise ShapeError(f"latents {latents.shape} incompatible with codebooks {codebooks.shape}")
    residual = latents.copy()
    codes = np.empty((codebooks.shape[0], latents.shape[0]), dtype=np.int64)
    for s in range(codebooks.shape[0]):
        cb = codebooks[s].astype(np.float64)
        codes[s], _ = nearest_centroid(residual, cb)
        residual -= cb[codes[s]]
    return codes


def rvq_quantize(latent: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    return rvq_quantize_batch(np.asarray(latent)[None, :], codebooks)[:, 0]


def rvq_dequantize(codes: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Sum of the selected entries; accepts (S,) for one latent or (S, N)."""
    codes = np.asarray(codes, dtype=np.int64)
    single = codes.ndim == 1
    if single:
        codes = codes[:, None]
    s_used = codes.shape[0]
    if s_used > codebooks.shape[0]:
        raise ShapeError(f"{s_used} stage codes but only {codebooks.shape[0]} codebooks")
    if codes.size and (codes.min() < 0 or codes.max() >= codebooks.shape[1]):
        raise ShapeError(f"code id out of range [0, {codebooks.shape[1]})")
    out = np.zeros((codes.shape[1], codebooks.shape[2]), dtype=np.float64)
    for s in range(s_used):
        out += codebooks[s].astype(np.float64)[codes[s]]
    return out[0] if single else out


def encode_latents(codec: RvqCodec, frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float64) @ codec.enc_w.astype(np.float64) + codec.enc_b


def decode_latents(codec: RvqCodec, latents: np.ndarray) -> np.ndarray:
    return latents @ codec.dec_w.astype(np.float64) + codec.dec_b


def acoustic_encode(wave: Waveform, codec: RvqCodec) -> np.ndarray:
    """Waveform -> (stages, frames) grid of acoustic code ids."""
    return rvq_quantize_batch(encode_latents(codec, wave.frames()), codec.codebooks)


def vocoder_decode(grid: np.ndarray, codec: RvqCodec) -> Waveform:
    """(stages, frames) grid -> waveform, reusing the autoencoder decoder."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != codec.n_stages:
        raise ShapeError(f"expected ({codec.n_stages}, T) grid, got {grid.shape}")
    latents = rvq_dequantize(grid, codec.codebooks)
    frames = decode_latents(codec, latents)
    return Waveform(frames.reshape(-1).astype(np.float32))


# -- codec fitting -------------------------------------------------------------


def _train_mse(params: dict[str, Tensor], forward, targets_fn, steps: int, batch: int, lr: float, n: int, rng: Prng) -> None:
    cfg = AdamWConfig(lr_max=lr, lr_min=lr * 1e-2, total_steps=max(steps, 1))
    state = AdamWState.for_params(params)
    for step in range(steps):
        idx = rng.integers(0, n, size=batch)
        pred, target = forward(idx), targets_fn(idx)
        err = pred - Tensor(target)
        loss = tmean(tsum(err * err, axis=1))
        loss.backward()
        adamw_step(params, state, cfg, step)


def fit_acoustic_codec(frames: np.ndarray, cfg: CodecConfig, rng: Prng) -> RvqCodec:
    """Three-phase fit: plain autoencoder, greedy per-stage residual k-means
    with a pinned zero entry, then decoder-only fine-tuning on quantized
    latents (the quantization error the vocoder will actually see)."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[1] != FRAME:
        raise ShapeError(f"expected (n, {FRAME}) frames, got {frames.shape}")
    if frames.shape[0] < 10 * cfg.rvq_entries:
        raise DataError(f"codec fit needs >= {10 * cfg.rvq_entries} frames, got {frames.shape[0]}")

    init = rng.child("ae-init")
    scale = (2.0 / (FRAME + cfg.d_latent)) ** 0.5
    enc_w = Tensor(init.normal(scale, (FRAME, cfg.d_latent)).astype(np.float32), requires_grad=True)
    enc_b = Tensor(np.zeros(cfg.d_latent, dtype=np.float32), requires_grad=True)
    dec_w = Tensor(init.normal(scale, (cfg.d_latent, FRAME)).astype(np.float32), requires_grad=True)
    dec_b = Tensor(np.zeros(FRAME, dtype=np.float32), requires_grad=True)

    def ae_forward(idx):
        x = Tensor(frames[idx])
        z = matmul(x, enc_w) + enc_b
        return matmul(z, dec_w) + dec_b

    params = {"enc.w": enc_w, "enc.b": enc_b, "dec.w": dec_w, "dec.b": dec_b}
    _train_mse(params, ae_forward, lambda idx: frames[idx], cfg.ae_steps, cfg.ae_batch, cfg.ae_lr, frames.shape[0], rng.child("ae-batches"))

    latents = frames.astype(np.float64) @ enc_w.data.astype(np.float64) + enc_b.data
    residual = latents.copy()
    codebooks = np.zeros((cfg.rvq_stages, cfg.rvq_entries, cfg.d_latent), dtype=np.float32)
    for s in range(cfg.rvq_stages):
        cents, _ = lloyd_kmeans(residual, cfg.rvq_entries, cfg.rvq_iters, rng.child(f"rvq-{s}"), pinned_zero=True)
        codebooks[s] = cents.astype(np.float32)
        codebooks[s, 0] = 0.0
        codes, _ = nearest_centroid(residual, codebooks[s].astype(np.float64))
        residual -= codebooks[s].astype(np.float64)[codes]

    quantized = rvq_dequantize(rvq_quantize_batch(latents, codebooks), codebooks).astype(np.float32)

    def dec_forward(idx):
        return matmul(Tensor(quantized[idx]), dec_w) + dec_b

    _train_mse(
        {"dec.w": dec_w, "dec.b": dec_b},
        dec_forward,
        lambda idx: frames[idx],
        cfg.decoder_ft_steps,
        cfg.ae_batch,
        cfg.ae_lr * 0.3,
        frames.shape[0],
        rng.child("dec-ft"),
    )

    return RvqCodec(
        enc_w=enc_w.data.copy(),
        enc_b=enc_b.data.copy(),
        dec_w=dec_w.data.copy(),
        dec_b=dec_b.data.copy(),
        codebooks=codebooks,
    )


def codec_state(codec: RvqCodec, book: SemanticCodebook) -> dict[str, np.ndarray]:
    """Flat parameter view used by the shared checkpoint container."""
    return {
        "codec.semantic.centroids": book.centroids,
        "codec.enc.w": codec.enc_w,
        "codec.enc.b": codec.enc_b,
        "codec.dec.w": codec.dec_w,
        "codec.dec.b": codec.dec_b,
        "codec.rvq.codebooks": codec.codebooks,
    }


def codec_from_state(state: dict[str, np.ndarray], id_base: int) -> tuple[RvqCodec, SemanticCodebook]:
    book = SemanticCodebook(centroids=state["codec.semantic.centroids"], id_base=id_base)
    codec = RvqCodec(
        enc_w=state["codec.enc.w"],
        enc_b=state["codec.enc.b"],
        dec_w=state["codec.dec.w"],
        dec_b=state["codec.dec.b"],
        codebooks=state["codec.rvq.codebooks"],
    )
    if codec.codebooks[:, 0].any():
        raise ContractError("RVQ entry 0 must be the zero vector in every stage")
    return codec, book
