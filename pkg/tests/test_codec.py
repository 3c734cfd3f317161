"""Semantic VQ and RVQ codec against brute-force oracles, plus the fitted
toy-corpus codec's quality floors."""

import itertools
import math

import numpy as np
import pytest

from molespeech.audio import ALPHABET, Waveform, oracle_transcribe, render, spectra
from molespeech.codec import (
    CodecConfig,
    RvqCodec,
    acoustic_encode,
    fit_acoustic_codec,
    fit_semantic_codebook,
    lloyd_kmeans,
    nearest_centroid,
    rvq_dequantize,
    rvq_quantize,
    rvq_quantize_batch,
    semantic_encode,
    vocoder_decode,
)
from molespeech.errors import DataError, ShapeError
from molespeech.prng import Prng

from test_audio import random_strings


def snr_db(ref: np.ndarray, rec: np.ndarray) -> float:
    err = ((ref - rec) ** 2).sum()
    if err == 0:
        return 300.0
    return 10.0 * math.log10((ref**2).sum() / err)


def brute_force_nearest(point: np.ndarray, centroids: np.ndarray) -> int:
    best, best_d = 0, None
    for i, c in enumerate(centroids):
        d = float(((point - c) ** 2).sum())
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def corpus_frames(seed: int, n_strings: int = 120) -> np.ndarray:
    waves = [render(s) for s in random_strings(seed, n_strings)]
    frames = np.concatenate([w.frames() for w in waves], axis=0)
    return np.concatenate([frames, np.zeros((64, 64), dtype=np.float32)], axis=0)


@pytest.fixture(scope="module")
def toy_codec():
    cfg = CodecConfig()
    frames = corpus_frames(11)
    rng = Prng(20240501)
    codec = fit_acoustic_codec(frames, cfg, rng.child("codec"))
    book = fit_semantic_codebook(
        spectra(Waveform(frames.reshape(-1))), cfg.k_semantic, cfg.semantic_iters, rng.child("sem"), id_base=64
    )
    return codec, book


class TestKmeans:
    def test_objective_monotone(self):
        rng = Prng(5)
        pts = rng.normal(1.0, (400, 8))
        _, hist = lloyd_kmeans(pts, 16, 25, rng.child("fit"))
        assert all(a >= b - 1e-12 for a, b in zip(hist, hist[1:]))

    def test_k1_is_mean(self):
        rng = Prng(6)
        pts = rng.normal(1.0, (100, 5))
        cents, _ = lloyd_kmeans(pts, 1, 5, rng.child("fit"))
        np.testing.assert_allclose(cents[0], pts.mean(axis=0), rtol=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            lloyd_kmeans(np.zeros((3, 2)), 4, 5, Prng(0))

    def test_deterministic(self):
        rng_pts = Prng(7)
        pts = rng_pts.normal(1.0, (256, 6))
        a, _ = lloyd_kmeans(pts, 8, 15, Prng(42))
        b, _ = lloyd_kmeans(pts, 8, 15, Prng(42))
        np.testing.assert_array_equal(a, b)

    def test_nearest_matches_brute_force(self):
        rng = Prng(8)
        pts = rng.normal(1.0, (200, 4))
        cents = rng.normal(1.0, (32, 4))
        cents[5] = cents[9]  # duplicate row to exercise tie-breaking
        codes, _ = nearest_centroid(pts, cents)
        for p, c in zip(pts, codes):
            assert brute_force_nearest(p, cents) == c


class TestRvq:
    def make_codebooks(self):
        rng = Prng(33)
        cbs = rng.normal(1.0, (4, 64, 16)).astype(np.float32)
        cbs[:, 0] = 0.0
        return cbs

    def test_zero_latent_gives_zero_codes(self):
        cbs = self.make_codebooks()
        codes = rvq_quantize(np.zeros(16), cbs)
        assert (codes == 0).all()
        np.testing.assert_array_equal(rvq_dequantize(codes, cbs), np.zeros(16))

    def test_residual_norm_monotone(self):
        cbs = self.make_codebooks()
        rng = Prng(34)
        latents = rng.normal(2.0, (1000, 16))
        residual = latents.copy()
        prev = np.linalg.norm(residual, axis=1)
        for s in range(4):
            codes, _ = nearest_centroid(residual, cbs[s].astype(np.float64))
            residual = residual - cbs[s].astype(np.float64)[codes]
            cur = np.linalg.norm(residual, axis=1)
            assert (cur <= prev + 1e-9).all()
            prev = cur

    def test_exhaustive_two_stage_instance(self):
        # d=2, K=4, S=2 hand-set so the coarse lattice and fine offsets are
        # well separated: every input lands on a unique (coarse, fine) pair
        # and full enumeration over the 16 pairs must agree with the codes.
        cbs = np.zeros((2, 4, 2), dtype=np.float32)
        cbs[0] = [[0, 0], [1, 0], [0, 1], [1, 1]]
        cbs[1] = [[0, 0], [0.25, 0], [0, 0.25], [-0.25, 0.25]]
        rng = Prng(35)
        for i, j in itertools.product(range(4), range(4)):
            x = cbs[0][i] + cbs[1][j] + rng.uniform(2) * 0.08 - 0.04
            best = min(
                itertools.product(range(4), range(4)),
                key=lambda pair: (float(((x - cbs[0][pair[0]] - cbs[1][pair[1]]) ** 2).sum()), pair),
            )
            assert best == (i, j)
            codes = rvq_quantize(x, cbs)
            assert tuple(codes) == best
            np.testing.assert_allclose(rvq_dequantize(codes, cbs), cbs[0][i] + cbs[1][j], atol=1e-7)
            assert codes[0] == brute_force_nearest(x, cbs[0])
            assert codes[1] == brute_force_nearest(x - cbs[0][codes[0]], cbs[1])

    def test_code_range_validation(self):
        cbs = self.make_codebooks()
        with pytest.raises(ShapeError):
            rvq_dequantize(np.array([[70], [0], [0], [0]]), cbs)

    def test_batch_matches_single(self):
        cbs = self.make_codebooks()
        rng = Prng(36)
        latents = rng.normal(1.0, (20, 16))
        batch = rvq_quantize_batch(latents, cbs)
        for i, x in enumerate(latents):
            np.testing.assert_array_equal(rvq_quantize(x, cbs), batch[:, i])


class TestFittedCodec:
    def test_round_trip_snr_floor(self, toy_codec):
        codec, _ = toy_codec
        held_out = np.concatenate([render(s).frames() for s in random_strings(909, 30)], axis=0)
        rec = vocoder_decode(rvq_quantize_batch(held_out @ codec.enc_w + codec.enc_b, codec.codebooks), codec)
        assert snr_db(held_out.reshape(-1), rec.samples) >= 25.0

    def test_rate_distortion_monotone_in_stages(self, toy_codec):
        codec, _ = toy_codec
        frames = np.concatenate([render(s).frames() for s in random_strings(910, 20)], axis=0)
        latents = frames.astype(np.float64) @ codec.enc_w.astype(np.float64) + codec.enc_b
        codes = rvq_quantize_batch(latents, codec.codebooks)
        prev = None
        for s in range(1, codec.n_stages + 1):
            partial = rvq_dequantize(codes[:s], codec.codebooks)
            err = float(((latents - partial) ** 2).sum())
            if prev is not None:
                assert err <= prev + 1e-9
            prev = err

    def test_full_pipeline_transcription(self, toy_codec):
        codec, _ = toy_codec
        for s in random_strings(911, 100):
            wave = render(s)
            rec = vocoder_decode(acoustic_encode(wave, codec), codec)
            assert oracle_transcribe(rec) == s

    def test_grid_shape_contracts(self, toy_codec):
        codec, _ = toy_codec
        wave = render("3a7")
        grid = acoustic_encode(wave, codec)
        assert grid.shape == (4, 12)
        assert vocoder_decode(grid, codec).samples.size == 12 * 64

    def test_all_zero_code_grid(self, toy_codec):
        codec, _ = toy_codec
        wave = vocoder_decode(np.zeros((4, 3), dtype=np.int64), codec)
        frames = wave.frames()
        assert np.array_equal(frames[0], frames[1]) and np.array_equal(frames[1], frames[2])

    def test_fit_deterministic(self):
        cfg = CodecConfig(ae_steps=120, decoder_ft_steps=40, rvq_iters=6)
        frames = corpus_frames(12, n_strings=40)
        a = fit_acoustic_codec(frames, cfg, Prng(77).child("codec"))
        b = fit_acoustic_codec(frames, cfg, Prng(77).child("codec"))
        np.testing.assert_array_equal(a.enc_w, b.enc_w)
        np.testing.assert_array_equal(a.codebooks, b.codebooks)
        np.testing.assert_array_equal(a.dec_w, b.dec_w)

    def test_insufficient_corpus(self):
        with pytest.raises(DataError):
            fit_acoustic_codec(np.zeros((100, 64), dtype=np.float32), CodecConfig(), Prng(1))


class TestSemantic:
    def test_symbol_consistency(self, toy_codec):
        _, book = toy_codec
        per_symbol: dict[str, set] = {c: set() for c in ALPHABET}
        total = 0
        for s in random_strings(912, 80):
            ids = semantic_encode(render(s), book)
            total += len(ids)
            for i, ch in enumerate(s):
                per_symbol[ch].update(ids[4 * i : 4 * (i + 1)].tolist())
        assert total >= 1000
        assert all(len(v) <= 1 for v in per_symbol.values())
        seen = [next(iter(v)) for v in per_symbol.values() if v]
        assert len(set(seen)) == len(seen)  # distinct symbols use distinct tokens

    def test_token_rate_and_range(self, toy_codec):
        _, book = toy_codec
        ids = semantic_encode(render("0a 9"), book)
        assert ids.shape == (16,)
        assert (ids >= 64).all() and (ids < 64 + book.k).all()

    def test_encode_deterministic(self, toy_codec):
        _, book = toy_codec
        a = semantic_encode(render("deadbee"), book)
        b = semantic_encode(render("deadbee"), book)
        np.testing.assert_array_equal(a, b)

    def test_nearest_assignment_matches_brute_force(self, toy_codec):
        _, book = toy_codec
        feats = spectra(render("0123456789abcde "))
        ids = semantic_encode(render("0123456789abcde "), book)
        for f, t in zip(feats.astype(np.float64), ids):
            assert brute_force_nearest(f, book.centroids.astype(np.float64)) == t - book.id_base

    def test_objective_history_monotone(self, toy_codec):
        _, book = toy_codec
        hist = book.objective_history
        assert len(hist) >= 1
        assert all(a >= b - 1e-12 for a, b in zip(hist, hist[1:]))
