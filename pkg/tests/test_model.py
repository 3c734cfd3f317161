"""Transformer LM: shapes, causality, vocabulary growth, decoding."""

import math

import numpy as np
import pytest

from molespeech import autodiff as ad
from molespeech.autodiff import Tensor, cross_entropy
from molespeech.errors import ContractError, ShapeError
from molespeech.model import LanguageModel, LmConfig, extend_vocabulary, generate, lm_forward
from molespeech.prng import Prng
from molespeech.vocab import UnifiedVocab

from test_autodiff import check_grad


def tiny_cfg(**kw):
    base = dict(d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq_len=64)
    base.update(kw)
    return LmConfig(**base)


def randomized_model(cfg, seed, scale=0.05):
    """Model with every weight random (incl. the zero-init projections)."""
    m = LanguageModel.init(cfg, Prng(seed))
    r = Prng(seed).child("fill")
    for name, p in m.params.items():
        if name.endswith(("attn.wo", "ff.w2")):
            p.data = r.normal(scale, p.data.shape).astype(np.float32)
    return m


class TestForward:
    def test_logit_shape(self):
        m = LanguageModel.init(tiny_cfg(), Prng(1))
        logits = lm_forward(m, np.arange(7))
        assert logits.data.shape == (7, m.n_vocab_rows)

    def test_causal_prefix_property(self):
        m = randomized_model(tiny_cfg(), 2)
        toks = Prng(3).integers(0, 64, size=33)
        with ad.no_grad():
            full = lm_forward(m, toks).data
            for t in (0, 4, 15, 32):
                prefix = lm_forward(m, toks[: t + 1]).data
                np.testing.assert_allclose(full[: t + 1], prefix, atol=2e-5, rtol=0)

    def test_untrained_loss_near_log_vocab(self):
        cfg = LmConfig()
        m = LanguageModel.init(cfg, Prng(11))
        rng = Prng(12)
        losses = []
        with_batches = rng.integers(0, 64, size=(1000, 16))
        for i in range(0, 1000, 50):
            batch = with_batches[i : i + 50]
            logits = lm_forward(m, batch[:, :-1])
            loss = cross_entropy(
                logits.reshape(-1, m.n_vocab_rows), batch[:, 1:].reshape(-1), ignore_id=-1
            )
            losses.append(loss.item())
        mean = sum(losses) / len(losses)
        assert abs(mean - math.log(64)) / math.log(64) < 0.05

    def test_out_of_range_token(self):
        m = LanguageModel.init(tiny_cfg(), Prng(1))
        with pytest.raises(IndexError):
            lm_forward(m, np.array([0, 999]))

    def test_over_length(self):
        m = LanguageModel.init(tiny_cfg(max_seq_len=8), Prng(1))
        with pytest.raises(ShapeError):
            lm_forward(m, np.zeros(9, dtype=np.int64))

    def test_gradient_check_two_layer_miniature(self):
        cfg = LmConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16, vocab=UnifiedVocab())
        with ad.use_dtype(np.float64):
            m = LanguageModel.init(cfg, Prng(21), n_vocab_rows=12)
            fill = Prng(22)
            for name, p in m.params.items():
                p.data = fill.normal(0.2, p.data.shape)
            toks = np.array([0, 5, 3, 11, 7])
            labels = np.array([5, 3, 11, 7, 2])

            def loss():
                return cross_entropy(lm_forward(m, toks), labels, ignore_id=-1)

            picked = {k: m.params[k] for k in ("embed.tok", "embed.pos", "layers.0.attn.wq", "layers.1.ff.w1", "layers.0.attn_norm.g", "head.w")}
            check_grad(loss, list(picked.values()), Prng(23), n_coords=20)


class TestExtendVocabulary:
    def test_shapes_after_growth(self):
        m = LanguageModel.init(tiny_cfg(), Prng(31))
        grown = extend_vocabulary(m, 64, 0.02, Prng(32))
        assert grown.params["embed.tok"].data.shape == (128, 32)
        assert grown.params["head.w"].data.shape == (32, 128)
        assert grown.n_vocab_rows == 128

    def test_old_logits_bit_identical(self):
        m = randomized_model(tiny_cfg(), 33)
        toks = Prng(34).integers(0, 64, size=20)
        with ad.no_grad():
            before = lm_forward(m, toks).data
            after = lm_forward(extend_vocabulary(m, 64, 0.02, Prng(35)), toks).data
        assert np.array_equal(before, after[:, :64])

    def test_old_weights_bit_identical(self):
        m = LanguageModel.init(tiny_cfg(), Prng(36))
        grown = extend_vocabulary(m, 16, 0.02, Prng(37))
        for name, p in m.params.items():
            if name == "embed.tok":
                assert np.array_equal(p.data, grown.params[name].data[:64])
            elif name == "head.w":
                assert np.array_equal(p.data, grown.params[name].data[:, :64])
            else:
                assert np.array_equal(p.data, grown.params[name].data)

    def test_zero_growth_rejected(self):
        m = LanguageModel.init(tiny_cfg(), Prng(38))
        with pytest.raises(ContractError):
            extend_vocabulary(m, 0, 0.02, Prng(39))


class TestGenerate:
    def test_greedy_deterministic(self):
        m = randomized_model(tiny_cfg(), 41)
        a = generate(m, [1, 2, 3], max_new=10)
        b = generate(m, [1, 2, 3], max_new=10)
        assert a == b and len(a) == 10

    def test_top_k_zero_temperature_matches_greedy(self):
        m = randomized_model(tiny_cfg(), 42)
        greedy = generate(m, [5, 6], max_new=8)
        cold = generate(m, [5, 6], max_new=8, mode="top_k", top_k=4, temperature=1e-9, rng=Prng(0))
        assert greedy == cold

    def test_hand_built_model_repeats_favored_token(self):
        cfg = LmConfig(d_model=8, n_layers=1, n_heads=1, d_ff=8, max_seq_len=32)
        m = LanguageModel.init(cfg, Prng(43), n_vocab_rows=2)
        # Constant residual stream: identical embeddings, no position signal,
        # zero attention/FF output projections (the init default).
        m.params["embed.tok"].data[:] = 1.0
        m.params["embed.pos"].data[:] = 0.0
        head = np.zeros((8, 2), dtype=np.float32)
        head[:, 1] = 1.0 / 8.0
        m.params["head.w"].data = head
        # Hand oracle: h = ones/sqrt(1+eps); logit_1 = sum(h)/8 > 0 = logit_0.
        h = 1.0 / math.sqrt(1.0 + 1e-6)
        with ad.no_grad():
            logits = lm_forward(m, np.array([0])).data
        assert logits[0, 1] == pytest.approx(8 * h / 8.0, rel=1e-5)
        assert logits[0, 0] == 0.0
        assert generate(m, [0], max_new=6) == [1, 1, 1, 1, 1, 1]

    def test_stop_and_restriction(self):
        m = randomized_model(tiny_cfg(), 44)
        out = generate(m, [1], max_new=30, allowed_ids={7, 9}, stop_ids={9})
        assert set(out) <= {7, 9}
        if 9 in out:
            assert out[-1] == 9 and out.count(9) == 1

    def test_empty_prompt_rejected(self):
        m = LanguageModel.init(tiny_cfg(), Prng(45))
        with pytest.raises(ContractError):
            generate(m, [], max_new=3)
