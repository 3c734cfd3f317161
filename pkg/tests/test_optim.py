"""AdamW update rule, cosine schedule endpoints, clipping."""

import math

import numpy as np
import pytest

from molespeech.autodiff import Tensor
from molespeech.errors import ContractError, NumericError
from molespeech.optim import AdamWConfig, AdamWState, adamw_step, clip_global_norm, cosine_lr
from molespeech.prng import Prng


def adamw_oracle(p, g, m, v, t, lr, b1, b2, eps, wd):
    """Scalar reference for one AdamW update."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    p = p * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return p, m, v


def make_cfg(**kw):
    base = dict(lr_max=3e-4, total_steps=1000)
    base.update(kw)
    return AdamWConfig(**base)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = make_cfg(lr_min=1e-5)
        assert cosine_lr(cfg, 0) == pytest.approx(3e-4, abs=0.0)
        assert cosine_lr(cfg, cfg.total_steps) == pytest.approx(1e-5, abs=1e-20)
        assert cosine_lr(cfg, cfg.total_steps // 2) == pytest.approx((3e-4 + 1e-5) / 2, rel=1e-12)

    def test_monotone_non_increasing(self):
        cfg = make_cfg(lr_min=2e-5, total_steps=313)
        lrs = [cosine_lr(cfg, t) for t in range(cfg.total_steps + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range_step(self):
        cfg = make_cfg()
        with pytest.raises(ContractError):
            cosine_lr(cfg, cfg.total_steps + 1)


class TestAdamW:
    def test_matches_scalar_oracle(self):
        rng = Prng(9)
        cfg = make_cfg(weight_decay=0.01, lr_min=0.0)
        p = Tensor(rng.normal(1.0, (6,)).astype(np.float32), requires_grad=True)
        params = {"w": p}
        state = AdamWState.for_params(params)
        expect = p.data.astype(np.float64).copy()
        m = np.zeros(6)
        v = np.zeros(6)
        for step in range(5):
            g = rng.normal(1.0, (6,)).astype(np.float32)
            p.grad = g.copy()
            lr = adamw_step(params, state, cfg, step)
            for i in range(6):
                expect[i], m[i], v[i] = adamw_oracle(
                    expect[i], float(g[i]), m[i], v[i], step + 1, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay
                )
            np.testing.assert_allclose(p.data, expect, rtol=2e-5)
        assert state.t == 5

    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([1.5, -2.25, 0.5], dtype=np.float32), requires_grad=True)
        before = p.data.tobytes()
        params = {"w": p}
        state = AdamWState.for_params(params)
        for step in range(3):
            p.grad = np.zeros(3, dtype=np.float32)
            adamw_step(params, state, make_cfg(), step)
        assert p.data.tobytes() == before

    def test_zero_grad_pure_decay(self):
        cfg = make_cfg(weight_decay=0.1)
        p = Tensor(np.array([2.0, -4.0], dtype=np.float32), requires_grad=True)
        params = {"w": p}
        state = AdamWState.for_params(params)
        p.grad = np.zeros(2, dtype=np.float32)
        lr = adamw_step(params, state, cfg, 0)
        np.testing.assert_array_equal(p.data, np.array([2.0, -4.0], dtype=np.float32) * np.float32(1.0 - lr * 0.1))

    def test_missing_grad_leaves_param_untouched(self):
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        before = p.data.tobytes()
        params = {"w": p}
        state = AdamWState.for_params(params)
        adamw_step(params, state, make_cfg(), 0)
        assert p.data.tobytes() == before

    def test_non_finite_grad_names_parameter(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0, np.nan], dtype=np.float32)
        params = {"bad.weight": p}
        state = AdamWState.for_params(params)
        with pytest.raises(NumericError, match="bad.weight"):
            adamw_step(params, state, make_cfg(), 0)

    def test_step_beyond_schedule(self):
        p = Tensor(np.ones(2), requires_grad=True)
        params = {"w": p}
        state = AdamWState.for_params(params)
        with pytest.raises(ContractError):
            adamw_step(params, state, make_cfg(total_steps=2), 2)

    def test_lr_at_step_zero_is_lr_max(self):
        assert cosine_lr(make_cfg(), 0) == 3e-4


class TestClipping:
    def test_norm_reduced_to_cap(self):
        p1 = Tensor(np.zeros(3), requires_grad=True)
        p2 = Tensor(np.zeros(2), requires_grad=True)
        p1.grad = np.array([3.0, 0.0, 0.0], dtype=np.float32)
        p2.grad = np.array([0.0, 4.0], dtype=np.float32)
        norm = clip_global_norm({"a": p1, "b": p2}, 1.0)
        assert norm == pytest.approx(5.0)
        total = math.sqrt(float((p1.grad**2).sum() + (p2.grad**2).sum()))
        assert total == pytest.approx(1.0, rel=1e-5)

    def test_small_gradients_untouched(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.1, 0.2], dtype=np.float32)
        before = p.grad.copy()
        clip_global_norm({"a": p}, 1.0)
        np.testing.assert_array_equal(p.grad, before)

    def test_invariant_under_config_defaults(self):
        cfg = AdamWConfig(lr_max=3e-4, total_steps=10)
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.98
