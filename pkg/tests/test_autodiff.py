"""Tensor arithmetic and reverse-mode gradients against independent oracles."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molespeech import autodiff as ad
from molespeech.autodiff import Tensor, cross_entropy, matmul, softmax
from molespeech.errors import ContractError, NumericError, ShapeError
from molespeech.prng import Prng


def matmul_oracle(a, b):
    """Scalar triple-loop matrix product, independent of the Tensor path."""
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def numeric_grad(f, x: np.ndarray, n_coords: int, rng: Prng, h: float = 1e-5) -> list:
    """Central finite differences of scalar f at n_coords random coordinates."""
    flat = x.reshape(-1)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    grads = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        up = f()
        flat[c] = orig - h
        down = f()
        flat[c] = orig
        grads.append((int(c), (up - down) / (2 * h)))
    return grads


def check_grad(build_loss, params: list[Tensor], rng: Prng, n_coords: int = 40, tol: float = 1e-4):
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        for c, fd in numeric_grad(lambda: float(build_loss().data), p.data, n_coords, rng):
            got = a.reshape(-1)[c]
            denom = max(abs(fd), abs(got), 1e-8)
            assert abs(got - fd) / denom < tol, f"coord {c}: analytic {got} vs fd {fd}"
        p.grad = None


class TestMatmul:
    def test_identity(self):
        rng = Prng(7)
        a = rng.normal(1.0, (3, 3))
        out = matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a.astype(np.float32), rtol=1e-6)

    def test_small_case_against_triple_loop(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0, 6.0], [7.0, 8.0]]
        expect = matmul_oracle(a, b)
        assert expect == [[19.0, 22.0], [43.0, 50.0]]
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, np.array(expect, dtype=np.float32))

    def test_random_against_triple_loop(self):
        rng = Prng(123)
        a = rng.normal(1.0, (4, 6))
        b = rng.normal(1.0, (6, 5))
        with ad.use_dtype(np.float64):
            out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, np.array(matmul_oracle(a.tolist(), b.tolist())), rtol=1e-12)

    def test_zero_matrix(self):
        a = Tensor(np.ones((2, 3)))
        out = matmul(a, Tensor(np.zeros((3, 4))))
        assert not out.data.any()

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_symmetric_pair(self):
        out = softmax(Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_against_high_precision(self):
        with ad.use_dtype(np.float64):
            out = softmax(Tensor([1.0, 2.0, 3.0])).data
        mpmath.mp.dps = 50
        exps = [mpmath.exp(v) for v in (1, 2, 3)]
        z = sum(exps)
        expect = [float(e / z) for e in exps]
        np.testing.assert_allclose(out, expect, atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
    def test_shift_invariance_and_simplex(self, xs, c):
        with ad.use_dtype(np.float64):
            a = softmax(Tensor(xs)).data
            b = softmax(Tensor([x + c for x in xs])).data
        assert abs(a.sum() - 1.0) <= 1e-12
        assert (a >= 0).all()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_input(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((0,))))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((4, 128)))
        loss = cross_entropy(logits, np.array([3, 9, 0, 127]), ignore_id=-1)
        assert abs(loss.item() - math.log(128)) < 1e-5

    def test_saturated_margin(self):
        logits = np.zeros((2, 8))
        logits[0, 5] = 1000.0
        logits[1, 2] = 1000.0
        loss = cross_entropy(Tensor(logits), np.array([5, 2]), ignore_id=-1)
        assert loss.item() < 1e-6

    def test_against_scalar_oracle(self):
        rng = Prng(55)
        logits = rng.normal(2.0, (3, 5))
        targets = [4, 0, 2]
        # Independent per-row evaluation with plain python floats.
        expect = 0.0
        for row, t in zip(logits.tolist(), targets):
            z = sum(math.exp(v - max(row)) for v in row)
            expect += -(row[t] - max(row) - math.log(z))
        expect /= 3
        with ad.use_dtype(np.float64):
            loss = cross_entropy(Tensor(logits), np.array(targets), ignore_id=-1)
        assert abs(loss.item() - expect) < 1e-10

    def test_ignored_positions_are_excluded(self):
        rng = Prng(56)
        logits = rng.normal(1.0, (4, 6))
        with ad.use_dtype(np.float64):
            full = cross_entropy(Tensor(logits[:2]), np.array([1, 3]), ignore_id=9)
            masked = cross_entropy(Tensor(logits), np.array([1, 3, 9, 9]), ignore_id=9)
        assert abs(full.item() - masked.item()) < 1e-12

    def test_all_ignored(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 4))), np.array([7, 7]), ignore_id=7)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]), ignore_id=-1)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        ad.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_elementwise_square(self):
        data = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        x = Tensor(data, requires_grad=True)
        ad.tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-6)

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(x * x)
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor(np.array([1.0, np.nan]))

    def test_inf_op_output_rejected(self):
        x = Tensor(np.array([3.0e38], dtype=np.float32), requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            x * 10.0  # overflows float32


class TestGradientChecks:
    """Central finite differences (h=1e-5, 64-bit) per layer type."""

    def test_matmul(self):
        rng = Prng(1000)
        with ad.use_dtype(np.float64):
            a = Tensor(rng.normal(1.0, (5, 7)), requires_grad=True)
            b = Tensor(rng.normal(1.0, (7, 4)), requires_grad=True)
            check_grad(lambda: ad.tsum(matmul(a, b) * matmul(a, b)), [a, b], rng.child("fd"))

    def test_softmax(self):
        rng = Prng(1001)
        with ad.use_dtype(np.float64):
            x = Tensor(rng.normal(1.0, (6, 9)), requires_grad=True)
            w = rng.normal(1.0, (6, 9))
            check_grad(lambda: ad.tsum(softmax(x) * w), [x], rng.child("fd"))

    def test_rms_norm(self):
        rng = Prng(1002)
        with ad.use_dtype(np.float64):
            x = Tensor(rng.normal(1.0, (4, 8)), requires_grad=True)
            g = Tensor(rng.normal(1.0, (8,)) + 1.0, requires_grad=True)
            w = rng.normal(1.0, (4, 8))
            check_grad(lambda: ad.tsum(ad.rms_norm(x, g) * w), [x, g], rng.child("fd"))

    def test_silu(self):
        rng = Prng(1003)
        with ad.use_dtype(np.float64):
            x = Tensor(rng.normal(2.0, (40,)), requires_grad=True)
            check_grad(lambda: ad.tsum(ad.silu(x) * ad.silu(x)), [x], rng.child("fd"))

    def test_embedding(self):
        rng = Prng(1004)
        ids = np.array([[0, 3, 1], [2, 2, 0]])
        with ad.use_dtype(np.float64):
            table = Tensor(rng.normal(1.0, (4, 6)), requires_grad=True)
            w = rng.normal(1.0, (2, 3, 6))
            check_grad(lambda: ad.tsum(ad.embedding(table, ids) * w), [table], rng.child("fd"))

    def test_cross_entropy(self):
        rng = Prng(1005)
        targets = np.array([2, 0, 5, 1, -1])
        with ad.use_dtype(np.float64):
            logits = Tensor(rng.normal(1.5, (5, 7)), requires_grad=True)
            check_grad(lambda: cross_entropy(logits, targets, ignore_id=-1), [logits], rng.child("fd"))

    def test_attention_block(self):
        rng = Prng(1006)
        T, d, h = 5, 8, 2
        mask = np.triu(np.full((T, T), -1e9), k=1)
        with ad.use_dtype(np.float64):
            x = Tensor(rng.normal(1.0, (T, d)), requires_grad=True)
            wq = Tensor(rng.normal(0.4, (d, d)), requires_grad=True)
            wk = Tensor(rng.normal(0.4, (d, d)), requires_grad=True)
            wv = Tensor(rng.normal(0.4, (d, d)), requires_grad=True)
            wgt = rng.normal(1.0, (T, d))

            def loss():
                q = matmul(x, wq).reshape(T, h, d // h).transpose((1, 0, 2))
                k = matmul(x, wk).reshape(T, h, d // h).transpose((1, 0, 2))
                v = matmul(x, wv).reshape(T, h, d // h).transpose((1, 0, 2))
                scores = ad.add(matmul(q, k.transpose((0, 2, 1))) * (1.0 / math.sqrt(d // h)), mask)
                ctx = matmul(softmax(scores), v).transpose((1, 0, 2)).reshape(T, d)
                return ad.tsum(ctx * wgt)

            check_grad(loss, [x, wq, wk, wv], rng.child("fd"), n_coords=30)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_broadcast_add_gradient(seed):
    rng = Prng(seed)
    with ad.use_dtype(np.float64):
        x = Tensor(rng.normal(1.0, (3, 4)), requires_grad=True)
        b = Tensor(rng.normal(1.0, (4,)), requires_grad=True)
        loss = ad.tsum(ad.add(x, b) * ad.add(x, b))
        loss.backward()
        np.testing.assert_allclose(b.grad, (2 * (x.data + b.data)).sum(axis=0), rtol=1e-10)
