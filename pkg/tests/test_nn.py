import math

import numpy as np
import pytest
import torch

from sarinterp import nn as snn
from sarinterp.errors import FormatError, InvalidInputError, InvalidMaskError


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=gen(seed), dtype=torch.float64)


def random_mask(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(n, n)) < 0.4
    m[np.arange(n), rng.integers(0, n, size=n)] = True
    return torch.as_tensor(m)


class TestMaskedSoftmax:
    def test_uniform_logits(self):
        mask = torch.tensor([[True, False, True, True]])
        p = snn.masked_softmax(torch.zeros(1, 4, dtype=torch.float64), mask)
        np.testing.assert_allclose(p.numpy(), [[1 / 3, 0, 1 / 3, 1 / 3]], rtol=1e-15)

    def test_single_allowed_entry(self):
        logits = randn(3, 5)
        mask = torch.zeros(3, 5, dtype=torch.bool)
        mask[:, 2] = True
        p = snn.masked_softmax(logits, mask)
        assert torch.equal(p[:, 2], torch.ones(3, dtype=torch.float64))

    def test_hand_value(self):
        p = snn.masked_softmax(torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64),
                               torch.ones(1, 2, dtype=torch.bool))
        np.testing.assert_allclose(p.numpy(), [[0.25, 0.75]], rtol=1e-14)

    def test_rows_sum_to_one_and_masked_exactly_zero(self):
        for seed in range(20):
            logits = randn(7, 7, seed=seed) * 30
            mask = random_mask(7, seed)
            p = snn.masked_softmax(logits, mask)
            assert torch.all(p[~mask] == 0)
            assert torch.max(torch.abs(p.sum(-1) - 1)) < 1e-12

    def test_all_masked_row_rejected(self):
        mask = torch.ones(2, 3, dtype=torch.bool)
        mask[1] = False
        with pytest.raises(InvalidMaskError):
            snn.masked_softmax(torch.zeros(2, 3, dtype=torch.float64), mask)


class TestAttention:
    def test_self_only_mask_isolates_rows(self):
        att = snn.MultiHeadAttention(8, 2, gen(1))
        x = randn(6, 8, seed=2)
        eye = torch.eye(6, dtype=torch.bool)
        y = att(x, eye)
        x2 = x.clone()
        x2[3] += randn(8, seed=3)
        y2 = att(x2, eye)
        rows = [r for r in range(6) if r != 3]
        assert torch.equal(y[rows], y2[rows])

    def test_full_mask_convex_combination(self):
        att = snn.MultiHeadAttention(4, 1, gen(4))
        with torch.no_grad():
            for lin in (att.q, att.k, att.v, att.out):
                lin.weight.copy_(torch.eye(4, dtype=torch.float64) if lin is not att.q else lin.weight)
            att.v.bias.zero_()
            att.out.bias.zero_()
        x = randn(5, 4, seed=5)
        y = att(x, torch.ones(5, 5, dtype=torch.bool))
        lo, hi = x.min(0).values, x.max(0).values
        assert torch.all(y >= lo - 1e-12) and torch.all(y <= hi + 1e-12)

    def test_masked_column_perturbation_is_bit_identical(self):
        att = snn.MultiHeadAttention(8, 4, gen(6))
        for seed in range(30):
            mask = random_mask(9, seed)
            x = randn(9, 8, seed=seed)
            y = att(x, mask)
            r = seed % 9
            x2 = x.clone()
            cols = [c for c in range(9) if not mask[r, c] and c != r]
            if not cols:
                continue
            x2[cols] = randn(len(cols), 8, seed=seed + 100) * 10
            assert torch.equal(att(x2, mask)[r], y[r])

    def test_dimension_errors(self):
        with pytest.raises(InvalidInputError):
            snn.MultiHeadAttention(6, 4, gen())
        att = snn.MultiHeadAttention(8, 2, gen())
        with pytest.raises(InvalidInputError):
            att(randn(3, 6))
        with pytest.raises(InvalidInputError):
            att(randn(3, 8), torch.ones(4, 4, dtype=torch.bool))


class TestPositionEncoding:
    def test_values(self):
        pe = snn.sinusoidal_position_encoding(50, 16)
        assert torch.all(pe[0, 0::2] == 0) and torch.all(pe[0, 1::2] == 1)
        assert pe[1, 0].item() == pytest.approx(math.sin(1.0), abs=1e-15)
        k = 3
        assert pe[7, 2 * k + 1].item() == pytest.approx(math.cos(7 / 10000 ** (2 * k / 16)), abs=1e-14)

    def test_rows_distinct(self):
        pe = snn.sinusoidal_position_encoding(10000, 8).numpy()
        assert len(np.unique(pe.round(12), axis=0)) == 10000

    def test_odd_width(self):
        with pytest.raises(InvalidInputError):
            snn.sinusoidal_position_encoding(4, 5)


class TestLayerNorm:
    def test_constant_input(self):
        y = snn.layer_norm(torch.full((5,), 3.0, dtype=torch.float64),
                           torch.ones(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64))
        assert torch.all(y == 0)

    def test_hand_value(self):
        y = snn.layer_norm(torch.tensor([1.0, -1.0], dtype=torch.float64),
                           torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
        np.testing.assert_allclose(y.numpy(), np.array([1, -1]) / math.sqrt(1 + 1e-5), rtol=1e-15)

    def test_mean_equals_bias_mean(self):
        bias = randn(6, seed=1)
        y = snn.layer_norm(randn(4, 6, seed=2), torch.ones(6, dtype=torch.float64), bias)
        np.testing.assert_allclose(y.mean(-1).numpy(), bias.mean().item(), atol=1e-12)


class TestAdam:
    def _store(self, value):
        m = torch.nn.Module()
        m.w = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))
        return snn.ParamStore(m)

    def test_zero_gradient_leaves_params(self):
        store = self._store(2.0)
        store.params["w"].grad = torch.zeros(1, dtype=torch.float64)
        snn.adam_step(store, lr=0.1)
        assert store.params["w"].item() == 2.0

    def test_first_step(self):
        store = self._store(0.0)
        store.params["w"].grad = torch.ones(1, dtype=torch.float64)
        snn.adam_step(store, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        # m_hat = 1, v_hat = 1 after bias correction
        assert store.params["w"].item() == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
        assert store.params["w"].grad is None and store.step == 1

    def test_oscillating_gradients_damped(self):
        store = self._store(0.0)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        store.params["w"].grad = torch.ones(1, dtype=torch.float64)
        snn.adam_step(store, lr, b1, b2, eps)
        before = store.params["w"].item()
        store.params["w"].grad = -torch.ones(1, dtype=torch.float64)
        snn.adam_step(store, lr, b1, b2, eps)
        delta = store.params["w"].item() - before
        m = b1 * (1 - b1) * 1 + (1 - b1) * -1
        v = b2 * (1 - b2) + (1 - b2)
        expected = -lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
        assert delta == pytest.approx(expected, rel=1e-12)
        assert abs(delta) < lr * 1.0  # plain SGD would move by lr * |g|


class TestGradientCheck:
    def test_quadratic(self):
        A = randn(5, 5, seed=1)
        A = A @ A.T
        err = snn.gradient_check(lambda t: t @ A @ t + t.sum(), randn(5, seed=2), h=1e-5)
        assert err < 1e-9

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x**2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3, dtype=torch.float64)

        assert snn.gradient_check(Bad.apply, randn(3, seed=3) + 2) > 0.1

    @pytest.mark.parametrize("op", ["softmax", "layer_norm", "linear", "feedforward", "position"])
    def test_elementary_ops(self, op):
        w = randn(4, 6, seed=9)
        mask = random_mask(6, 1)[:4]
        if op == "softmax":
            f, theta = (lambda t: (snn.masked_softmax(t.reshape(4, 6), mask) * w).sum()), randn(24)
        elif op == "layer_norm":
            def f(t):
                x, g, b = t[:24].reshape(4, 6), t[24:30], t[30:]
                return (snn.layer_norm(x, g, b) * w).sum()
            theta = randn(36, seed=2)
        elif op == "linear":
            lin = snn.Linear(5, 6, gen(3))
            x = randn(4, 5, seed=4)
            err = snn.module_gradient_check(lin, lambda fm: (fm(x) * w).sum())
            assert err < 1e-4
            return
        elif op == "feedforward":
            ff = snn.FeedForward(6, 12, gen(3))
            x = randn(4, 6, seed=4)
            err = snn.module_gradient_check(ff, lambda fm: (fm(x) * w).sum())
            assert err < 1e-4
            return
        else:
            pe = snn.sinusoidal_position_encoding(4, 6)
            f, theta = (lambda t: ((t.reshape(4, 6) + pe) ** 2 * w).sum()), randn(24)
        assert snn.gradient_check(f, theta) < 1e-4

    def test_attention_block_full_mask(self):
        att = snn.MultiHeadAttention(16, 4, gen(11))
        x = randn(7, 16, seed=12)
        w = randn(7, 16, seed=13)
        assert snn.module_gradient_check(att, lambda fm: (fm(x) * w).sum()) < 1e-4

    def test_attention_block_random_fdam(self):
        blk = snn.Block(16, 4, 4, gen(14))
        x = randn(7, 16, seed=15)
        w = randn(7, 16, seed=16)
        mask = random_mask(7, 17)
        assert snn.module_gradient_check(blk, lambda fm: (fm(x, mask) * w).sum()) < 1e-4

    def test_attention_input_gradient(self):
        att = snn.MultiHeadAttention(8, 2, gen(18))
        mask = random_mask(5, 19)
        w = randn(5, 8, seed=20)
        err = snn.gradient_check(lambda t: (att(t.reshape(5, 8), mask) * w).sum(), randn(40, seed=21))
        assert err < 1e-4

    def test_vectorized_matches_loop(self):
        blk = snn.Block(8, 2, 2, gen(22))
        x = randn(4, 8, seed=23)
        loss = lambda fm: (fm(x) ** 2).sum()  # noqa: E731
        a = snn.module_gradient_check(blk, loss)
        b = snn.module_gradient_check(blk, loss, chunk=64)
        assert a < 1e-4 and b < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        blk = snn.Block(8, 2, 2, gen(1))
        store = snn.ParamStore(blk)
        for p in store.params.values():
            p.grad = torch.ones_like(p)
        snn.adam_step(store, lr=0.01)
        snn.save_store(store, tmp_path / "b.sarm")
        other = snn.ParamStore(snn.Block(8, 2, 2, gen(2)))
        snn.load_store(other, tmp_path / "b.sarm")
        for k in store.params:
            assert torch.equal(store.params[k], other.params[k])
            assert torch.equal(store.m[k], other.m[k]) and torch.equal(store.v[k], other.v[k])
        assert other.step == 1

    def test_layout(self, tmp_path):
        snn.write_checkpoint(tmp_path / "x.sarm", {"ab": np.arange(6.0).reshape(2, 3)})
        raw = (tmp_path / "x.sarm").read_bytes()
        assert raw[:4] == b"SARM"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2 and raw[12:14] == b"ab"
        assert int.from_bytes(raw[14:18], "little") == 2
        assert np.frombuffer(raw[34:], "<f8").tolist() == list(range(6))
        np.testing.assert_array_equal(snn.read_checkpoint(tmp_path / "x.sarm")["ab"],
                                      np.arange(6.0).reshape(2, 3))

    def test_bad_files(self, tmp_path):
        (tmp_path / "bad.sarm").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(FormatError):
            snn.read_checkpoint(tmp_path / "bad.sarm")
        snn.write_checkpoint(tmp_path / "t.sarm", {"w": np.ones(10)})
        (tmp_path / "t.sarm").write_bytes((tmp_path / "t.sarm").read_bytes()[:-8])
        with pytest.raises(FormatError):
            snn.read_checkpoint(tmp_path / "t.sarm")
        snn.write_checkpoint(tmp_path / "s.sarm", {"w": np.ones(3)})
        m = torch.nn.Module()
        m.w = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
        with pytest.raises(FormatError, match="shape"):
            snn.load_store(snn.ParamStore(m), tmp_path / "s.sarm")
