"""Core numerics: forward semantics, hand-written backwards, grad checks."""

import numpy as np
import pytest

from avmae.blocks import (Attention, ConvBNPReLU, FeedForward, GradientStateError,
                          LayerNorm, Linear, softmax)
from avmae.gradcheck import grad_check
from avmae.verify import run_grad_check

from oracles import oracle_attention


class TestAttentionForward:
    def test_zero_input_gives_uniform_rows(self):
        """Constant logits: every attention row is the uniform distribution."""
        rng = np.random.default_rng(0)
        att = Attention(8, 2, rng)
        att.forward(np.zeros((4, 8), dtype=np.float32))
        probs = att.last_probs()
        assert np.allclose(probs, 0.25, atol=1e-7)
        att.clear_caches()

    def test_single_token_softmax_is_identity(self):
        """T=1: softmax over one element is 1, so out = x Wv Wo + biases."""
        rng = np.random.default_rng(1)
        att = Attention(8, 2, rng, dtype=np.float64)
        x = rng.normal(size=(1, 8))
        out = att.forward(x)
        v = x @ att.w_v.data + att.b_v.data
        expected = v @ att.w_o.data + att.b_o.data
        assert np.allclose(out, expected, atol=1e-12)
        att.clear_caches()

    def test_row_sums_various_shapes(self):
        rng = np.random.default_rng(2)
        for t, c, h in ((1, 8, 1), (3, 8, 2), (7, 16, 4), (2, 12, 3)):
            att = Attention(c, h, rng, dtype=np.float64)
            att.forward(rng.normal(size=(t, c)) * 5)
            assert np.allclose(att.last_probs().sum(axis=-1), 1.0, atol=1e-6)
            att.clear_caches()

    def test_mhsa_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        att = Attention(8, 2, rng, dtype=np.float64)
        x = rng.normal(size=(3, 8))
        out = att.forward(x)
        att.clear_caches()
        assert np.max(np.abs(out - oracle_attention(x, x, att))) < 1e-6

    def test_mhca_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        att = Attention(8, 2, rng, dtype=np.float64)
        q = rng.normal(size=(2, 8))
        kv = rng.normal(size=(5, 8))
        out = att.forward(q, kv)
        att.clear_caches()
        assert np.max(np.abs(out - oracle_attention(q, kv, att))) < 1e-6

    def test_cross_equals_self_bitwise(self):
        rng = np.random.default_rng(4)
        att = Attention(8, 4, rng)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        self_out = att.forward(x)
        cross_out = att.forward(x, x.copy())
        att.clear_caches()
        assert np.array_equal(self_out, cross_out)

    def test_single_key_attends_fully(self):
        """Tk=1: every query sees the single key with weight one."""
        rng = np.random.default_rng(5)
        att = Attention(8, 2, rng, dtype=np.float64)
        att.forward(rng.normal(size=(4, 8)), rng.normal(size=(1, 8)))
        assert np.allclose(att.last_probs(), 1.0)
        att.clear_caches()

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(6)
        att = Attention(8, 2, rng, dtype=np.float64)
        x = rng.normal(size=(3, 4, 8))
        batched = att.forward(x)
        att.clear_caches()
        singles = []
        for b in range(3):
            singles.append(att.forward(x[b]))
            att.clear_caches()
        assert np.allclose(batched, np.stack(singles), atol=1e-12)

    def test_dim_mismatch_raises(self):
        att = Attention(8, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            att.forward(np.zeros((3, 6), dtype=np.float32))

    def test_bad_head_count_raises(self):
        with pytest.raises(ValueError):
            Attention(8, 3, np.random.default_rng(0))


class TestBackwardProtocol:
    def test_linear_closed_form(self):
        """y = xW + b with upstream of ones: dW = x^T 1, db = column sums."""
        rng = np.random.default_rng(0)
        lin = Linear(4, 3, rng, dtype=np.float64)
        x = rng.normal(size=(5, 4))
        lin.forward(x)
        ones = np.ones((5, 3))
        lin.backward(ones)
        assert np.allclose(lin.weight.grad, x.T @ ones)
        assert np.allclose(lin.bias.grad, ones.sum(axis=0))

    def test_layernorm_constant_row_nullspace(self):
        """Per-row-constant input: gradient orthogonal to the ones direction."""
        ln = LayerNorm(8, dtype=np.float64)
        x = np.tile(np.random.default_rng(1).normal(size=(4, 1)), (1, 8))
        ln.forward(x)
        d_x = ln.backward(np.random.default_rng(2).normal(size=(4, 8)))
        assert np.all(np.abs(d_x.sum(axis=-1)) < 1e-6)

    def test_backward_before_forward_raises(self):
        lin = Linear(3, 3, np.random.default_rng(0))
        with pytest.raises(GradientStateError):
            lin.backward(np.ones((2, 3), dtype=np.float32))

    def test_cache_stack_handles_repeated_application(self):
        """Two forwards, then backwards in reverse order, accumulate both."""
        rng = np.random.default_rng(3)
        lin = Linear(3, 3, rng, dtype=np.float64)
        x1 = rng.normal(size=(2, 3))
        x2 = rng.normal(size=(4, 3))
        lin.forward(x1)
        lin.forward(x2)
        g2 = np.ones((4, 3))
        g1 = np.ones((2, 3))
        lin.backward(g2)
        lin.backward(g1)
        assert np.allclose(lin.weight.grad, x1.T @ g1 + x2.T @ g2)

    def test_deterministic_given_inputs(self):
        rng = np.random.default_rng(4)
        att = Attention(8, 2, rng, dtype=np.float64)
        x = rng.normal(size=(3, 8))
        g = rng.normal(size=(3, 8))
        outs = []
        for _ in range(2):
            att.zero_grad()
            att.forward(x)
            outs.append(att.backward(g.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])


class TestGradChecks:
    """Central-difference verification at 64-bit for every block."""

    @pytest.mark.parametrize("name,tol", [
        ("linear", 1e-6),
        ("layernorm", 1e-6),
        ("mhsa", 1e-6),
        ("mhca", 1e-6),
        ("ffn", 1e-6),
        ("conv_bn_prelu", 1e-6),
    ])
    def test_primitive_blocks(self, name, tol):
        report = run_grad_check(name, tolerance=tol)
        assert report.passed, "\n".join(report.lines())

    def test_corrupted_backward_fails(self):
        """Negative control: a sign-flipped weight gradient must be caught."""
        rng = np.random.default_rng(0)
        lin = Linear(4, 3, rng, dtype=np.float64)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(5, 3))

        def fwd(x):
            out = lin.forward(x)

            def back():
                d_x = lin.backward(w.copy())
                lin.weight.grad *= -1.0  # deliberate corruption
                return {"x": d_x}
            return float(np.sum(out * w)), back

        report = grad_check(lin, fwd, {"x": x}, tolerance=1e-6)
        assert not report.passed
        assert report.max_errors["weight"] > 1e-2


class TestConvBNPReLU:
    def test_identity_configuration_returns_normalized(self):
        """Identity conv, unit scale/shift-zero, slope 1: output is the
        per-channel standardisation of the input."""
        rng = np.random.default_rng(0)
        block = ConvBNPReLU(6, rng, dtype=np.float64)
        block.conv.weight.data[...] = np.eye(6)
        block.conv.bias.data[...] = 0.0
        block.prelu_slope.data[...] = 1.0
        x = rng.normal(size=(8, 6))
        out = block.forward(x, training=True)
        block.clear_caches()
        expected = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + 1e-5)
        assert np.allclose(out, expected, atol=1e-12)

    def test_identical_tokens_normalize_to_zero(self):
        rng = np.random.default_rng(1)
        block = ConvBNPReLU(6, rng, dtype=np.float64)
        block.bn_shift.data[...] = 0.0
        x = np.tile(rng.normal(size=(1, 6)), (5, 1))
        out = block.forward(x, training=True)
        block.clear_caches()
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_eval_reproduces_first_batch_statistics(self):
        rng = np.random.default_rng(2)
        block = ConvBNPReLU(6, rng, dtype=np.float64)
        x = rng.normal(size=(16, 6))
        train_out = block.forward(x, training=True)
        block.clear_caches()
        eval_out = block.forward(x, training=False)
        block.clear_caches()
        assert np.max(np.abs(train_out - eval_out)) < 1e-5
        # statistics recomputed by hand
        y = x @ block.conv.weight.data + block.conv.bias.data
        assert np.allclose(block.running_mean, y.mean(axis=0))
        assert np.allclose(block.running_var, y.var(axis=0))

    def test_eval_before_any_batch_raises(self):
        block = ConvBNPReLU(6, np.random.default_rng(0))
        with pytest.raises(RuntimeError):
            block.forward(np.zeros((3, 6), dtype=np.float32), training=False)


class TestPurity:
    def test_forward_is_pure(self):
        """Same inputs and parameters give identical outputs across calls."""
        rng = np.random.default_rng(5)
        ffn = FeedForward(8, rng, dtype=np.float64)
        x = rng.normal(size=(4, 8))
        a = ffn.forward(x.copy())
        b = ffn.forward(x.copy())
        ffn.clear_caches()
        assert np.array_equal(a, b)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        for shape in ((3, 5), (2, 4, 6), (1, 1)):
            s = softmax(rng.normal(size=shape) * 10)
            assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
