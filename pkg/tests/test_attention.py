import numpy as np
import pytest

from istanet.attention import (TSABlockConfig, TSABlockParams,
                               attention_scores, positional_encoding,
                               qkv_project, temporal_aggregate,
                               tsa_block_forward)
from istanet.engine import ConfigurationError, Tensor

from helpers import fd_grad, rel_err


def make_block(c_in=4, c_out=4, heads=2, c_qkv=2, u=4, seed=0, dtype=np.float64,
               k_u=3, k_t=3):
    cfg = TSABlockConfig(c_in=c_in, c_out=c_out, heads=heads, c_qkv=c_qkv,
                         k_u=k_u, k_t=k_t, gamma=0.1)
    params = TSABlockParams(cfg, u, rng=np.random.default_rng(seed), dtype=dtype)
    return cfg, params


class TestPositionalEncoding:
    def test_origin_values(self):
        pe = positional_encoding(4, 2, 3, 5)
        assert pe[0, 0, 0, 0] == 0.0  # sin(0)
        assert pe[1, 0, 0, 0] == 1.0  # cos(0)

    def test_constant_over_within_token_axes(self):
        pe = positional_encoding(4, 3, 5, 7)
        assert (pe == pe[:, :1, :1, :]).all()

    def test_range_and_injectivity(self):
        pe = positional_encoding(8, 1, 1, 512)
        assert (np.abs(pe) <= 1.0).all()
        cols = pe[:, 0, 0, :].T
        assert len({tuple(c) for c in cols}) == 512


class TestQKVProject:
    def test_zero_input_isolates_positional_encoding(self):
        cfg, params = make_block()
        x = Tensor(np.zeros((4, 2, 2, 4)))
        q, _, _ = qkv_project(x, params, h=0)
        pe = positional_encoding(4, 2, 2, 4)
        expect = np.einsum("oi,itsu->otsu", params.q_weights[0].data, pe)
        np.testing.assert_allclose(q.data, expect, rtol=1e-12)

    def test_values_are_unprojected_input_slice(self):
        cfg, params = make_block()
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 2, 2, 4)))
        for h in range(cfg.heads):
            _, _, v = qkv_project(x, params, h)
            np.testing.assert_array_equal(v.data, x.data[2 * h:2 * (h + 1)])

    def test_projection_gradients(self):
        cfg, params = make_block()
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 2, 2, 4))
        w0 = params.q_weights[0].data.copy()

        def loss_np(w):
            params.q_weights[0].data = w
            q, _, _ = qkv_project(Tensor(x), params, 0)
            return float((q.data ** 2).sum())

        params.q_weights[0].data = w0
        q, _, _ = qkv_project(Tensor(x), params, 0)
        (q * q).sum().backward()
        fd = fd_grad(loss_np, [w0], wrt=0)
        assert rel_err(fd, params.q_weights[0].grad) <= 1e-4
        params.q_weights[0].data = w0


class TestAttentionScores:
    def test_alpha_zero_returns_m(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.normal(size=(2, 2, 2, 3)))
        k = Tensor(rng.normal(size=(2, 2, 2, 3)))
        m = Tensor(rng.normal(size=(3, 3)))
        out = attention_scores(q, k, Tensor(np.zeros(())), m, c_beta=8)
        np.testing.assert_array_equal(out.data, m.data)

    def test_scores_within_alpha_of_m(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            q = Tensor(rng.normal(size=(2, 2, 2, 3)) * 10)
            k = Tensor(rng.normal(size=(2, 2, 2, 3)) * 10)
            m = Tensor(rng.normal(size=(3, 3)))
            alpha = Tensor(rng.normal(size=()))
            out = attention_scores(q, k, alpha, m, c_beta=8)
            assert (np.abs(out.data - m.data) <= np.abs(alpha.data)).all()

    def test_dominant_token_diagonal(self):
        # two tokens, all feature mass on token 0
        q = np.zeros((1, 1, 4, 2))
        q[0, 0, :, 0] = 2.0  # squared norm 16
        c_beta = 4.0
        out = attention_scores(Tensor(q), Tensor(q), Tensor(np.ones(())),
                               Tensor(np.zeros((2, 2))), c_beta=c_beta)
        np.testing.assert_allclose(out.data[0, 0], np.tanh(16 / np.sqrt(c_beta)))
        np.testing.assert_allclose(out.data[1, 1], 0.0)


class TestTemporalAggregate:
    def test_identity_kernel_doubles_input(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        w = Tensor(np.eye(3)[:, :, None])
        out = temporal_aggregate(x, w, Tensor(np.zeros(3)), k_t=1)
        np.testing.assert_allclose(out.data, 2 * x.data)

    def test_zero_weights_pass_residual(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        out = temporal_aggregate(x, Tensor(np.zeros((3, 3, 3))),
                                 Tensor(np.zeros(3)), k_t=3)
        np.testing.assert_array_equal(out.data, x.data)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 2, 2))
        w = rng.normal(size=(2, 2, 3))
        b = rng.normal(size=2)
        xt, wt, bt = (Tensor(a, requires_grad=True) for a in (x, w, b))
        out = temporal_aggregate(xt, wt, bt, k_t=3)
        (out * out).sum().backward()
        for i, t in enumerate((xt, wt, bt)):
            fd = fd_grad(lambda a, bb, c: float(
                (temporal_aggregate(Tensor(a), Tensor(bb), Tensor(c), k_t=3).data ** 2).sum()),
                [x, w, b], wrt=i)
            assert rel_err(fd, t.grad) <= 1e-4


class TestBlockForward:
    def test_single_token_degenerate(self):
        cfg, params = make_block(u=1)
        x = Tensor(np.random.default_rng(8).normal(size=(4, 2, 2, 1)))
        out = tsa_block_forward(x, params, cfg, mode="infer")
        assert out.shape == (4, 2, 2, 1)
        assert np.isfinite(out.data).all()

    @pytest.mark.parametrize("c_out", [4, 8])
    def test_output_shape(self, c_out):
        cfg, params = make_block(c_out=c_out)
        x = Tensor(np.random.default_rng(9).normal(size=(4, 2, 2, 4)))
        out = tsa_block_forward(x, params, cfg, mode="infer")
        assert out.shape == (c_out, 2, 2, 4)

    def test_batched_output_shape(self):
        cfg, params = make_block(c_out=8)
        x = Tensor(np.random.default_rng(10).normal(size=(3, 4, 2, 2, 4)))
        out = tsa_block_forward(x, params, cfg, mode="train")
        assert out.shape == (3, 8, 2, 2, 4)

    def test_determinism(self):
        cfg, params = make_block()
        x = Tensor(np.random.default_rng(11).normal(size=(4, 2, 2, 4)))
        a = tsa_block_forward(x, params, cfg, mode="infer").data
        b = tsa_block_forward(x, params, cfg, mode="infer").data
        assert a.tobytes() == b.tobytes()

    def test_residual_dominated_golden_values(self):
        # alpha=0, M=identity, zeroed conv weights: attention passes values
        # through, the token conv contributes only its bias, and the block
        # output is computable in closed form from the residual path.
        cfg, params = make_block()
        for h in range(cfg.heads):
            params.alphas[h].data = np.zeros(())
            params.ms[h].data = np.eye(4)
        params.ffn_conv_weight.data[:] = 0.0
        params.ffn_pw_weight.data[:] = 0.0
        params.ta_weight.data[:] = 0.0
        params.ffn_pw_bias.data = np.array([0.5, -0.5, 0.25, 0.0])
        params.ta_bias.data = np.array([0.1, 0.2, -0.3, 0.4])
        params.ffn_norm.eps = params.ta_norm.eps = 1e-14
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 2, 2, 4))
        out = tsa_block_forward(Tensor(x), params, cfg, mode="infer")
        gamma = cfg.gamma
        act = lambda v: np.where(v >= 0, v, gamma * v)
        # the token-conv branch dies in the zeroed pointwise conv, so the
        # output is act(x + pw_bias + ta_bias) from the residual path alone
        pre_ta = params.ffn_pw_bias.data.reshape(4, 1, 1, 1) + x
        expect = act(pre_ta + params.ta_bias.data.reshape(4, 1, 1, 1))
        np.testing.assert_allclose(out.data, expect, rtol=1e-10)

    def test_every_parameter_receives_gradient(self):
        cfg, params = make_block(c_out=8)  # includes the residual projection
        x = Tensor(np.random.default_rng(13).normal(size=(4, 2, 2, 4)))
        out = tsa_block_forward(x, params, cfg, mode="train")
        (out * out).sum().backward()
        for p in params.parameters():
            assert p.grad is not None, p.name
            assert np.abs(p.grad).max() > 0, f"dead parameter {p.name}"

    def test_full_block_gradient_check(self):
        cfg, params = make_block()
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 2, 2, 4))
        # pad channels to c_in=4 via a fixed lift so the input is (4,2,2,4)
        x4 = np.concatenate([x, 0.5 * x], axis=0)

        def loss_with(p, name, value):
            old = p.data
            p.data = value
            res = tsa_block_forward(Tensor(x4), params, cfg, mode="train")
            out = float((res.data ** 2).sum())
            p.data = old
            return out

        out = tsa_block_forward(Tensor(x4), params, cfg, mode="train")
        (out * out).sum().backward()
        worst = 0.0
        for p in params.parameters():
            base = p.data.copy()
            fd = np.zeros_like(base).reshape(-1)
            flat = base.reshape(-1)
            for i in range(flat.size):
                pert = base.copy().reshape(-1)
                pert[i] = flat[i] + 1e-5
                hi = loss_with(p, p.name, pert.reshape(base.shape))
                pert[i] = flat[i] - 1e-5
                lo = loss_with(p, p.name, pert.reshape(base.shape))
                fd[i] = (hi - lo) / 2e-5
            worst = max(worst, rel_err(fd.reshape(base.shape), p.grad, floor=1e-4))
        assert worst <= 1e-4


class TestBlockConfig:
    def test_invalid_channel_doubling(self):
        with pytest.raises(ConfigurationError):
            TSABlockConfig(c_in=4, c_out=12, heads=2, c_qkv=1)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigurationError):
            TSABlockConfig(c_in=4, c_out=4, heads=3, c_qkv=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            TSABlockConfig(c_in=4, c_out=4, heads=2, c_qkv=1, k_u=2)
