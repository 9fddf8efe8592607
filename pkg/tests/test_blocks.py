import numpy as np
import pytest

from witunet.blocks import (
    LiPeParams,
    MlpParams,
    WTBlockParams,
    channel_projection,
    feed_forward,
    lipe,
    wt_block,
    wt_stack,
)
from witunet.errors import ShapeError
from witunet.nn import gelu
from witunet.tensor import Tensor
from witunet.window import AttentionParams


def rnd(shape, seed=0):
    return np.random.RandomState(seed).randn(*shape).astype(np.float32)


def zeros_lipe(c, e=2):
    return LiPeParams(
        expand_w=Tensor(np.zeros((e * c, c), np.float32), requires_grad=True),
        expand_b=Tensor(np.zeros(e * c, np.float32), requires_grad=True),
        conv_w=Tensor(np.zeros((e * c, e * c, 3, 3), np.float32), requires_grad=True),
        conv_b=Tensor(np.zeros(e * c, np.float32), requires_grad=True),
        restore_w=Tensor(np.zeros((c, e * c), np.float32), requires_grad=True),
        restore_b=Tensor(np.zeros(c, np.float32), requires_grad=True),
    )


def random_lipe(c, e=2, seed=0, scale=0.3):
    rs = np.random.RandomState(seed)
    mk = lambda shape: Tensor((rs.randn(*shape) * scale).astype(np.float32), requires_grad=True)
    return LiPeParams(
        expand_w=mk((e * c, c)), expand_b=mk((e * c,)),
        conv_w=mk((e * c, e * c, 3, 3)), conv_b=mk((e * c,)),
        restore_w=mk((c, e * c)), restore_b=mk((c,)),
    )


def make_attn(c, m, heads=2, seed=0, zero=False):
    rs = np.random.RandomState(seed)
    scale = 0.0 if zero else 0.3
    mk = lambda: Tensor((rs.randn(c, c) * scale).astype(np.float32), requires_grad=True)
    return AttentionParams(
        wq=mk(), wk=mk(), wv=mk(), wo=mk(),
        bias_table=Tensor(np.zeros((heads, (2 * m - 1) ** 2), np.float32), requires_grad=True),
        heads=heads, side=m,
    )


def make_block(c, m, seed=0, zero=False, zero_gamma=False):
    gamma = np.zeros(c, np.float32) if zero_gamma else np.ones(c, np.float32)
    ffn = zeros_lipe(c) if zero else random_lipe(c, seed=seed + 1)
    return WTBlockParams(
        ln1_g=Tensor(gamma.copy(), requires_grad=True),
        ln1_b=Tensor(np.zeros(c, np.float32), requires_grad=True),
        ln2_g=Tensor(gamma.copy(), requires_grad=True),
        ln2_b=Tensor(np.zeros(c, np.float32), requires_grad=True),
        attn=make_attn(c, m, seed=seed, zero=zero),
        ffn=ffn,
    )


class TestLiPe:
    def test_zero_params_zero_output(self):
        x = Tensor(rnd((1, 4, 6, 6), 1))
        out = lipe(x, zeros_lipe(4))
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_identity_config_is_double_gelu(self):
        c = 5
        x = rnd((1, c, 4, 4), 2)
        delta = np.zeros((c, c, 3, 3), np.float32)
        for i in range(c):
            delta[i, i, 1, 1] = 1.0
        params = LiPeParams(
            expand_w=Tensor(np.eye(c, dtype=np.float32)),
            expand_b=Tensor(np.zeros(c, np.float32)),
            conv_w=Tensor(delta),
            conv_b=Tensor(np.zeros(c, np.float32)),
            restore_w=Tensor(np.eye(c, dtype=np.float32)),
            restore_b=Tensor(np.zeros(c, np.float32)),
        )
        out = lipe(Tensor(x), params).data
        want = gelu(gelu(Tensor(x))).data
        np.testing.assert_allclose(out, want, rtol=1e-5, atol=1e-6)

    def test_shape_contract_e2(self):
        out = lipe(Tensor(rnd((2, 8, 16, 16), 3)), random_lipe(8, seed=4))
        assert out.shape == (2, 8, 16, 16)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            lipe(Tensor(rnd((1, 3, 4, 4))), random_lipe(4))

    def test_locality_3x3(self):
        # pre-residual LiPe output may only change within the conv's 3x3 reach
        c = 4
        params = random_lipe(c, seed=5)
        x = rnd((1, c, 9, 9), 6)
        base = lipe(Tensor(x), params).data
        x2 = x.copy()
        x2[0, 1, 4, 4] += 1.0
        bumped = lipe(Tensor(x2), params).data
        changed = np.abs(bumped - base).sum(axis=(0, 1)) > 1e-7
        rr, cc = np.nonzero(changed)
        assert rr.min() >= 3 and rr.max() <= 5
        assert cc.min() >= 3 and cc.max() <= 5

    def test_mlp_ablation_variant(self):
        c = 4
        params = MlpParams(
            expand_w=Tensor(rnd((8, c), 7) * 0.3), expand_b=Tensor(np.zeros(8, np.float32)),
            restore_w=Tensor(rnd((c, 8), 8) * 0.3), restore_b=Tensor(np.zeros(c, np.float32)),
        )
        x = rnd((1, c, 3, 5), 9)
        out = feed_forward(Tensor(x), params).data
        tokens = x.transpose(0, 2, 3, 1)
        want = gelu(Tensor(tokens @ params.expand_w.data.T)).data @ params.restore_w.data.T
        np.testing.assert_allclose(out, want.transpose(0, 3, 1, 2), rtol=1e-5, atol=1e-6)


class TestWTBlock:
    def test_zero_params_identity(self):
        x = rnd((1, 4, 8, 8), 10)
        out = wt_block(Tensor(x), make_block(4, 4, zero=True, zero_gamma=True), 4)
        np.testing.assert_array_equal(out.data, x)

    def test_nonzero_attention_changes_output(self):
        x = rnd((1, 4, 8, 8), 11)
        out = wt_block(Tensor(x), make_block(4, 4, seed=12), 4)
        assert np.abs(out.data - x).max() > 1e-4

    def test_shape_preserved_with_padding(self):
        x = rnd((2, 4, 7, 5), 13)
        out = wt_block(Tensor(x), make_block(4, 4, seed=14), 4)
        assert out.shape == (2, 4, 7, 5)

    def test_padded_equals_divisible_region_independence(self):
        # a map needing padding: attention results for valid tokens must not
        # depend on what the pad would have contained (masked keys)
        x = rnd((1, 4, 6, 6), 15)
        params = make_block(4, 4, seed=16)
        out1 = wt_block(Tensor(x), params, 4).data
        out2 = wt_block(Tensor(x.copy()), params, 4).data
        np.testing.assert_array_equal(out1, out2)

    def test_gradient_wrt_input(self):
        from witunet.gradcheck import run_check, weighted_sum

        params = make_block(4, 2, seed=17)
        arrays = {"x": rnd((1, 4, 4, 4), 18) * 0.5}

        def loss_builder(p):
            dt = p["x"].data.dtype

            def cast(t):
                return Tensor(t.data.astype(dt))

            blk = WTBlockParams(
                ln1_g=cast(params.ln1_g), ln1_b=cast(params.ln1_b),
                ln2_g=cast(params.ln2_g), ln2_b=cast(params.ln2_b),
                attn=AttentionParams(
                    wq=cast(params.attn.wq), wk=cast(params.attn.wk),
                    wv=cast(params.attn.wv), wo=cast(params.attn.wo),
                    bias_table=cast(params.attn.bias_table), heads=2, side=2,
                ),
                ffn=LiPeParams(
                    expand_w=cast(params.ffn.expand_w), expand_b=cast(params.ffn.expand_b),
                    conv_w=cast(params.ffn.conv_w), conv_b=cast(params.ffn.conv_b),
                    restore_w=cast(params.ffn.restore_w), restore_b=cast(params.ffn.restore_b),
                ),
            )
            return weighted_sum(wt_block(p["x"], blk, 2), 19)

        for r in run_check(arrays, loss_builder, dtype=np.float32, n_samples=40, seed=3):
            assert r.passed, f"{r.name}: {r.max_error:.2e}"

    def test_full_block_parameter_gradients(self):
        from witunet.gradcheck import run_check, weighted_sum

        c, m, e = 4, 2, 2
        arrays = {
            "x": rnd((1, c, 4, 4), 20) * 0.5,
            "ln1.g": np.ones(c, np.float32), "ln1.b": np.zeros(c, np.float32),
            "ln2.g": np.ones(c, np.float32), "ln2.b": np.zeros(c, np.float32),
            "wq": rnd((c, c), 21) * 0.3, "wk": rnd((c, c), 22) * 0.3,
            "wv": rnd((c, c), 23) * 0.3, "wo": rnd((c, c), 24) * 0.3,
            "bias": rnd((2, 9), 25) * 0.3,
            "f.ew": rnd((e * c, c), 26) * 0.3, "f.eb": rnd((e * c,), 27) * 0.1,
            "f.cw": rnd((e * c, e * c, 3, 3), 28) * 0.2, "f.cb": rnd((e * c,), 29) * 0.1,
            "f.rw": rnd((c, e * c), 30) * 0.3, "f.rb": rnd((c,), 31) * 0.1,
        }

        def loss_builder(p):
            blk = WTBlockParams(
                ln1_g=p["ln1.g"], ln1_b=p["ln1.b"], ln2_g=p["ln2.g"], ln2_b=p["ln2.b"],
                attn=AttentionParams(wq=p["wq"], wk=p["wk"], wv=p["wv"], wo=p["wo"],
                                     bias_table=p["bias"], heads=2, side=m),
                ffn=LiPeParams(expand_w=p["f.ew"], expand_b=p["f.eb"], conv_w=p["f.cw"],
                               conv_b=p["f.cb"], restore_w=p["f.rw"], restore_b=p["f.rb"]),
            )
            return weighted_sum(wt_block(p["x"], blk, m), 32)

        for r in run_check(arrays, loss_builder, dtype=np.float32, n_samples=12, seed=4):
            assert r.passed, f"{r.name}: {r.max_error:.2e}"


class TestChannelProjection:
    def test_identity(self):
        x = rnd((1, 4, 3, 3), 33)
        out = channel_projection(Tensor(x), Tensor(np.eye(4, dtype=np.float32)),
                                 Tensor(np.zeros(4, np.float32)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_decoder_width_5c_to_c(self):
        c, d, k = 8, 4, 0
        cin = (d - k + 1) * (2**k) * c
        x = rnd((1, cin, 4, 4), 34)
        out = channel_projection(Tensor(x), Tensor(rnd((c, cin), 35)), Tensor(np.zeros(c, np.float32)))
        assert out.shape == (1, c, 4, 4)

    def test_averaging_preserves_constant(self):
        cin, cout = 6, 2
        x = np.full((1, cin, 3, 3), 0.7, np.float32)
        w = np.full((cout, cin), 1.0 / cin, np.float32)
        out = channel_projection(Tensor(x), Tensor(w), Tensor(np.zeros(cout, np.float32)))
        np.testing.assert_allclose(out.data, np.full((1, cout, 3, 3), 0.7), rtol=1e-6)

    def test_widening_rejected(self):
        with pytest.raises(ShapeError):
            channel_projection(Tensor(rnd((1, 2, 3, 3))), Tensor(rnd((4, 2))), Tensor(rnd((4,))))


class TestWTStack:
    def test_stack_of_one_equals_block(self):
        x = rnd((1, 4, 8, 8), 36)
        blk = make_block(4, 4, seed=37)
        np.testing.assert_array_equal(
            wt_stack(Tensor(x), [blk], 4).data, wt_block(Tensor(x), blk, 4).data
        )

    def test_zero_stack_is_identity(self):
        x = rnd((1, 4, 8, 8), 38)
        blocks = [make_block(4, 4, zero=True, zero_gamma=True) for _ in range(3)]
        np.testing.assert_array_equal(wt_stack(Tensor(x), blocks, 4).data, x)

    def test_stack_of_two_is_manual_composition(self):
        x = rnd((1, 4, 8, 8), 39)
        b1, b2 = make_block(4, 4, seed=40), make_block(4, 4, seed=41)
        got = wt_stack(Tensor(x), [b1, b2], 4).data
        want = wt_block(wt_block(Tensor(x), b1, 4), b2, 4).data
        np.testing.assert_array_equal(got, want)

    def test_projection_before_and_after(self):
        x = rnd((1, 8, 4, 4), 42)
        proj = (Tensor(rnd((4, 8), 43) * 0.3), Tensor(np.zeros(4, np.float32)))
        blk4 = make_block(4, 2, seed=44)
        blk8 = make_block(8, 2, seed=45)
        before = wt_stack(Tensor(x), [blk4], 2, projection=proj)
        assert before.shape == (1, 4, 4, 4)
        after = wt_stack(Tensor(x), [blk8], 2, projection=proj, projection_after=True)
        assert after.shape == (1, 4, 4, 4)

    def test_empty_stack_rejected(self):
        with pytest.raises(ShapeError):
            wt_stack(Tensor(rnd((1, 4, 4, 4))), [], 2)
