import numpy as np
import pytest

import witunet.tensor as T
from witunet.errors import ShapeError
from witunet.nn import ConvSpec, conv2d, conv_transpose2d, depthwise_conv2d, gelu, layer_norm, linear, softmax
from witunet.tensor import Tensor


def rnd(shape, seed=0):
    return np.random.RandomState(seed).randn(*shape).astype(np.float32)


# independent oracle: direct 6-nested-loop cross-correlation
def conv2d_loops(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(cout):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0
                    for i in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[ni, i, stride * r + p, stride * c + q] * w[o, i, p, q]
                    out[ni, o, r, c] = acc + b[o]
    return out


class TestConv2d:
    def test_all_ones_center_is_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        out = conv2d(x, w, b, stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_delta_kernel_is_identity(self):
        x = Tensor(rnd((1, 1, 6, 5), 1))
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(1, np.float32)), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self):
        x = rnd((1, 2, 5, 5), 2)
        w = rnd((3, 2, 3, 3), 3)
        b = rnd((3,), 4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        want = conv2d_loops(x, w, b, 2, 1)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(Tensor(rnd((1, 3, 4, 4))), Tensor(rnd((2, 2, 3, 3))), None)

    def test_bias_shape_checked(self):
        with pytest.raises(ShapeError, match="bias"):
            conv2d(Tensor(rnd((1, 2, 4, 4))), Tensor(rnd((2, 2, 3, 3))), Tensor(rnd((3,))))

    def test_convspec_output_extent(self):
        spec = ConvSpec(2, 3, 3, 3, stride=2, padding=1)
        assert spec.out_size(5, 5) == (3, 3)
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, 7, 7).out_size(4, 4)


class TestConvTranspose2d:
    def test_single_element_broadcast(self):
        x = Tensor(np.array([[[[2.0]]]], np.float32))
        w = Tensor(np.ones((1, 1, 2, 2), np.float32))
        out = conv_transpose2d(x, w, stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0, np.float32))

    def test_adjoint_of_conv2d(self):
        # <conv(a, w), b> == <a, convT(b, w)> with the same weight array
        w = rnd((2, 3, 2, 2), 5)
        a = rnd((1, 3, 8, 8), 6)
        b = rnd((1, 2, 4, 4), 7)
        lhs = float(np.sum(conv2d(Tensor(a), Tensor(w), None, stride=2, padding=0).data * b))
        rhs = float(np.sum(a * conv_transpose2d(Tensor(b), Tensor(w), None, stride=2).data))
        assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs))

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((1, 2, 3, 3), np.float32))
        w = Tensor(rnd((2, 4, 2, 2), 8))
        b = Tensor(rnd((4,), 9))
        out = conv_transpose2d(x, w, b, stride=2)
        assert out.shape == (1, 4, 6, 6)
        np.testing.assert_allclose(out.data, np.broadcast_to(b.data[None, :, None, None], out.shape), rtol=1e-6)

    def test_output_extent(self):
        out = conv_transpose2d(Tensor(rnd((1, 1, 3, 5))), Tensor(rnd((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 6, 10)


class TestLinear:
    def test_identity(self):
        x = rnd((3, 4), 10)
        out = linear(Tensor(x), Tensor(np.eye(4, dtype=np.float32)), Tensor(np.zeros(4, np.float32)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_hand_matrix(self):
        out = linear(Tensor(np.array([1.0, 2.0], np.float32)),
                     Tensor(np.array([[1.0, 1.0], [1.0, -1.0]], np.float32)),
                     Tensor(np.zeros(2, np.float32)))
        np.testing.assert_allclose(out.data, [3.0, -1.0])

    def test_batch_shape_preserved(self):
        out = linear(Tensor(rnd((4, 7, 5), 11)), Tensor(rnd((9, 5), 12)), Tensor(rnd((9,), 13)))
        assert out.shape == (4, 7, 9)

    def test_trailing_mismatch(self):
        with pytest.raises(ShapeError, match="trailing"):
            linear(Tensor(rnd((2, 3))), Tensor(rnd((4, 5))), None)


class TestLayerNorm:
    def test_hand_example(self):
        out = layer_norm(Tensor(np.array([1.0, 2.0, 3.0], np.float32)),
                         Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)

    def test_constant_vector_gives_beta(self):
        beta = rnd((5,), 14)
        for const in (0.0, 3.5, -2.0):
            out = layer_norm(Tensor(np.full((2, 5), const, np.float32)),
                             Tensor(np.ones(5, np.float32)), Tensor(beta))
            np.testing.assert_allclose(out.data, np.broadcast_to(beta, (2, 5)), atol=1e-6)

    def test_statistical_moments(self):
        x = rnd((50, 64), 15) * 3 + 1
        out = layer_norm(Tensor(x), Tensor(np.ones(64, np.float32)), Tensor(np.zeros(64, np.float32))).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-5
        assert np.abs(out.var(axis=-1) - 1).max() <= 1e-3

    def test_shift_and_scale_invariance(self):
        x = rnd((8, 16), 16)
        g = Tensor(np.ones(16, np.float32))
        b = Tensor(np.zeros(16, np.float32))
        base = layer_norm(Tensor(x), g, b).data
        shifted = layer_norm(Tensor(x + 0.7), g, b).data
        np.testing.assert_allclose(shifted, base, atol=1e-5)
        scaled = layer_norm(Tensor(2.5 * x + 0.3), g, b).data
        np.testing.assert_allclose(scaled, base, atol=1e-4)


class TestSoftmax:
    def test_symmetric_pair(self):
        out = softmax(Tensor(np.zeros(2, np.float32)))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_direct_evaluation(self):
        out = softmax(Tensor(np.array([1.0, 2.0, 3.0], np.float32)))
        np.testing.assert_allclose(out.data, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_shift_invariance(self):
        x = rnd((4, 9), 17)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 11.25)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_rows_sum_to_one_in_unit_interval(self):
        for seed in range(5):
            x = rnd((3, 4, 8), seed) * 10
            out = softmax(Tensor(x)).data
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_large_logits_stable(self):
        out = softmax(Tensor(np.array([1000.0, 1001.0], np.float32))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-6)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(np.zeros(1, np.float32))).data[0] == 0.0

    def test_three(self):
        assert abs(gelu(Tensor(np.array([3.0], np.float32))).data[0] - 2.9964) <= 1e-3

    def test_saturation(self):
        assert abs(gelu(Tensor(np.array([-10.0], np.float32))).data[0]) <= 1e-4


class TestBackwardExamples:
    def test_conv_bias_grad_counts_outputs(self):
        x = Tensor(rnd((2, 2, 5, 5), 18), requires_grad=True)
        w = Tensor(rnd((3, 2, 3, 3), 19), requires_grad=True)
        b = Tensor(np.zeros(3, np.float32), requires_grad=True)
        T.sum_all(conv2d(x, w, b, stride=1, padding=1)).backward()
        np.testing.assert_allclose(b.grad, np.full(3, 2 * 5 * 5), rtol=1e-6)

    def test_softmax_sum_has_zero_grad(self):
        x = Tensor(rnd((4, 6), 20), requires_grad=True)
        T.sum_all(softmax(x)).backward()
        assert np.abs(x.grad).max() <= 1e-6

    def test_composite_chain_matches_finite_differences(self):
        from witunet.gradcheck import run_check, weighted_sum

        arrays = {
            "x": rnd((1, 2, 6, 6), 21) * 0.5,
            "cw": rnd((4, 2, 3, 3), 22) * 0.5,
            "cb": rnd((4,), 23) * 0.1,
            "lw": rnd((3, 4), 24) * 0.5,
            "lb": rnd((3,), 25) * 0.1,
        }

        def loss_builder(p):
            h = gelu(conv2d(p["x"], p["cw"], p["cb"], stride=1, padding=1))
            h = T.transpose(h, (0, 2, 3, 1))
            return weighted_sum(linear(h, p["lw"], p["lb"]), 97)

        results = run_check(arrays, loss_builder, dtype=np.float32, n_samples=30, seed=1)
        for r in results:
            assert r.passed, f"{r.name}: {r.max_error}"


def test_dtype_preserved_in_float64():
    x = Tensor(rnd((2, 3, 4, 4)).astype(np.float64))
    w = Tensor(rnd((2, 3, 3, 3)).astype(np.float64))
    assert conv2d(x, w, None, padding=1).dtype == np.float64
    assert gelu(x).dtype == np.float64
    assert softmax(x).dtype == np.float64


def test_depthwise_matches_full_conv_with_diagonal_kernel():
    x = rnd((1, 3, 6, 6), 26)
    wd = rnd((3, 1, 3, 3), 27)
    full = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        full[c, c] = wd[c, 0]
    got = depthwise_conv2d(Tensor(x), Tensor(wd), None, padding=1).data
    want = conv2d(Tensor(x), Tensor(full), None, padding=1).data
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
