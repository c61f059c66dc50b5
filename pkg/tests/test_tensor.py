"""Tensor core: forward oracles, gradient checks, layout round trips."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from bfseg import tensor as T
from bfseg.tensor import Tensor


def matmul_oracle(a, b):
    """Independent triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def conv2d_oracle(x, w, bias, stride, padding):
    """Naive nested-loop convolution, groups=1."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = bias[o]
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[n, c, y * stride + i, xx * stride + j]
                    out[n, o, y, xx] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        npt.assert_array_equal(T.matmul(eye, b).array, b.array)

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        got = T.matmul(Tensor(a), Tensor(b)).array
        npt.assert_array_equal(got, matmul_oracle(a, b))
        npt.assert_array_equal(got, [[19.0, 22.0], [43.0, 50.0]])

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 3))
        npt.assert_allclose(T.matmul(Tensor(a), Tensor(b)).array, matmul_oracle(a, b), atol=1e-12)

    def test_shape_propagation(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5))))
        assert out.shape == (2, 5)

    def test_batched_and_shared_weight(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 4, 3))
        w = rng.standard_normal((3, 5))
        out = T.matmul(Tensor(a), Tensor(w))
        assert out.shape == (2, 4, 5)
        npt.assert_allclose(out.array[1], a[1] @ w, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batch_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=0)
        npt.assert_array_equal(out.array, x)

    def test_neighborhood_sums_against_nested_loop(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        w = np.ones((1, 1, 3, 3))
        b = np.zeros(1)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).array
        npt.assert_allclose(got, conv2d_oracle(x, w, b, 1, 1), atol=1e-12)

    def test_random_against_nested_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).array
        npt.assert_allclose(got, conv2d_oracle(x, w, b, 2, 1), atol=1e-12)

    def test_depthwise_shape(self):
        x = Tensor(np.zeros((1, 8, 16, 16)))
        w = Tensor(np.zeros((8, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1, groups=8)
        assert out.shape == (1, 8, 16, 16)

    def test_depthwise_matches_per_channel_loop(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=3).array
        for c in range(3):
            ref = conv2d_oracle(x[:, c : c + 1], w[c : c + 1], np.zeros(1), 1, 1)
            npt.assert_allclose(got[:, c : c + 1], ref, atol=1e-12)

    def test_bad_groups(self):
        with pytest.raises(T.ConfigError):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)


class TestLayernorm:
    def test_constant_row_maps_to_beta(self):
        x = Tensor([[5.0, 5.0, 5.0, 5.0]])
        out = T.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        npt.assert_allclose(out.array, np.zeros((1, 4)), atol=1e-12)

    def test_two_point_row(self):
        out = T.layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        npt.assert_allclose(out.array, [[-1.0, 1.0]], atol=1e-5)

    def test_normalizes_random_rows(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 16))
        out = T.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).array
        npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        npt.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_bad_eps(self):
        with pytest.raises(T.ConfigError):
            T.layernorm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class TestSoftmax:
    def test_symmetry(self):
        npt.assert_allclose(T.softmax(Tensor([0.0, 0.0])).array, [0.5, 0.5], atol=1e-12)

    def test_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        got = T.softmax(Tensor(x)).array
        npt.assert_allclose(got, expected, atol=1e-12)
        npt.assert_allclose(got, [0.09003057, 0.24472847, 0.66524096], atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(7)
        a = T.softmax(Tensor(x)).array
        b = T.softmax(Tensor(x + 123.456)).array
        npt.assert_allclose(a, b, atol=1e-12)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_slices_sum_to_one(self, vals):
        out = T.softmax(Tensor(np.array(vals))).array
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-6


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0

    def test_tails(self):
        assert abs(T.gelu(Tensor(6.0)).item() - 6.0) < 1e-6
        assert abs(T.gelu(Tensor(-6.0)).item()) < 1e-6

    def test_exact_cdf_value(self):
        # independent CDF routine, not the erf expression inside the op
        expected = 1.0 * norm.cdf(1.0)
        got = T.gelu(Tensor(1.0)).item()
        assert abs(got - expected) < 1e-10
        assert abs(got - 0.84134) < 1e-5


class TestLayout:
    def test_reshape_row_major(self):
        x = np.arange(12, dtype=float).reshape(2, 6)
        out = T.reshape(Tensor(x), (3, 4)).array
        npt.assert_array_equal(out.reshape(-1), x.reshape(-1))

    def test_reshape_count_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.reshape(Tensor(np.zeros((2, 6))), (5, 3))

    def test_concat_shape(self):
        a = Tensor(np.zeros((3, 4)))
        b = Tensor(np.zeros((5, 4)))
        assert T.concat([a, b], axis=0).shape == (8, 4)

    def test_split_concat_round_trip_bit_identical(self):
        rng = np.random.default_rng(7)
        parts = [rng.standard_normal((n, 3)) for n in (2, 5, 1)]
        joined = T.concat([Tensor(p) for p in parts], axis=0)
        back = T.split(joined, [2, 5, 1], axis=0)
        for p, q in zip(parts, back):
            npt.assert_array_equal(p, q.array)

    def test_split_size_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.split(Tensor(np.zeros((4, 2))), [1, 2], axis=0)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_reshape_round_trip_exact(self, a, b, c):
        rng = np.random.default_rng(a * 16 + b * 4 + c)
        x = rng.standard_normal((a, b, c))
        back = T.reshape(T.reshape(Tensor(x), (a * b * c,)), (a, b, c)).array
        npt.assert_array_equal(back, x)

    def test_transpose_round_trip(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4))
        back = T.transpose(T.transpose(Tensor(x), (2, 0, 1)), (1, 2, 0)).array
        npt.assert_array_equal(back, x)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        npt.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_matmul_grads_match_finite_differences(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)))
        err = T.grad_check(lambda t: T.matmul(t, b).sum(), a, eps=1e-5)
        assert err < 1e-6
        err_b = T.grad_check(lambda t: T.matmul(a, t).sum(), Tensor(b.array), eps=1e-5)
        assert err_b < 1e-6

    def test_unused_parameter_gets_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([3.0, 4.0], requires_grad=True)
        (x * 2.0).sum().backward()
        npt.assert_array_equal(unused.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.GradError):
            (x * 2.0).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        npt.assert_allclose(x.grad, 2.0 * first, atol=1e-12)
        x.zero_grad()
        npt.assert_array_equal(x.grad, [0.0, 0.0])

    def test_diamond_graph_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        loss = (y + y * 3.0).sum()
        loss.backward()
        npt.assert_allclose(x.grad, [8.0, 8.0], atol=1e-12)

    def test_no_grad_suppresses_tracking(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        z = x * 2.0
        assert z.requires_grad

    def test_broadcast_bias_grad(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((2, 3, 4)))
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        (x + b).sum().backward()
        npt.assert_allclose(b.grad, np.full(4, 6.0), atol=1e-12)


class TestGradCheck:
    def test_sum_is_exact(self):
        rng = np.random.default_rng(11)
        assert T.grad_check(lambda t: t.sum(), Tensor(rng.standard_normal((3, 3)))) < 1e-10

    def test_layernorm_composite(self):
        rng = np.random.default_rng(12)
        g = Tensor(rng.standard_normal(6))
        b = Tensor(rng.standard_normal(6))

        def f(t):
            return (T.layernorm(t, g, b) * T.layernorm(t, g, b)).sum()

        assert T.grad_check(f, Tensor(rng.standard_normal((4, 6)))) <= 1e-4

    @pytest.mark.parametrize(
        "name,f",
        [
            ("softmax", lambda t: (T.softmax(t, axis=-1) * T.softmax(t, axis=-1)).sum()),
            ("log_softmax", lambda t: (T.log_softmax(t, axis=-1) * 0.5).sum()),
            ("gelu", lambda t: T.gelu(t).sum()),
            ("exp", lambda t: T.exp(t * 0.5).sum()),
            ("div", lambda t: (t / (t * t + 1.0)).sum()),
            ("pow", lambda t: (t**3.0).sum()),
            ("conv", lambda t: T.conv2d(T.reshape(t, (1, 2, 4, 4)),
                                        Tensor(np.linspace(-1, 1, 36).reshape(2, 2, 3, 3)),
                                        stride=1, padding=1).sum()),
        ],
    )
    def test_primitive_grads(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = Tensor(rng.standard_normal(32) * 0.7)
        assert T.grad_check(f, x, eps=1e-5) <= 1e-4

    def test_conv_weight_grad(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))

        def f(w):
            return T.conv2d(x, T.reshape(w, (3, 2, 3, 3)), stride=2, padding=1).sum()

        assert T.grad_check(f, Tensor(rng.standard_normal(54)), eps=1e-5) <= 1e-4

    def test_nonfinite_reported(self):
        with pytest.raises(T.GradError, match="non-finite"):
            T.grad_check(lambda t: T.log(t).sum(), Tensor(np.array([-1.0])))


class TestFiniteness:
    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_moderate_inputs_stay_finite(self, a, b):
        x = Tensor([a, b])
        for out in (
            T.softmax(x),
            T.gelu(x),
            T.layernorm(Tensor([[a, b]]), Tensor(np.ones(2)), Tensor(np.zeros(2))),
            x * x,
            x + x,
        ):
            assert np.isfinite(out.array).all()
