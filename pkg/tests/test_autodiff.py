import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmode_ssl import autodiff as ad
from mmode_ssl.autodiff import Tensor
from mmode_ssl.errors import NumericalError
from mmode_ssl.gradcheck import check_gradients, numerical_gradient

TOL = 1e-6


def direct_conv(x, k, b, stride, pad):
    """Loop-nest cross-correlation oracle."""
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[s, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[s, o, i, j] = np.sum(patch * k[o]) + (b[o] if b is not None else 0.0)
    return out


class TestForward:
    def test_matmul_identity(self, rng):
        a = rng.uniform(-1, 1, (2, 3))
        assert np.array_equal(ad.matmul(np.eye(2), a).data, a)

    def test_matmul_hand_example(self):
        out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_conv_identity_kernel(self, rng):
        x = rng.uniform(-1, 1, (1, 3, 3))
        out = ad.conv2d(x, np.ones((1, 1, 1, 1)))
        assert np.array_equal(out.data, x)

    def test_conv_ones(self):
        out = ad.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)))
        assert np.array_equal(out.data, np.full((1, 2, 2), 4.0))

    @pytest.mark.parametrize("stride,pad,kernel", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 3), (3, 1, 2)])
    def test_conv_matches_loop_oracle(self, rng, stride, pad, kernel):
        x = rng.uniform(-1, 1, (2, 3, 7, 6))
        k = rng.uniform(-1, 1, (4, 3, kernel, kernel))
        b = rng.uniform(-1, 1, 4)
        np.testing.assert_allclose(ad.conv2d(x, k, b, stride, pad).data, direct_conv(x, k, b, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(0, 0), (1, -1), (1.5, 0)])
    def test_conv_invalid_stride_pad(self, stride, pad):
        with pytest.raises(ValueError):
            ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), stride=stride, pad=pad)

    def test_conv_kernel_too_large(self):
        with pytest.raises(ValueError):
            ad.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_max_pool_oracle(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 6, 5))
        out = ad.max_pool2d(x, 2).data
        expected = np.zeros((2, 3, 3, 2))
        for i in range(3):
            for j in range(2):
                expected[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
        assert np.array_equal(out, expected)

    def test_global_avg_pool(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 5))
        np.testing.assert_allclose(ad.global_avg_pool(x).data, x.mean(axis=(2, 3)))

    def test_bce_matches_formula(self, rng):
        z = rng.uniform(-5, 5, 20)
        y = rng.integers(0, 2, 20).astype(float)
        p = 1 / (1 + np.exp(-z))
        direct = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert abs(float(ad.bce_with_logits(z, y).data) - direct) < 1e-12

    def test_bce_large_logits_stay_finite(self):
        out = ad.bce_with_logits(np.array([800.0, -800.0]), np.array([1.0, 0.0]))
        assert float(out.data) == 0.0

    def test_logsumexp_mask(self, rng):
        x = rng.uniform(-3, 3, (4, 5))
        mask = rng.random((4, 5)) > 0.3
        mask[:, 0] = True
        out = ad.logsumexp(x, axis=1, mask=mask).data
        expected = [np.log(np.exp(x[i][mask[i]]).sum()) for i in range(4)]
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_batch_normalize_moments(self, rng):
        z = rng.normal(3.0, 2.0, (50, 4))
        out = ad.batch_normalize(z, eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)

    def test_index_slice(self, rng):
        x = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
        ad.tsum(x[1:3]).backward()
        expected = np.zeros((5, 3))
        expected[1:3] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_forward_deterministic(self, rng):
        x = rng.uniform(-1, 1, (2, 1, 8, 8))
        k = rng.uniform(-1, 1, (3, 1, 3, 3))
        a = ad.relu(ad.conv2d(x, k, pad=1)).data
        b = ad.relu(ad.conv2d(x, k, pad=1)).data
        assert np.array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_activation_ranges(self, x):
        assert (ad.relu(x).data >= 0).all()
        s = ad.sigmoid(x).data
        assert ((s >= 0) & (s <= 1)).all()
        assert ((s > 0) & (s < 1))[np.abs(x) < 30].all()


class TestNumericalErrors:
    def test_log_of_zero_raises(self):
        with pytest.raises(NumericalError):
            ad.log(np.zeros(3))

    def test_division_by_zero_raises(self):
        with pytest.raises(NumericalError):
            ad.div(np.ones(2), np.zeros(2))

    def test_overflow_raises(self):
        with pytest.raises(NumericalError):
            ad.exp(np.array([1000.0]))

    def test_numerical_error_is_floating_point_error(self):
        assert issubclass(NumericalError, FloatingPointError)


class TestBackward:
    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_constant_loss_zero_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(x * 0.0) + 5.0
        loss.backward()
        assert np.array_equal(x.grad, np.zeros(3))

    def test_sum_gradient_ones(self, rng):
        x = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        ad.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((4, 2)))

    def test_shared_node_visited_once(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        ad.tsum(y + y).backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_graph_without_grad(self):
        out = ad.mul(np.ones(2), np.ones(2))
        assert not out.requires_grad and out._parents == ()

    def test_repeated_backward_on_fresh_graph(self, rng):
        data = rng.uniform(-1, 1, 4)
        grads = []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            ad.tsum(ad.exp(x)).backward()
            grads.append(x.grad)
        assert np.array_equal(grads[0], grads[1])


def _unary_case(op):
    def build(x):
        y = op(x)
        return ad.tsum(y * np.linspace(0.5, 1.5, y.size).reshape(y.shape))

    return build


class TestGradients:
    """Analytic gradients against central differences (h = 1e-5)."""

    @pytest.mark.parametrize(
        "build,low",
        [
            (_unary_case(ad.exp), -1.0),
            (_unary_case(ad.log), 0.2),
            (_unary_case(ad.sqrt), 0.2),
            (_unary_case(ad.sigmoid), -1.0),
            (_unary_case(lambda t: ad.power(t, 3.0)), -1.0),
            (_unary_case(ad.neg), -1.0),
            (_unary_case(ad.transpose), -1.0),
            (_unary_case(lambda t: ad.reshape(t, (6, 2))), -1.0),
            (_unary_case(lambda t: ad.mean(t, axis=0, keepdims=True)), -1.0),
            (_unary_case(lambda t: ad.tsum(t, axis=1)), -1.0),
            (_unary_case(lambda t: ad.logsumexp(t, axis=1)), -1.0),
            (_unary_case(lambda t: ad.batch_normalize(t)), -1.0),
            (_unary_case(lambda t: ad.batch_normalize(t, ddof=1)), -1.0),
        ],
    )
    def test_unary(self, rng, build, low):
        x = rng.uniform(low, 1.0, (4, 3))
        assert check_gradients(build, [x]) < TOL

    def test_relu_away_from_kink(self, rng):
        x = rng.uniform(0.1, 1.0, (4, 3)) * rng.choice([-1, 1], (4, 3))
        assert check_gradients(lambda t: ad.tsum(ad.relu(t) * 1.5), [x]) < TOL

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_binary_with_broadcast(self, rng, op):
        a = rng.uniform(0.5, 1.5, (4, 3))
        b = rng.uniform(0.5, 1.5, (3,))
        build = lambda x, y: ad.tsum(ad.exp(op(x, y) * 0.3))
        assert check_gradients(build, [a, b]) < TOL

    def test_matmul(self, rng):
        a, b = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (4, 3))
        assert check_gradients(lambda x, y: ad.tsum(ad.exp(ad.matmul(x, y) * 0.5)), [a, b]) < TOL

    def test_concat(self, rng):
        a, b = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (4, 3))
        build = lambda x, y: ad.tsum(ad.exp(ad.concat([x, y], axis=0)) * np.arange(18.0).reshape(6, 3))
        assert check_gradients(build, [a, b]) < TOL

    def test_masked_logsumexp(self, rng):
        x = rng.uniform(-1, 1, (4, 4))
        mask = ~np.eye(4, dtype=bool)
        assert check_gradients(lambda t: ad.tsum(ad.logsumexp(t, axis=1, mask=mask) * np.arange(1.0, 5.0)), [x]) < TOL

    def test_index(self, rng):
        x = rng.uniform(-1, 1, (5, 3))
        assert check_gradients(lambda t: ad.tsum(ad.exp(t[1:4, ::2])), [x]) < TOL

    @pytest.mark.parametrize("stride,pad,kernel", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 2)])
    def test_conv2d(self, rng, stride, pad, kernel):
        x = rng.uniform(-1, 1, (2, 2, 6, 5))
        k = rng.uniform(-1, 1, (3, 2, kernel, kernel))
        b = rng.uniform(-1, 1, 3)
        weights = rng.uniform(-1, 1, ad.conv2d(x, k, b, stride, pad).shape)
        build = lambda x_, k_, b_: ad.tsum(ad.conv2d(x_, k_, b_, stride, pad) * weights)
        assert check_gradients(build, [x, k, b]) < TOL

    def test_max_pool(self, rng):
        x = rng.permutation(np.linspace(-1, 1, 2 * 2 * 5 * 4)).reshape(2, 2, 5, 4)
        weights = rng.uniform(-1, 1, (2, 2, 2, 2))
        assert check_gradients(lambda t: ad.tsum(ad.max_pool2d(t, 2) * weights), [x]) < TOL

    def test_global_avg_pool(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        assert check_gradients(lambda t: ad.tsum(ad.exp(ad.global_avg_pool(t))), [x]) < TOL

    def test_bce(self, rng):
        z = rng.uniform(-2, 2, 10)
        y = rng.integers(0, 2, 10).astype(float)
        assert check_gradients(lambda t: ad.bce_with_logits(t, y), [z]) < TOL

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 10**6))
    def test_random_composite(self, n, d, seed):
        g = np.random.default_rng(seed)
        a, w = g.uniform(-1, 1, (n, d)), g.uniform(-1, 1, (d, d))
        build = lambda x, y: ad.mean(ad.sigmoid(ad.matmul(x, y)) * ad.exp(x * 0.5))
        assert check_gradients(build, [a, w]) < 1e-4


def test_numerical_gradient_of_quadratic():
    (grad,) = numerical_gradient(lambda x: float(np.sum(x**2)), [np.array([1.0, -2.0, 3.0])])
    np.testing.assert_allclose(grad, [2.0, -4.0, 6.0], atol=1e-8)
