import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abldeg.autodiff import (AdamState, Conv2dParams, Tensor, adam_step, add,
                             backward, conv2d, l1_loss, mixture_blur, pad2d,
                             relu, scale, softmax_rows, tsum, unpad2d)
from conftest import numeric_grad, rel_err


def naive_conv(x, w, b, stride, pad, mode):
    xp = pad2d(x, pad, pad, mode)
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[q]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, ch, i * stride + u, j * stride + v] * w[q, ch, u, v]
                    out[a, q, i, j] = acc
    return out


def params(w, b, stride=1, pad=1, mode="reflect"):
    return Conv2dParams(Tensor(w, True), Tensor(b, True), stride, pad, mode)


class TestConv:
    def test_identity_1x1(self, rng):
        x = rng.random((1, 1, 5, 5))
        out = conv2d(Tensor(x), params(np.ones((1, 1, 1, 1)), np.zeros(1), pad=0))
        np.testing.assert_array_equal(out.data, x)

    def test_average_on_constant(self):
        x = np.full((1, 1, 6, 6), 0.37)
        out = conv2d(Tensor(x), params(np.full((1, 1, 3, 3), 1 / 9), np.zeros(1)))
        np.testing.assert_allclose(out.data, 0.37, atol=1e-15)

    @pytest.mark.parametrize("stride,mode", [(1, "reflect"), (1, "zero"), (2, "zero"), (2, "reflect")])
    def test_matches_naive(self, rng, stride, mode):
        x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = conv2d(Tensor(x), params(w, b, stride, 1, mode))
        ref = naive_conv(x, w, b, stride, 1, mode)
        assert out.shape == ref.shape
        assert np.abs(out.data - ref).max() < 1e-12

    def test_output_extent(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 9, 7)))
        out = conv2d(x, params(rng.normal(size=(3, 2, 3, 3)), np.zeros(3), stride=2, pad=1, mode="zero"))
        assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), params(rng.normal(size=(1, 3, 3, 3)), np.zeros(1)))

    def test_even_kernel_needs_stride(self):
        with pytest.raises(ValueError):
            params(np.zeros((1, 1, 2, 2)), np.zeros(1), stride=1)

    @given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(4, 9), w=st.integers(4, 9),
           stride=st.sampled_from([1, 2]), mode=st.sampled_from(["zero", "reflect"]), seed=st.integers(0, 10**6))
    @settings(max_examples=15, deadline=None)
    def test_gradients(self, n, c, h, w, stride, mode, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(n, c, h, w)), True)
        p = params(r.normal(size=(2, c, 3, 3)), r.normal(size=2), stride, 1, mode)
        out_shape = conv2d(x, p).shape
        proj = r.normal(size=out_shape)

        def f():
            return float((conv2d(x, p).data * proj).sum())

        gx, gw, gb = conv2d(x, p)._backward(proj)
        for analytic, t in ((gx, x), (gw, p.weight), (gb, p.bias)):
            assert rel_err(analytic, numeric_grad(f, t.data)) < 1e-4


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_grad(self):
        x = Tensor([-1.0, 2.0], True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([0.0], True)
        backward(tsum(relu(x)))
        assert x.grad[0] == 0.0

    def test_relu_random(self, rng):
        x = rng.normal(size=(3, 7))
        np.testing.assert_array_equal(relu(Tensor(x)).data, np.maximum(x, 0))

    def test_add_scale_sum_grads(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3)), True), Tensor(rng.normal(size=(2, 3)), True)
        backward(tsum(scale(add(a, b), 2.5)))
        np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.5))
        np.testing.assert_array_equal(b.grad, np.full((2, 3), 2.5))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25, atol=1e-16)

    def test_saturation(self):
        s = softmax_rows(Tensor([[1e3, 0, 0, 0]])).data
        assert np.isfinite(s).all()
        np.testing.assert_allclose(s, [[1, 0, 0, 0]], atol=1e-300)

    def test_jacobian(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), True)
        proj = rng.normal(size=(3, 4))
        g = softmax_rows(x)._backward(proj)[0]
        num = numeric_grad(lambda: float((softmax_rows(Tensor(x.data)).data * proj).sum()), x.data)
        assert rel_err(g, num) < 1e-6

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.integers(1, 4))
    def test_rows_on_simplex(self, row, nrows):
        s = softmax_rows(Tensor(np.tile(row, (nrows, 1)))).data
        assert np.abs(s.sum(axis=1) - 1).max() <= 1e-12
        assert (s > 0).all()


class TestL1:
    def test_identical(self, rng):
        x = rng.random((2, 3))
        assert float(l1_loss(Tensor(x), x).data) == 0.0

    def test_simple(self):
        assert float(l1_loss(Tensor([1.0, 0.0]), np.zeros(2)).data) == 0.5

    def test_random_vs_sum(self, rng):
        a, b = rng.random((4, 5)), rng.random((4, 5))
        ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(float(l1_loss(Tensor(a), b).data) - ref) < 1e-15

    def test_grad_and_ties(self):
        p = Tensor([1.0, 0.0, -2.0, 0.5], True)
        backward(l1_loss(p, np.array([0.0, 0.0, 0.0, 0.5])))
        np.testing.assert_array_equal(p.grad, [0.25, 0.0, -0.25, 0.0])

    def test_gradcheck(self, rng):
        p = Tensor(rng.normal(size=(2, 5)), True)
        t = rng.normal(size=(2, 5))
        backward(l1_loss(p, t))
        num = numeric_grad(lambda: float(l1_loss(Tensor(p.data), t).data), p.data)
        assert rel_err(p.grad, num) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(Tensor(np.zeros(2)), np.zeros(3))


class TestBackward:
    def test_sum_grad_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_accumulates(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), True)
        p = params(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
        loss = tsum(relu(conv2d(x, p)))
        backward(loss)
        first = x.grad.copy(), p.weight.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first[0])
        np.testing.assert_array_equal(p.weight.grad, 2 * first[1])

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.zeros(3), True))

    def test_shared_subgraph(self, rng):
        # x feeds two branches; gradient must sum both paths
        x = Tensor(rng.normal(size=(3,)), True)
        y = relu(x)
        backward(tsum(add(y, scale(y, 3.0))))
        np.testing.assert_array_equal(x.grad, 4.0 * (x.data > 0))


class TestPadding:
    @pytest.mark.parametrize("mode", ["zero", "reflect"])
    @pytest.mark.parametrize("before,after", [(1, 1), (7, 8), (0, 2)])
    def test_unpad_is_adjoint(self, rng, mode, before, after):
        x = rng.normal(size=(2, 1, 10, 11))
        y = rng.normal(size=(2, 1, 10 + before + after, 11 + before + after))
        lhs = (pad2d(x, before, after, mode) * y).sum()
        rhs = (x * unpad2d(y, before, after, mode)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_reflect_too_wide(self):
        with pytest.raises(ValueError):
            pad2d(np.zeros((1, 1, 5, 5)), 5, 5, "reflect")


class TestMixtureBlur:
    def test_matches_naive(self, rng):
        x = rng.normal(size=(1, 2, 12, 12))
        kernels = rng.random((4, 16, 16))
        kernels /= kernels.sum(axis=(1, 2), keepdims=True)
        w = rng.random((2, 4))
        out = mixture_blur(Tensor(x), Tensor(w), kernels).data
        xp = np.pad(x, ((0, 0), (0, 0), (7, 8), (7, 8)), mode="reflect")
        ref = np.zeros_like(x)
        for c in range(2):
            for i in range(12):
                for j in range(12):
                    ref[0, c, i, j] = sum(w[c, k] * (xp[0, c, i:i + 16, j:j + 16] * kernels[k]).sum() for k in range(4))
        assert np.abs(out - ref).max() < 1e-12

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 10, 11)), True)
        kernels = rng.random((3, 5, 5))
        w = Tensor(rng.random((3, 3)), True)
        proj = rng.normal(size=x.shape)
        gx, gw = mixture_blur(x, w, kernels)._backward(proj)

        def f():
            return float((mixture_blur(Tensor(x.data), Tensor(w.data), kernels).data * proj).sum())

        assert rel_err(gx, numeric_grad(f, x.data)) < 1e-4
        assert rel_err(gw, numeric_grad(f, w.data)) < 1e-4

    def test_bad_weights(self, rng):
        with pytest.raises(ValueError):
            mixture_blur(Tensor(rng.normal(size=(1, 2, 12, 12))), Tensor(np.ones((2, 3))), np.ones((4, 3, 3)))


class TestAdam:
    def test_zero_grad_no_change(self, rng):
        p = Tensor(rng.normal(size=4), True)
        before = p.data.copy()
        p.grad = np.zeros(4)
        adam_step([p], AdamState(lr=1e-4))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step(self):
        # m_hat = 1, v_hat = 1 after one step -> update lr * 1 / (1 + eps)
        p = Tensor([0.0], True)
        p.grad = np.array([1.0])
        st_ = AdamState(lr=1e-4)
        adam_step([p], st_)
        assert st_.step == 1
        assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_quadratic_bowl(self):
        # scripted scalar reference of the same recurrence
        x_ref, m, v = 1.0, 0.0, 0.0
        for t in range(1, 501):
            g = 2 * x_ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x_ref -= 0.05 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
        p = Tensor([1.0], True)
        st_ = AdamState(lr=0.05)
        for _ in range(500):
            p.grad = 2 * p.data
            adam_step([p], st_)
        assert abs(p.data[0]) < 0.05
        assert p.data[0] == pytest.approx(x_ref, abs=1e-12)

    def test_missing_grad(self):
        with pytest.raises(ValueError):
            adam_step([Tensor([1.0], True)], AdamState())
