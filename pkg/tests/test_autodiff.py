import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from coarsefine import autodiff as ad
from coarsefine.autodiff import Tensor, TapeError, ShapeError


def check_grad(fn, *arrays, tol=1e-7):
    """Compare reverse mode against central differences for every input of ``fn``."""
    rng = np.random.default_rng(7)
    out = fn(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=out.shape)

    def scalar(*ts):
        return ad.reduce(ad.mul(fn(*ts), Tensor(proj)), None, "sum")

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(scalar(*leaves))
    for i, a in enumerate(arrays):
        def f(t, i=i):
            ts = [Tensor(b) for b in arrays]
            ts[i] = t
            return scalar(*ts)
        num = ad.finite_diff_grad(f, Tensor(a), 1e-5)
        got = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        assert ad.max_rel_error(got, num) < tol, (i, got, num)


class TestElementwise:
    def test_broadcast_binary_grads(self, rng):
        a = rng.normal(size=(3, 1, 4))
        b = rng.normal(size=(2, 1))
        for op in (ad.add, ad.sub, ad.mul):
            check_grad(op, a, b)
        check_grad(ad.div, a, rng.uniform(1.0, 2.0, size=(2, 1)))

    @pytest.mark.parametrize("name", ["neg", "exp", "sigmoid", "square"])
    def test_unary_grads(self, rng, name):
        check_grad(lambda x: ad.elementwise(name, x), rng.normal(size=(2, 5)))

    def test_log_and_relu(self, rng):
        check_grad(ad.log, rng.uniform(0.5, 2.0, size=(4,)))
        x = rng.normal(size=(6,))
        x[np.abs(x) < 0.1] = 0.5
        check_grad(ad.relu, x)
        check_grad(lambda t: ad.clamp_min(t, 0.2), x)

    def test_sigmoid_is_stable_for_large_inputs(self):
        v = ad.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).values
        assert_array_equal(v, [0.0, 0.5, 1.0])

    def test_bce_with_logits_matches_direct_formula(self, rng):
        z = rng.normal(size=(3, 4))
        y = (rng.random((3, 4)) < 0.5).astype(float)
        p = 1.0 / (1.0 + np.exp(-z))
        assert_allclose(ad.bce_with_logits(Tensor(z), y).values, -(y * np.log(p) + (1 - y) * np.log(1 - p)), rtol=1e-12)
        check_grad(lambda t: ad.bce_with_logits(t, y), z)

    def test_bce_with_logits_finite_at_extremes(self):
        v = ad.bce_with_logits(Tensor(np.array([1000.0, -1000.0])), np.array([0.0, 1.0])).values
        assert_allclose(v, [1000.0, 1000.0])

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestStructural:
    @pytest.mark.parametrize("kind", ["sum", "mean", "max"])
    def test_reduce(self, rng, kind):
        check_grad(lambda t: ad.reduce(t, (0, 2), kind), rng.normal(size=(3, 4, 5)))
        check_grad(lambda t: ad.reduce(t, -1, kind, keepdims=True), rng.normal(size=(3, 4)))

    def test_reshape_transpose_getitem_take(self, rng):
        x = rng.normal(size=(2, 3, 4))
        check_grad(lambda t: ad.reshape(t, (6, 4)), x)
        check_grad(lambda t: ad.transpose(t, (2, 0, 1)), x)
        check_grad(lambda t: t[1, :, 1:3], x)
        check_grad(lambda t: ad.take(t, np.array([0, 2, 2, 1]), 1), x)

    def test_concat_cumsum_matmul(self, rng):
        check_grad(lambda a, b: ad.concat([a, b], 1), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
        check_grad(lambda t: ad.cumsum(t, -1), rng.normal(size=(2, 5)))
        check_grad(ad.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))

    def test_cumsum_values(self, rng):
        x = rng.normal(size=(3, 7))
        assert_array_equal(ad.cumsum(Tensor(x), -1).values, np.cumsum(x, -1))


class TestConvolutions:
    def test_conv_temporal_matches_loop(self, rng):
        x = rng.normal(size=(2, 3, 9, 2, 2))
        w = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=(4,))
        stride, pad = 2, 1
        out = ad.conv_temporal(Tensor(x), Tensor(w), stride=stride, padding=pad, bias=Tensor(b)).values
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0), (0, 0)))
        t_out = (9 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, t_out, 2, 2))
        for t in range(t_out):
            win = xp[:, :, t * stride:t * stride + 3]
            ref[:, :, t] = np.einsum("ncktw,ock->notw", win, w) + b[None, :, None, None]
        assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_conv_grads(self, rng):
        check_grad(lambda x, w, b: ad.conv_temporal(x, w, stride=2, padding=1, bias=b),
                   rng.normal(size=(1, 2, 6, 2, 2)), rng.normal(size=(3, 2, 3)), rng.normal(size=(3,)))
        check_grad(lambda x, w, b: ad.conv_pointwise(x, w, b),
                   rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4,)))
        check_grad(ad.temporal_linear, rng.normal(size=(2, 5, 2, 2)), rng.normal(size=(3, 5)))

    @pytest.mark.parametrize("kind", ["max", "mean", "last"])
    def test_window_reduce(self, rng, kind):
        x = rng.normal(size=(2, 8, 3, 3))
        out = ad.window_reduce(Tensor(x), -3, 4, kind).values
        blocks = x.reshape(2, 2, 4, 3, 3)
        ref = {"max": blocks.max(2), "mean": blocks.mean(2), "last": blocks[:, :, -1]}[kind]
        assert_allclose(out, ref, rtol=1e-14)
        check_grad(lambda t: ad.window_reduce(t, -3, 4, kind), x)

    def test_spatial_pool(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = ad.spatial_pool(Tensor(x), 2, "max").values
        assert_allclose(out, x.reshape(2, 3, 2, 2, 2, 2).max(axis=(3, 5)))
        check_grad(lambda t: ad.spatial_pool(t, 2, "mean"), x)


class TestTape:
    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.reduce(ad.square(x), None, "sum")
        ad.backward(loss)
        with pytest.raises(TapeError):
            ad.backward(loss)

    def test_leaf_gradients_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            ad.backward(ad.reduce(ad.mul(x, 3.0), None, "sum"))
        assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_subgraph_gets_summed_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.square(x)
        ad.backward(ad.reduce(ad.add(y, ad.mul(y, 2.0)), None, "sum"))
        assert_allclose(x.grad, [12.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(ad.mul(x, 2.0))

    def test_record_and_scope(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ad.record() as tape:
            with ad.scope("outer"):
                with ad.scope("inner"):
                    y = ad.exp(x)
            ad.neg(y)
        assert tape.entries == [("exp", "outer.inner"), ("neg", "")]
        assert tape.ops("outer") == [0]

    def test_finite_diff_rejects_bad_step(self):
        with pytest.raises(ValueError):
            ad.finite_diff_grad(lambda t: t, Tensor(np.ones(1)), 0.0)
