import math

import numpy as np
import pytest

from taskpyramid import ops
from taskpyramid.errors import ContractViolation
from taskpyramid.gradcheck import grad_check
from taskpyramid.tensor import ParamStore, Parameter, Tensor


# -- independent oracles -------------------------------------------------------


def conv2d_oracle(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[bi, c, oy * stride + ky, ox * stride + kx] * w[o, c, ky, kx]
                    out[bi, o, oy, ox] = acc + b[0, o, 0, 0]
    return out


def bilinear_oracle(x, factor):
    """Scalar half-pixel-center sampling at every output coordinate."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * factor, w * factor))
    for oy in range(h * factor):
        for ox in range(w * factor):
            sy = min(max((oy + 0.5) / factor - 0.5, 0.0), h - 1.0)
            sx = min(max((ox + 0.5) / factor - 0.5, 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, :, oy, ox] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out


# -- conv2d --------------------------------------------------------------------


class TestConv2d:
    def test_identity_1x1(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = Tensor(np.eye(1).reshape(1, 1, 1, 1))
        b = Tensor(np.zeros((1, 1, 1, 1)))
        y = ops.conv2d(x, w, b)
        assert np.array_equal(y.data, x.data)

    def test_identity_1x1_multichannel(self):
        x = Tensor(np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros((1, 3, 1, 1)))
        assert np.array_equal(ops.conv2d(x, w, b).data, x.data)

    def test_all_ones_3x3(self):
        # 3x3 all-ones kernel, padding 1, on a 2x2 all-ones input: each output
        # sums the full input -> 4.0 everywhere (checked against the oracle).
        x = np.ones((1, 1, 2, 2))
        w = np.ones((1, 1, 3, 3))
        b = np.zeros((1, 1, 1, 1))
        expect = conv2d_oracle(x, w, b, 1, 1)
        assert np.array_equal(expect, np.full((1, 1, 2, 2), 4.0))
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
        assert np.array_equal(got.data, expect)

    def test_zero_weight_gives_bias(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        b = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
        y = ops.conv2d(x, w, b, padding=1)
        assert np.array_equal(y.data, np.broadcast_to(b.data, (1, 4, 3, 3)))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal((1, 4, 1, 1))
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        assert np.allclose(got.data, conv2d_oracle(x, w, b, stride, padding), atol=1e-12)

    def test_linearity_in_input(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(np.zeros((1, 2, 1, 1)))
        x1, x2 = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 4, 4))
        lhs = ops.conv2d(Tensor(2.0 * x1 - 3.0 * x2), w, b, padding=1).data
        rhs = 2.0 * ops.conv2d(Tensor(x1), w, b, padding=1).data - 3.0 * ops.conv2d(
            Tensor(x2), w, b, padding=1
        ).data
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        b = Tensor(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ContractViolation, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            ops.conv2d(x, w, b)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))),
                       Tensor(np.zeros((1, 1, 1, 1))))


# -- bilinear upsample ----------------------------------------------------------


class TestBilinearUpsample:
    def test_factor_one_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        assert np.array_equal(ops.bilinear_upsample(Tensor(x), 1).data, x)

    def test_constant_preserved_exactly(self):
        x = Tensor(np.full((1, 1, 3, 5), 0.731))
        y = ops.bilinear_upsample(x, 2)
        assert y.shape == (1, 1, 6, 10)
        assert np.all(y.data == 0.731)

    def test_2x2_derived_values(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        expect = bilinear_oracle(x, 2)
        got = ops.bilinear_upsample(Tensor(x), 2)
        assert np.allclose(got.data, expect, atol=1e-15)
        # frozen values from the sampling oracle
        assert np.allclose(
            expect[0, 0],
            np.array(
                [
                    [0.0, 0.25, 0.75, 1.0],
                    [0.5, 0.75, 1.25, 1.5],
                    [1.5, 1.75, 2.25, 2.5],
                    [2.0, 2.25, 2.75, 3.0],
                ]
            ),
        )

    @pytest.mark.parametrize("factor", [2, 4])
    def test_matches_oracle_random(self, rng, factor):
        x = rng.standard_normal((2, 3, 4, 5))
        got = ops.bilinear_upsample(Tensor(x), factor)
        assert np.allclose(got.data, bilinear_oracle(x, factor), atol=1e-12)

    def test_bad_factor(self):
        with pytest.raises(ContractViolation):
            ops.bilinear_upsample(Tensor(np.zeros((1, 1, 2, 2))), 0)


# -- concat / slice --------------------------------------------------------------


class TestConcat:
    def test_definition(self, rng):
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        y = ops.concat_channels([Tensor(a), Tensor(b)])
        assert y.shape == (1, 5, 3, 3)
        assert np.array_equal(y.data[:, :2], a)
        assert np.array_equal(y.data[:, 2:], b)

    def test_single_input_identity(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        assert np.array_equal(ops.concat_channels([Tensor(a)]).data, a)

    def test_roundtrip_slices(self, rng):
        parts = [rng.standard_normal((1, c, 4, 4)) for c in (1, 2, 3)]
        y = ops.concat_channels([Tensor(p) for p in parts])
        offsets = [0, 1, 3, 6]
        for i, p in enumerate(parts):
            back = ops.slice_channels(y, offsets[i], offsets[i + 1])
            assert np.array_equal(back.data, p)

    def test_spatial_mismatch(self):
        with pytest.raises(ContractViolation):
            ops.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


# -- elementwise -----------------------------------------------------------------


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor.scalar(0.0)).item() == 0.5

    def test_relu(self):
        x = Tensor(np.array([-3.0, 3.0]).reshape(1, 1, 1, 2))
        assert np.array_equal(ops.relu(x).data.ravel(), [0.0, 3.0])

    def test_mul_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        y = ops.mul(Tensor(x), Tensor(np.ones_like(x)))
        assert np.array_equal(y.data, x)

    def test_dispatcher(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        assert np.array_equal(ops.elementwise("relu", x).data, ops.relu(x).data)
        with pytest.raises(ContractViolation):
            ops.elementwise("mul", x)
        with pytest.raises(ContractViolation):
            ops.elementwise("tanh", x)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ops.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))


# -- softmax over groups -----------------------------------------------------------


class TestSoftmaxOverGroups:
    def test_equal_logits_uniform(self):
        x = Tensor(np.zeros((1, 6, 2, 2)))
        y = ops.softmax_over_groups(x, 3)
        assert np.allclose(y.data, 1.0 / 3.0)

    def test_scalar_case(self):
        # N=2, C=1: logits (0, ln 3) -> (0.25, 0.75)
        x = Tensor(np.array([0.0, math.log(3.0)]).reshape(1, 2, 1, 1))
        y = ops.softmax_over_groups(x, 2)
        assert np.allclose(y.data.ravel(), [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((1, 9, 2, 2))
        a = ops.softmax_over_groups(Tensor(x), 3).data
        b = ops.softmax_over_groups(Tensor(x + 17.3), 3).data
        assert np.allclose(a, b, atol=1e-12)

    def test_groups_sum_to_one(self, rng):
        x = rng.standard_normal((2, 10, 3, 3))
        y = ops.softmax_over_groups(Tensor(x), 5).data
        sums = y.reshape(2, 5, 2, 3, 3).sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)
        assert np.all((y > 0) & (y < 1))

    def test_indivisible_rejected(self):
        with pytest.raises(ContractViolation):
            ops.softmax_over_groups(Tensor(np.zeros((1, 5, 1, 1))), 2)


# -- global average pool ------------------------------------------------------------


class TestGlobalAvgPool:
    def test_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 2.5))
        assert np.allclose(ops.global_avg_pool(x).data, 2.5)

    def test_arithmetic_mean(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
        assert ops.global_avg_pool(x).item() == 4.0

    def test_idempotent_after_broadcast(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        pooled = ops.global_avg_pool(x)
        again = ops.global_avg_pool(ops.broadcast_hw(pooled, 4, 4))
        assert np.allclose(pooled.data, again.data, atol=1e-15)


# -- gradient certification of every op ------------------------------------------------


def _param(store, name, shape, rng):
    p = store.zeros(name, shape)
    p.data[...] = rng.standard_normal(shape)
    return p


class TestGradients:
    def test_quadratic_scalar(self):
        store = ParamStore(0)
        theta = store.zeros("theta", (1, 1, 1, 1))
        theta.data[...] = 3.0
        err = grad_check(lambda: ops.mul(theta, theta), store, eps=1e-4)
        assert err <= 1e-9

    def test_conv2d_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (2, 3, 5, 5), rng)
        w = _param(store, "w", (4, 3, 3, 3), rng)
        b = _param(store, "b", (1, 4, 1, 1), rng)
        err = grad_check(lambda: ops.mean_all(ops.conv2d(x, w, b, stride=2, padding=1)), store)
        assert err <= 1e-6

    def test_conv2d_sum_wrt_weights(self, rng):
        store = ParamStore(0)
        w = _param(store, "w", (2, 2, 3, 3), rng)
        b = _param(store, "b", (1, 2, 1, 1), rng)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        err = grad_check(lambda: ops.sum_all(ops.conv2d(x, w, b, padding=1)), store)
        assert err <= 1e-6

    def test_upsample_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (1, 2, 3, 3), rng)
        err = grad_check(lambda: ops.mean_all(ops.mul(ops.bilinear_upsample(x, 2),
                                                      ops.bilinear_upsample(x, 2))), store)
        assert err <= 1e-6

    def test_concat_slice_grads(self, rng):
        store = ParamStore(0)
        a = _param(store, "a", (1, 2, 3, 3), rng)
        b = _param(store, "b", (1, 3, 3, 3), rng)

        def fn():
            y = ops.concat_channels([a, b])
            return ops.mean_all(ops.mul(ops.slice_channels(y, 1, 4), ops.slice_channels(y, 1, 4)))

        assert grad_check(fn, store) <= 1e-6

    def test_sigmoid_relu_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (1, 2, 4, 4), rng)
        err = grad_check(lambda: ops.mean_all(ops.mul(ops.sigmoid(x), ops.relu(x))), store)
        assert err <= 1e-4

    def test_softmax_groups_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (1, 6, 2, 2), rng)
        y = _param(store, "y", (1, 6, 2, 2), rng)
        err = grad_check(lambda: ops.mean_all(ops.mul(ops.softmax_over_groups(x, 3), y)), store)
        assert err <= 1e-5

    def test_group_norm_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (2, 8, 3, 3), rng)
        g = store.ones("gamma", (1, 8, 1, 1))
        g.data[...] = 1.0 + 0.1 * rng.standard_normal((1, 8, 1, 1))
        be = _param(store, "beta", (1, 8, 1, 1), rng)
        w = Tensor(rng.standard_normal((2, 8, 3, 3)))
        err = grad_check(lambda: ops.mean_all(ops.mul(ops.group_norm(x, g, be, 4), w)), store)
        assert err <= 1e-5

    def test_gap_broadcast_grads(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (1, 3, 4, 4), rng)

        def fn():
            g = ops.broadcast_hw(ops.global_avg_pool(x), 4, 4)
            return ops.mean_all(ops.mul(g, x))

        assert grad_check(fn, store) <= 1e-5

    def test_sampled_coordinates_deterministic(self, rng):
        store = ParamStore(0)
        x = _param(store, "x", (1, 4, 6, 6), rng)
        fn = lambda: ops.mean_all(ops.mul(x, x))
        e1 = grad_check(fn, store, samples_per_param=5)
        e2 = grad_check(fn, store, samples_per_param=5)
        assert e1 == e2
