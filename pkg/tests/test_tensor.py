import math

import numpy as np
import pytest

from capsdense import tensor as T
from capsdense.errors import ContractError, DimensionError
from capsdense.gradcheck import OP_TOL, finite_diff_check, relative_error, run_op_suite
from capsdense.tensor import GradTape, Tensor, conv2d, precision


def conv_loops(x, k, b, stride, padding):
    """Direct cross-correlation with explicit zero padding, one output at a time."""
    n, c, h, w = x.shape
    kn, kc, kh, kw = k.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        top, left = ph // 2, pw // 2
    else:
        ph = pw = top = left = 0
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    padded = np.zeros((n, c, h + ph, w + pw))
    padded[:, :, top:top + h, left:left + w] = x
    out = np.zeros((n, kn, oh, ow))
    for i in range(n):
        for o in range(kn):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += padded[i, ch, r * stride + u, s * stride + v] * k[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


class TestConv2d:
    def test_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_identity_kernel_same(self, rng):
        x = rng.standard_normal((2, 1, 5, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        out = conv2d(x, k, np.zeros(1), padding="same")
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_stated_random_case(self, rng):
        x, k, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        with precision(np.float64):
            out = conv2d(x, k, b, stride=2)
        np.testing.assert_allclose(out.data, conv_loops(x, k, b, 2, "valid"), atol=1e-5)

    def test_fifty_random_cases(self):
        rng = np.random.default_rng(50)
        for _ in range(50):
            padding = ["valid", "same"][rng.integers(2)]
            stride = int(rng.integers(1, 4))
            kh, kw = (int(v) for v in rng.integers(1, 5, size=2))
            h = int(rng.integers(kh, 10))
            w = int(rng.integers(kw, 10))
            n, c, kn = (int(v) for v in rng.integers(1, 4, size=3))
            x = rng.standard_normal((n, c, h, w))
            k = rng.standard_normal((kn, c, kh, kw))
            b = rng.standard_normal(kn)
            with precision(np.float64):
                out = conv2d(x, k, b, stride=stride, padding=padding)
            ref = conv_loops(x, k, b, stride, padding)
            assert out.shape == ref.shape
            np.testing.assert_allclose(out.data, ref, atol=1e-5)

    @pytest.mark.parametrize("h,s", [(28, 1), (28, 2), (7, 2), (32, 3), (5, 4)])
    def test_same_output_size(self, h, s):
        out = conv2d(np.zeros((1, 1, h, h)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=s, padding="same")
        assert out.shape[2:] == (math.ceil(h / s),) * 2

    def test_same_padding_extra_on_bottom_right(self):
        # a 2x2 kernel at stride 1 pads one pixel, which must land after the image
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.zeros((1, 1, 2, 2))
        k[0, 0, 0, 0] = 1
        out = conv2d(x, k, np.zeros(1), padding="same")
        np.testing.assert_allclose(out.data, x)
        assert T.same_padding(3, 2, 1) == (0, 1)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="axis 1"):
            conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_bad_stride_and_padding(self):
        with pytest.raises(ContractError):
            conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=0)
        with pytest.raises(ContractError):
            conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1), padding="full")


class TestConcat:
    def test_single_input_identity(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        np.testing.assert_array_equal(T.concat_channels([a]).data, a.astype(np.float32))

    def test_order(self, rng):
        a, b = rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2))
        out = T.concat_channels([a, b]).data
        np.testing.assert_array_equal(out[:, 0], a[:, 0].astype(np.float32))
        np.testing.assert_array_equal(out[:, 1], b[:, 0].astype(np.float32))

    def test_gradient_of_sum_is_ones(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        T.concat_channels([a, b]).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones(a.shape))
        assert finite_diff_check(lambda: T.concat_channels([a, b]).sum(), [a, b]) < 1e-6

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2))])


class TestElementwise:
    def test_softmax_zero_vector_is_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(7)).data, np.full(7, 1 / 7), atol=1e-7)

    def test_softmax_rows(self, rng):
        out = T.softmax(rng.standard_normal((20, 9)) * 3, axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out > 0).all() and (out < 1).all()

    def test_softmax_large_inputs_finite(self):
        out = T.softmax(np.array([1e4, 0.0, -1e4])).data
        assert np.isfinite(out).all()

    def test_l2_norm(self):
        assert T.l2_norm(np.array([3.0, 4.0])).data == pytest.approx(5.0, abs=1e-6)

    def test_l2_norm_zero_has_finite_gradient(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        T.l2_norm(x).backward()
        assert np.isfinite(x.grad).all()

    @pytest.mark.parametrize("op", [T.softmax, T.l2_norm])
    def test_axis_out_of_range(self, op):
        with pytest.raises(DimensionError):
            op(np.zeros((2, 3)), axis=2)

    def test_sum_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.tsum(np.zeros((2, 3)), axis=-3)

    def test_mse(self):
        assert T.mse(np.array([1.0, 3.0]), np.array([0.0, 1.0])).data == pytest.approx(2.5)

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_scalar_results_are_zero_dimensional(self):
        assert Tensor(np.ones((2, 3))).sum().shape == ()


class TestBackward:
    def test_identity(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        x.backward()
        assert x.grad == 1.0

    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        (x * x).backward()
        assert float(x.grad) == 6.0

    def test_accumulates_over_uses(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x + x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()

    def test_random_chain_matches_differences(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            return T.l2_norm(T.sigmoid(x @ w), axis=1).sum()

        assert finite_diff_check(f, [x, w]) < 1e-3

    def test_linearity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4))
        a, b = 1.7, -0.4

        def f():
            return (T.sigmoid(x) * Tensor(w)).sum()

        def g():
            return (x * x).sum()

        with precision(np.float64):
            x.data = x.data.astype(np.float64)
            f().backward()
            gf, x.grad = x.grad, None
            g().backward()
            gg, x.grad = x.grad, None
            (f() * a + g() * b).backward()
        np.testing.assert_allclose(x.grad, a * gf + b * gg, atol=1e-6)

    def test_tape_is_topological_and_visits_once(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = x * 2.0
        z = (y + x) * (y + 1.0)
        root = z.sum()
        tape = GradTape.from_root(root)
        ids = [id(t) for t in tape.nodes]
        assert len(ids) == len(set(ids))
        position = {i: n for n, i in enumerate(ids)}
        for t in tape.nodes:
            if t._node is not None:
                for parent in t._node.inputs:
                    if id(parent) in position:
                        assert position[id(parent)] < position[id(t)]

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(3000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = (x * 3.0).sum()
        assert y._node is None and not y.requires_grad


class TestGradcheck:
    def test_linear_function(self, rng):
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        assert finite_diff_check(lambda: p.sum(), [p]) < 1e-6

    def test_relative_error_formula(self):
        assert relative_error(np.array([1.0]), np.array([3.0]))[0] == pytest.approx(0.5)
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0

    def test_rejects_non_finite(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: T.scale(p + 1.0, float("inf")).sum(), [p])

    def test_rejects_bad_h(self):
        p = Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: p.sum(), [p], h=0.0)

    def test_restores_parameters(self, rng):
        data = rng.standard_normal(4).astype(np.float32)
        p = Tensor(data.copy(), requires_grad=True)
        finite_diff_check(lambda: (p * p).sum(), [p])
        np.testing.assert_array_equal(p.data, data)
        assert p.data.dtype == np.float32

    def test_every_op_passes(self):
        errors = run_op_suite(seed=3)
        assert {"add", "mul", "scale", "relu", "reshape", "softmax", "l2norm", "sum", "mse", "matmul",
                "conv2d", "concat"} <= set(errors)
        bad = {k: v for k, v in errors.items() if not v < OP_TOL}
        assert not bad
