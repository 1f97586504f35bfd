"""Tensor engine: forward oracles, backward rules, and gradient checks."""

import numpy as np
import pytest

from fusedet import tensor as T
from fusedet.tensor import ShapeError, Tape, Tensor, backward, grad_check


class TestForward:
    def test_add_identity(self):
        x = Tensor([[1.0, -2.0], [3.0, 4.0]])
        y = T.add(x, T.zeros((2, 2)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_add_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError) as e:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_relu_signs(self):
        y = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_affine_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        y = T.affine(x, Tensor(np.eye(4)), T.zeros(4))
        np.testing.assert_allclose(y.data, x.data, rtol=1e-6)

    def test_matmul_identity(self):
        a = Tensor(np.random.default_rng(1).standard_normal((3, 3)))
        y = T.matmul(a, Tensor(np.eye(3)))
        np.testing.assert_allclose(y.data, a.data, rtol=1e-6)

    def test_matmul_hand_case(self):
        y = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_allclose(y.data, [[3.0], [7.0]])

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_softmax_uniform(self):
        y = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3), rtol=1e-6)

    def test_softmax_limit(self):
        y = T.softmax_lastdim(Tensor([200.0, 0.0]))
        np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        y = T.softmax_lastdim(Tensor(rng.standard_normal((5, 7)) * 10))
        assert (y.data >= 0).all()
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(5), atol=1e-6)

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            T.softmax_lastdim(Tensor([np.nan, 1.0]))

    def test_layer_norm_constant_token(self):
        y = T.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)),
                         T.zeros(4))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-3)

    def test_layer_norm_standardizes(self, rng):
        x = Tensor(rng.standard_normal((6, 16)) * 4 + 2)
        y = T.layer_norm(x, Tensor(np.ones(16)), T.zeros(16))
        np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_shift_invariant(self, rng):
        x = rng.standard_normal((3, 8))
        gain, bias = Tensor(np.ones(8)), T.zeros(8)
        a = T.layer_norm(Tensor(x), gain, bias)
        b = T.layer_norm(Tensor(x + 7.5), gain, bias)
        np.testing.assert_allclose(a.data, b.data, atol=1e-4)

    def test_conv_1x1_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 5, 5)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        y = T.conv2d(x, w, None, 1, 0)
        np.testing.assert_allclose(y.data, x.data, rtol=1e-5)

    def test_conv_3x3_sum1_on_constant(self, rng):
        x = Tensor(np.full((1, 6, 6), 2.5))
        w = rng.standard_normal((1, 1, 3, 3))
        w /= w.sum()
        y = T.conv2d(x, Tensor(w), None, 1, 1)
        np.testing.assert_allclose(y.data[0, 1:-1, 1:-1], 2.5, rtol=1e-4)

    def test_conv_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_upsample_single_pixel(self):
        y = T.upsample_nearest_2x(Tensor([[[1.0]]]))
        np.testing.assert_array_equal(y.data, [[[1.0, 1.0], [1.0, 1.0]]])

    def test_upsample_constant(self):
        y = T.upsample_nearest_2x(Tensor(np.full((2, 3, 3), 4.0)))
        assert y.data.shape == (2, 6, 6)
        np.testing.assert_array_equal(y.data, 4.0)

    def test_upsample_sum_scales_by_4(self, rng):
        x = rng.standard_normal((2, 4, 5))
        y = T.upsample_nearest_2x(Tensor(x))
        np.testing.assert_allclose(y.data.sum(), 4 * x.sum(), rtol=1e-5)

    def test_pool_to_1x1_constant(self):
        y = T.adaptive_avg_pool(Tensor(np.full((2, 5, 5), 1.25)), 1, 1)
        np.testing.assert_allclose(y.data, 1.25, rtol=1e-6)

    def test_pool_to_1x1_hand_mean(self):
        y = T.adaptive_avg_pool(Tensor([[[1.0, 3.0], [5.0, 7.0]]]), 1, 1)
        np.testing.assert_allclose(y.data, [[[4.0]]])

    def test_pool_identity(self, rng):
        x = rng.standard_normal((3, 4, 6))
        y = T.adaptive_avg_pool(Tensor(x), 4, 6)
        np.testing.assert_allclose(y.data, x, rtol=1e-6)

    def test_pool_to_1x1_is_global_mean(self, rng):
        x = rng.standard_normal((3, 7, 9))
        y = T.adaptive_avg_pool(Tensor(x), 1, 1)
        np.testing.assert_allclose(y.data[:, 0, 0], x.mean(axis=(1, 2)),
                                   rtol=1e-5, atol=1e-6)


class TestBackward:
    def test_sum_grad_is_ones(self):
        with Tape():
            x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
            backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad_is_2x(self):
        with Tape():
            x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
            backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], rtol=1e-6)

    def test_matmul_grad_ones_bt(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)))
        with Tape():
            backward(T.sum_all(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-5)

    def test_nonscalar_loss_rejected(self):
        with Tape():
            x = Tensor(np.zeros(3), requires_grad=True)
            y = T.add(x, 1.0)
            with pytest.raises(ShapeError):
                backward(y)

    def test_backward_needs_tape(self):
        x = Tensor(np.zeros(()), requires_grad=True)
        with pytest.raises(RuntimeError):
            backward(x)

    def test_tape_consumed(self):
        with Tape():
            x = Tensor([1.0], requires_grad=True)
            backward(T.sum_all(x))
            with pytest.raises(RuntimeError):
                T.add(x, x)

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(RuntimeError):
                with Tape():
                    pass

    def test_inference_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert not y.requires_grad and y.grad is None

    def test_grad_accumulates_across_reuse(self):
        with Tape():
            x = Tensor([2.0], requires_grad=True)
            backward(T.sum_all(T.add(T.mul(x, 3.0), T.mul(x, 4.0))))
        np.testing.assert_allclose(x.grad, [7.0])


class TestGradCheck:
    # Every differentiable primitive, checked over ten seeds at 64-bit.
    # Shapes are small; grad_check perturbs every coordinate.
    CASES = [
        ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
        ("add_bcast", lambda a, b: T.add(a, b), [(2, 3, 4), (4,)]),
        ("sub", lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
        ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)), [(3, 4), (3, 4)]),
        ("relu", lambda a: T.relu(a), [(4, 5)]),
        ("exp", lambda a: T.exp(a), [(3, 3)]),
        ("log", lambda a: T.log(T.add(T.mul(a, a), 1.0)), [(3, 3)]),
        ("sqrt", lambda a: T.sqrt(T.add(T.mul(a, a), 1.0)), [(3, 3)]),
        ("pow", lambda a: T.pow_const(T.add(T.mul(a, a), 1.0), 1.5), [(3, 3)]),
        ("abs", lambda a: T.absolute(a), [(3, 4)]),
        ("sigmoid", lambda a: T.sigmoid(a), [(3, 4)]),
        ("logsigmoid", lambda a: T.logsigmoid(a), [(3, 4)]),
        ("maximum", lambda a, b: T.maximum(a, b), [(3, 4), (3, 4)]),
        ("minimum", lambda a, b: T.minimum(a, b), [(3, 4), (3, 4)]),
        ("sum_axis", lambda a: T.sum_axis(a, 1), [(3, 4, 2)]),
        ("mean_all", lambda a: T.mean_all(a), [(3, 4)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
        ("permute", lambda a: T.permute(a, (2, 0, 1)), [(2, 3, 4)]),
        ("swap_last2", lambda a: T.swap_last2(a), [(2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        ("narrow", lambda a: T.narrow(a, 1, 1, 2), [(3, 4)]),
        ("take_rows", lambda a: T.take_rows(a, np.array([0, 2, 2])), [(4, 3)]),
        ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
        ("affine", lambda x, w, b: T.affine(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
        ("softmax", lambda a: T.softmax_lastdim(a), [(3, 5)]),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 8), (8,), (8,)]),
        ("conv3x3", lambda x, w, b: T.conv2d(x, w, b, 1, 1),
         [(2, 4, 4), (3, 2, 3, 3), (3,)]),
        ("conv3x3_s2", lambda x, w: T.conv2d(x, w, None, 2, 1),
         [(1, 2, 5, 5), (3, 2, 3, 3)]),
        ("conv1x1", lambda x, w: T.conv2d(x, w, None, 1, 0),
         [(2, 2, 4, 4), (3, 2, 1, 1)]),
        ("depthwise5x5", lambda x, k: T.depthwise_conv2d(x, k, 2),
         [(2, 2, 5, 5), (2, 2, 5, 5)]),
        ("upsample2x", lambda x: T.upsample_nearest_2x(x), [(2, 3, 3)]),
        ("adaptive_pool", lambda x: T.adaptive_avg_pool(x, 2, 3), [(2, 5, 7)]),
        ("adaptive_pool_expand", lambda x: T.adaptive_avg_pool(x, 5, 5),
         [(1, 2, 2, 2)]),
    ]

    @pytest.mark.parametrize("name,fn,shapes", CASES,
                             ids=[c[0] for c in CASES])
    def test_primitive_gradients(self, fp64, name, fn, shapes):
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            ins = [Tensor(rng.standard_normal(s)) for s in shapes]
            worst = max(worst, grad_check(fn, ins, eps=1e-5, seed=seed))
        assert worst < 1e-4, f"{name}: rel err {worst:.3e}"

    def test_linear_map_near_machine_precision(self, fp64, rng):
        a = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((4, 2)))
        assert grad_check(lambda x, y: T.matmul(x, y), [a, b]) < 1e-7

    def test_softmax_tight(self, fp64, rng):
        x = Tensor(rng.standard_normal(4))
        assert grad_check(lambda t: T.softmax_lastdim(t), [x]) < 1e-6

    def test_layer_norm_tight(self, fp64):
        # fixed well-conditioned token: no gradient coordinate is near zero,
        # so the relative-error bound measures the backward rule, not the
        # luck of a tiny denominator
        x = Tensor(np.linspace(-1.5, 1.5, 8))
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        assert grad_check(lambda *a: T.layer_norm(*a), [x, g, b]) < 1e-5

    def test_grad_check_requires_fp64(self):
        with pytest.raises(RuntimeError):
            grad_check(lambda a: a, [Tensor([1.0])])


def test_same_seed_same_bits():
    def build():
        rng = np.random.default_rng(42)
        return Tensor(rng.standard_normal((4, 4))).data

    a, b = build(), build()
    assert a.tobytes() == b.tobytes()
