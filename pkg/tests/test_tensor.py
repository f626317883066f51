import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafnet.errors import (
    DetachedTape,
    InvalidAxis,
    NonFinite,
    NotScalar,
    ShapeMismatch,
)
from leafnet.tensor import (
    Tape,
    Tensor,
    backward,
    broadcast_shape,
    elementwise,
    grad_check,
    matmul,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestElementwise:
    def test_add(self):
        out = elementwise("add", t64([1.0, 2.0]), t64([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_scale_by_zero(self):
        out = elementwise("scale", t64([1.0, 2.0]), 0)
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_mul_backward_product_rule(self):
        # d(a*b) = (b, a) under an all-ones upstream gradient
        a = t64([2.0, 3.0], requires_grad=True)
        b = t64([4.0, 5.0], requires_grad=True)
        with Tape():
            out = reduce_sum(a * b)
            backward(out)
        np.testing.assert_array_equal(out.data, 8.0 + 15.0)
        np.testing.assert_array_equal(a.grad, [4.0, 5.0])
        np.testing.assert_array_equal(b.grad, [2.0, 3.0])

    def test_mul_matches_finite_differences(self, rng):
        b = t64(rng.standard_normal(6))
        err, _ = grad_check(lambda t: reduce_sum(t * b), t64(rng.standard_normal(6)))
        assert err <= 1e-6

    def test_sub_scalar(self):
        out = t64([5.0, 7.0]) - 2.0
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_max_with_scalar(self):
        out = elementwise("max_with_scalar", t64([-1.0, 2.0]), 0.0)
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeMismatch):
            t64([1.0, 2.0]) + t64([1.0, 2.0, 3.0])

    def test_trailing_broadcast(self):
        out = t64([[1.0, 2.0], [3.0, 4.0]]) + t64([10.0, 20.0])
        np.testing.assert_array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])

    def test_broadcast_backward_sums_over_expanded_dims(self):
        b = t64([10.0, 20.0], requires_grad=True)
        a = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        with Tape():
            backward(reduce_sum(a + b))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0])
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))


class TestBroadcastShapes:
    @given(
        st.lists(st.integers(1, 4), min_size=0, max_size=4),
        st.lists(st.integers(1, 4), min_size=0, max_size=4),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_numpy_oracle(self, sa, sb):
        sa, sb = tuple(sa), tuple(sb)
        try:
            expected = np.broadcast_shapes(sa, sb)
            ok = True
        except ValueError:
            ok = False
        if ok:
            assert broadcast_shape(sa, sb) == expected
        else:
            with pytest.raises(ShapeMismatch):
                broadcast_shape(sa, sb)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(t64(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_selector_row(self):
        out = matmul(t64([[1.0, 0.0]]), t64([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_against_naive_triple_loop(self, rng, each_backend):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = matmul(t64(a), t64(b))
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_backward_matches_finite_differences(self, rng):
        b = t64(rng.standard_normal((4, 3)))
        err, _ = grad_check(
            lambda t: reduce_sum(matmul(t, b)), t64(rng.standard_normal((2, 4)))
        )
        assert err <= 1e-6


class TestReduce:
    def test_mean_all(self):
        out = reduce("mean", t64([[1.0, 2.0], [3.0, 4.0]]))
        assert out.item() == 2.5

    def test_sum_empty_tensor_raises(self):
        with pytest.raises(InvalidAxis):
            reduce_sum(Tensor(np.zeros(0)), axes=0)

    def test_max_axis(self):
        out = reduce_max(t64([[1.0, 5.0], [3.0, 2.0]]), axes=1)
        np.testing.assert_array_equal(out.data, [5.0, 3.0])

    def test_bad_axis(self):
        with pytest.raises(InvalidAxis):
            reduce_sum(t64([1.0, 2.0]), axes=3)

    def test_max_backward_first_argmax(self):
        x = t64([[2.0, 2.0, 1.0]], requires_grad=True)
        with Tape():
            backward(reduce_sum(reduce_max(x, axes=1)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_mean_backward(self, rng):
        err, _ = grad_check(
            lambda t: reduce_mean(t, axes=None), t64(rng.standard_normal((3, 4)))
        )
        assert err <= 1e-6

    def test_multi_axis_sum_matches_numpy(self, rng, each_backend):
        x = rng.standard_normal((2, 3, 4))
        out = reduce_sum(t64(x), axes=(0, 2))
        np.testing.assert_allclose(out.data, x.sum(axis=(0, 2)), rtol=1e-12)


class TestBackward:
    def test_linear(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            backward(reduce_sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with Tape():
            backward(reduce_sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulation_across_reuse(self):
        # f(x) = sum(x) + sum(x) -> grad = 2s of ones
        x = t64(np.ones(5), requires_grad=True)
        with Tape():
            backward(reduce_sum(x) + reduce_sum(x))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(5))

    def test_not_scalar(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * 2.0
            with pytest.raises(NotScalar):
                backward(y)

    def test_detached(self):
        x = t64([1.0], requires_grad=True)
        y = reduce_sum(x)  # no active tape
        with pytest.raises(DetachedTape):
            backward(y)

    def test_composite_graph_matches_finite_differences(self, rng):
        w = t64(rng.standard_normal((4, 4)))

        def f(t):
            h = matmul(t, w)
            h = h * h + t64(np.ones(4)) * 0.5
            return reduce_mean(h)

        for _ in range(5):
            err, _ = grad_check(f, t64(rng.standard_normal((3, 4))))
            assert err <= 1e-6


class TestGradCheck:
    def test_exact_linear(self, rng):
        err, _ = grad_check(lambda t: reduce_sum(t), t64(rng.standard_normal(7)))
        assert err <= 1e-10

    def test_leaky_relu_sum_away_from_zero(self, rng):
        from leafnet.layers import leaky_relu

        x = rng.standard_normal(20)
        x = np.where(np.abs(x) < 0.1, 0.5, x)  # keep away from the kink
        err, _ = grad_check(lambda t: reduce_sum(leaky_relu(t, 0.01)), t64(x))
        assert err <= 1e-8

    def test_kink_flagged_as_excluded(self):
        from leafnet.layers import leaky_relu

        x = t64([1.0, 0.0, -2.0])
        err, excluded = grad_check(
            lambda t: reduce_sum(leaky_relu(t, 0.01)), x, kink_radius=1e-9
        )
        assert excluded == [1]
        assert err <= 1e-8

    def test_nonfinite_flagged(self):
        def f(t):
            return reduce_sum(t * float("nan"))

        with pytest.raises(NonFinite):
            grad_check(f, t64([1.0]))


class TestDeterminism:
    def test_same_inputs_bit_identical(self, rng, each_backend):
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        r1 = matmul(t64(a), t64(b)).data
        r2 = matmul(t64(a.copy()), t64(b.copy())).data
        assert np.array_equal(r1, r2)
        s1 = reduce_sum(t64(a), axes=1).data
        s2 = reduce_sum(t64(a.copy()), axes=1).data
        assert np.array_equal(s1, s2)

    def test_fixed_reduction_order_matches_python_chain(self):
        # the numba path promises strictly sequential accumulation
        from leafnet import backend

        if backend.active_backend() != "numba":
            pytest.skip("sequential-order contract applies to the numba path")
        vals = np.array([[0.1, 0.2, 0.3, 0.7, 1e-9, -0.3]])
        s = np.float64(0.0)
        for v in vals[0]:
            s = s + v
        assert reduce_sum(t64(vals), axes=1).data[0] == s


class TestInvariants:
    def test_grad_shape_and_dtype_match(self, rng):
        x = t64(rng.standard_normal((3, 2)), requires_grad=True)
        with Tape():
            backward(reduce_sum(x * x))
        assert x.grad.shape == x.data.shape
        assert x.grad.dtype == x.data.dtype

    def test_grad_check_random_ops_batch(self, rng):
        # drive the full op set through finite differences at random points
        const = t64(rng.standard_normal((4, 5)))
        ops = [
            lambda t: reduce_sum(t + const),
            lambda t: reduce_sum(t * const),
            lambda t: reduce_sum(t * 3.5),
            lambda t: reduce_sum(reduce_mean(t, axes=0)),
            lambda t: reduce_sum(reduce_max(t, axes=1)),
        ]
        for i in range(20):
            x = rng.standard_normal((4, 5))
            # keep max comparisons unambiguous
            x += np.arange(20).reshape(4, 5) * 1e-3
            f = ops[i % len(ops)]
            err, _ = grad_check(f, t64(x))
            assert err <= 1e-6
