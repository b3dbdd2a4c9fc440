import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sonanet.errors import ContractError, NumericError, ShapeError
from sonanet.nn import leaky_relu, softmax_rows
from sonanet.tensor import (
    Tensor,
    add,
    concat,
    grad_check,
    log,
    matmul,
    mul,
    no_grad,
    reshape,
    take,
    transpose,
    tsum,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        assert np.array_equal(matmul(eye, eye).data, np.eye(2))

    def test_zero_annihilates(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_gradients_reach_both_operands(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        tsum(matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)), atol=1e-14)


class TestBackward:
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
    def test_grad_of_sum_is_ones(self, x):
        t = Tensor(x, requires_grad=True)
        tsum(t).backward()
        assert np.array_equal(t.grad, np.ones_like(x))

    @given(arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_grad_of_half_square_is_x(self, x):
        t = Tensor(x, requires_grad=True)
        mul(tsum(t * t), 0.5).backward()
        np.testing.assert_allclose(t.grad, x, rtol=0, atol=1e-15)

    def test_composite_softmax_of_gram(self, rng):
        x = Tensor(rng.normal(size=(3, 2)))
        err = grad_check(lambda t: tsum(softmax_rows(matmul(t, t.T))), x, eps=1e-5)
        assert err < 1e-6

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_disconnected_loss_is_rejected(self):
        with pytest.raises(ContractError):
            tsum(Tensor(np.ones(3))).backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        tsum(y + y * x).backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(2 * 2 + 3 * 4, abs=1e-12)

    def test_leaf_gradients_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tsum(x).backward()
        tsum(x * 3.0).backward()
        assert np.array_equal(x.grad, [4.0, 4.0])

    def test_tape_is_discarded(self):
        x = Tensor([1.0], requires_grad=True)
        y = tsum(x * 2.0)
        y.backward()
        assert y._parents == ()

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        tsum(y).backward()
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    @given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 10_000))
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        x0 = r.normal(size=(2, 3))

        def grad_of(fn):
            t = Tensor(x0, requires_grad=True)
            fn(t).backward()
            return t.grad

        f = lambda t: tsum(mul(t, t))  # noqa: E731
        g = lambda t: tsum(softmax_rows(t))  # noqa: E731
        combined = grad_of(lambda t: add(mul(f(t), a), mul(g(t), b)))
        np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-10, rtol=0)


class TestShapesAndOps:
    def test_elementwise_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_finite_predicate(self):
        assert Tensor([1.0, 2.0]).finite()
        assert not Tensor([1.0, np.nan]).finite()
        t = Tensor([1.0])
        t.grad = np.array([np.inf])
        assert not t.finite()

    def test_reshape_transpose_roundtrip_grad(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        assert grad_check(lambda t: tsum(reshape(transpose(t, (2, 0, 1)), (4, 6)) * Tensor(np.arange(24.0).reshape(4, 6))), x) < 1e-8

    def test_concat_and_take_grad(self, rng):
        x = Tensor(rng.normal(size=(3, 2)))
        idx = (np.array([0, 2, 2]), np.array([1, 0, 0]))
        assert grad_check(lambda t: tsum(take(concat([t, t * 2.0], 0), idx)), x) < 1e-8

    def test_log_grad(self, rng):
        x = Tensor(rng.uniform(0.5, 2, size=5))
        assert grad_check(lambda t: tsum(log(t)), x) < 1e-8

    def test_determinism(self, rng):
        x = rng.normal(size=(4, 4))
        a = softmax_rows(matmul(Tensor(x), Tensor(x))).data
        b = softmax_rows(matmul(Tensor(x), Tensor(x))).data
        assert np.array_equal(a, b)


class TestGradCheck:
    @given(finite)
    def test_sum_of_one_element_is_exact(self, v):
        # the checker divides by the step actually taken, so a linear
        # function of one coordinate has no truncation or step error
        assert grad_check(lambda t: tsum(t), Tensor([v])) < 1e-12

    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3)), elements=finite))
    def test_sum_error_is_within_roundoff(self, x):
        # what remains is rounding of the perturbed sum itself
        eps = 1e-5
        bound = x.size * np.spacing(np.abs(x).sum() + 2 * eps) / eps
        assert grad_check(lambda t: tsum(t), Tensor(x), eps=eps) <= bound
        assert bound < 1e-8

    def test_leaky_relu_away_from_kink(self, rng):
        x = rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3))
        assert grad_check(lambda t: tsum(leaky_relu(t, 0.01)), Tensor(x)) < 1e-7

    def test_detects_a_wrong_gradient(self):
        from sonanet.tensor import make_op

        def bad_square(t):
            return tsum(make_op(t.data**2, (t,), lambda g: (g * t.data,), "bad"))

        assert grad_check(bad_square, Tensor([1.0, 2.0, 3.0])) > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_reports_index(self):
        def f(t):
            return tsum(log(t))

        with pytest.raises(NumericError) as err:
            grad_check(f, Tensor([1.0, 1e-7]), eps=1e-5)
        assert "(1,)" in str(err.value)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: tsum(t), Tensor([1.0]), eps=0.0)

    def test_index_subset(self, rng):
        x = Tensor(rng.normal(size=10))
        assert grad_check(lambda t: tsum(t * t), x, indices=[0, 3]) < 1e-8
