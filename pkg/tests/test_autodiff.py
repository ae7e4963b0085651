import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cograd import autodiff as ad
from cograd.errors import (
    ContractError,
    DimensionError,
    NumericError,
    TokenIndexError,
)


def leafs(tape, *arrays):
    return [tape.leaf(np.asarray(a, dtype=np.float64)) for a in arrays]


class TestPrimitives:
    def test_matmul_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(m))
        assert np.array_equal(out.values, m)

    def test_matmul_small(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.values[0, 0] == 11.0

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_matmul_gradient_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(7))
        a = ad.Tensor(rng.normal(size=(3, 4)))
        b = ad.Tensor(rng.normal(size=(4, 2)))

        def f(params):
            return ad.sum_(ad.matmul(params[0], params[1]))

        assert ad.check_gradient(f, [a, b], eps=1e-6) <= 1e-6

    def test_softmax_uniform(self):
        out = ad.softmax_rows(ad.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.values, [1 / 3] * 3, atol=1e-15)

    def test_softmax_ln2(self):
        c = 4.2
        out = ad.softmax_rows(ad.Tensor([c, c + np.log(2.0)]))
        assert np.allclose(out.values, [1 / 3, 2 / 3], atol=1e-12)

    def test_softmax_no_overflow(self):
        out = ad.softmax_rows(ad.Tensor([1000.0, 1000.0]))
        assert np.allclose(out.values, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.Generator(np.random.PCG64(3))
        out = ad.softmax_rows(ad.Tensor(rng.normal(size=(5, 7)) * 10))
        assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.values >= 0)

    def test_softmax_nonfinite_input(self):
        with pytest.raises(NumericError):
            ad.softmax_rows(ad.Tensor(np.array([np.nan, 1.0])))

    def test_gather_first_row(self):
        table = np.arange(12.0).reshape(4, 3)
        out = ad.gather_rows(ad.Tensor(table), [0])
        assert np.array_equal(out.values, table[[0]])

    def test_gather_repeated_ids_accumulate(self):
        tape = ad.Tape()
        (table,) = leafs(tape, np.ones((4, 3)))
        out = ad.sum_(ad.gather_rows(table, [2, 2]))
        g = ad.backward(out, [table]).grad(table).values
        expected = np.zeros((4, 3))
        expected[2] = 2.0
        assert np.array_equal(g, expected)

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather_rows(ad.Tensor(np.ones((2, 2))), [2])
        with pytest.raises(TokenIndexError):
            ad.gather_rows(ad.Tensor(np.ones((2, 2))), [-1])

    def test_gather_gradient_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(11))
        table = ad.Tensor(rng.normal(size=(6, 3)))
        ids = [int(i) for i in rng.integers(0, 6, size=5)]

        def f(params):
            picked = ad.gather_rows(params[0], ids)
            return ad.sum_(ad.multiply(picked, picked))

        assert ad.check_gradient(f, [table], eps=1e-6) <= 1e-6

    def test_log_of_zero_raises(self):
        with pytest.raises(NumericError):
            ad.log(ad.Tensor([0.0, 1.0]))

    def test_division_by_zero_raises(self):
        with pytest.raises(NumericError):
            ad.divide(ad.Tensor(1.0), ad.Tensor(0.0))

    def test_concat_axes(self):
        a, b = np.ones((2, 3)), np.zeros((2, 2))
        out = ad.concat([ad.Tensor(a), ad.Tensor(b)], axis=1)
        assert out.shape == (2, 5)
        out0 = ad.concat([ad.Tensor(a), ad.Tensor(np.ones((1, 3)))], axis=0)
        assert out0.shape == (3, 3)

    @pytest.mark.parametrize("op,tol", [
        ("relu", 1e-6), ("tanh", 1e-6), ("exp", 1e-6), ("softmax", 1e-6),
        ("mean", 1e-6), ("concat", 1e-6), ("transpose", 1e-6),
    ])
    def test_primitive_gradients(self, op, tol):
        rng = np.random.Generator(np.random.PCG64(hash(op) % 2**31))
        x = ad.Tensor(rng.normal(size=(4, 3)) + 0.05)

        def f(params):
            t = params[0]
            if op == "relu":
                y = ad.relu(t)
            elif op == "tanh":
                y = ad.tanh(t)
            elif op == "exp":
                y = ad.exp(ad.scale(t, 0.3))
            elif op == "softmax":
                y = ad.softmax_rows(t)
            elif op == "mean":
                y = ad.mean(t, axis=1)
            elif op == "concat":
                y = ad.concat([t, ad.multiply(t, t)], axis=1)
            else:
                y = ad.transpose(t)
            return ad.sum_(ad.multiply(y, y))

        assert ad.check_gradient(f, [x], eps=1e-6) <= tol

    def test_log_gradient(self):
        x = ad.Tensor(np.array([0.5, 1.5, 3.0]))

        def f(params):
            return ad.sum_(ad.log(params[0]))

        assert ad.check_gradient(f, [x], eps=1e-7) <= 1e-6


class TestBackward:
    def test_square(self):
        tape = ad.Tape()
        (x,) = leafs(tape, 3.0)
        g = ad.backward(ad.multiply(x, x), [x])
        assert g.grad(x).values == 6.0

    def test_matmul_sum_analytic(self):
        rng = np.random.Generator(np.random.PCG64(5))
        av, bv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        tape = ad.Tape()
        a, b = leafs(tape, av, bv)
        g = ad.backward(ad.sum_(ad.matmul(a, b)), [a, b])
        ones = np.ones((3, 2))
        assert np.allclose(g.grad(a).values, ones @ bv.T, atol=1e-12)
        assert np.allclose(g.grad(b).values, av.T @ ones, atol=1e-12)

    def test_double_backward_grad_norm(self):
        # g = ||grad f||^2 for f = sum(x^3); dg/dx = 2 * (3x^2) * 6x = 36x^3
        def g_of(params):
            (x,) = ad.attach_all(params)
            f = ad.sum_(ad.multiply(ad.multiply(x, x), x))
            gm = ad.backward(f, [x], higher_order=True)
            return ad.dot(gm.grad(x), gm.grad(x))

        x0 = ad.Tensor(np.array([1.0, 2.0, -0.7]))
        assert ad.check_gradient(g_of, [x0], eps=1e-5) <= 1e-5

        tape = ad.Tape()
        (x,) = leafs(tape, [1.0, 2.0, -0.7])
        f = ad.sum_(ad.multiply(ad.multiply(x, x), x))
        gm = ad.backward(f, [x], higher_order=True)
        gg = ad.backward(ad.dot(gm.grad(x), gm.grad(x)), [x])
        assert np.allclose(gg.grad(x).values,
                           36 * np.array([1.0, 2.0, -0.7]) ** 3, atol=1e-10)

    def test_non_scalar_output_rejected(self):
        tape = ad.Tape()
        (x,) = leafs(tape, [1.0, 2.0])
        with pytest.raises(ContractError):
            ad.backward(ad.multiply(x, x), [x])

    def test_disconnected_param_gets_zeros(self):
        tape = ad.Tape()
        x, y = leafs(tape, [1.0, 2.0], [[3.0, 1.0]])
        g = ad.backward(ad.sum_(ad.multiply(x, x)), [x, y])
        assert np.array_equal(g.grad(y).values, np.zeros((1, 2)))

    def test_linearity(self):
        rng = np.random.Generator(np.random.PCG64(9))
        xv = rng.normal(size=5)
        a_coef, b_coef = 2.5, -1.25

        def grads_of(fn):
            tape = ad.Tape()
            (x,) = leafs(tape, xv)
            return ad.backward(fn(x), [x]).grad(x).values

        f_grad = grads_of(lambda x: ad.sum_(ad.multiply(x, x)))
        g_grad = grads_of(lambda x: ad.sum_(ad.exp(x)))
        combo = grads_of(lambda x: ad.add(
            ad.scale(ad.sum_(ad.multiply(x, x)), a_coef),
            ad.scale(ad.sum_(ad.exp(x)), b_coef)))
        assert np.allclose(combo, a_coef * f_grad + b_coef * g_grad, atol=1e-12)

    def test_hessian_vector_product_vs_finite_differences(self):
        # With higher_order on, d/dx dot(grad f, v) is the HVP; compare
        # against finite differences of grad f along v.
        rng = np.random.Generator(np.random.PCG64(21))
        xv = rng.normal(size=4)
        v = rng.normal(size=4)

        def grad_at(x_values):
            tape = ad.Tape()
            (x,) = leafs(tape, x_values)
            f = ad.sum_(ad.exp(ad.scale(ad.multiply(x, x), 0.5)))
            return ad.backward(f, [x]).grad(x).values

        tape = ad.Tape()
        (x,) = leafs(tape, xv)
        f = ad.sum_(ad.exp(ad.scale(ad.multiply(x, x), 0.5)))
        gm = ad.backward(f, [x], higher_order=True)
        hvp = ad.backward(ad.dot(gm.grad(x), ad.Tensor(v)), [x]).grad(x).values

        eps = 1e-6
        fd = (grad_at(xv + eps * v) - grad_at(xv - eps * v)) / (2 * eps)
        assert np.allclose(hvp, fd, rtol=1e-5, atol=1e-8)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.Generator(np.random.PCG64(33))
            tape = ad.Tape()
            x, w = leafs(tape, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
            y = ad.sum_(ad.softmax_rows(ad.matmul(ad.relu(x), w)))
            g = ad.backward(y, [x, w])
            return y.values.copy(), g.grad(x).values.copy(), g.grad(w).values.copy()

        r1, r2 = run(), run()
        for a, b in zip(r1, r2):
            assert np.array_equal(a, b)

    def test_constant_output_gives_zero_grads(self):
        tape = ad.Tape()
        (x,) = leafs(tape, [1.0, 2.0])
        const = ad.Tensor(5.0)
        g = ad.backward(const, [x])
        assert np.array_equal(g.grad(x).values, np.zeros(2))

    def test_mixing_tapes_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        x = t1.leaf(np.ones(2))
        y = t2.leaf(np.ones(2))
        with pytest.raises(ContractError):
            ad.add(x, y)


class TestFlattenGrads:
    def test_lengths(self):
        tape = ad.Tape()
        a, b = leafs(tape, np.ones(2), np.ones(3))
        out = ad.sum_(ad.add(ad.sum_(a), ad.sum_(b)))
        g = ad.backward(out, [a, b])
        flat = ad.flatten_grads(g, [a, b])
        assert flat.shape == (5,)

    def test_zero_grads_flatten_to_zeros(self):
        tape = ad.Tape()
        a, b = leafs(tape, np.ones(2), np.ones((2, 2)))
        g = ad.backward(ad.sum_(ad.multiply(a, a)), [b])
        flat = ad.flatten_grads(g, [b])
        assert np.array_equal(flat.values, np.zeros(4))

    def test_inner_product_preserved(self):
        rng = np.random.Generator(np.random.PCG64(2))
        tape = ad.Tape()
        a, b = leafs(tape, rng.normal(size=(2, 3)), rng.normal(size=4))
        out = ad.add(ad.sum_(ad.multiply(a, a)), ad.sum_(ad.exp(b)))
        g = ad.backward(out, [a, b])
        flat = ad.flatten_grads(g, [a, b])
        direct = sum(float(np.sum(g.grad(p).values ** 2)) for p in (a, b))
        assert np.isclose(float(ad.dot(flat, flat).values), direct, atol=1e-12)


class TestCheckGradient:
    def test_linear_is_exact(self):
        x = ad.Tensor(np.array([0.3, -0.7, 2.0]))
        err = ad.check_gradient(lambda p: ad.sum_(p[0]), [x], eps=1e-5)
        assert err <= 1e-10

    def test_quadratic(self):
        x = ad.Tensor(np.array([1.0, 2.0]))
        err = ad.check_gradient(lambda p: ad.sum_(ad.multiply(p[0], p[0])),
                                [x], eps=1e-5)
        assert err <= 1e-7

    def test_bad_eps_rejected(self):
        with pytest.raises(ContractError):
            ad.check_gradient(lambda p: ad.sum_(p[0]), [ad.Tensor([1.0])], eps=0.0)


class TestTape:
    def test_replay_reproduces_values(self):
        rng = np.random.Generator(np.random.PCG64(4))
        tape = ad.Tape()
        x, w = leafs(tape, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
        out = ad.mean(ad.softmax_rows(ad.matmul(ad.relu(x), w)))
        ad.backward(out, [x, w], higher_order=True)
        tape.replay()

    def test_generations_distinct(self):
        assert ad.Tape().generation != ad.Tape().generation

    def test_finite_invariant(self):
        with pytest.raises(NumericError):
            ad.exp(ad.Tensor(1e6))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8))
def test_softmax_rows_normalized_property(vals):
    out = ad.softmax_rows(ad.Tensor(np.array(vals)))
    assert abs(out.values.sum() - 1.0) <= 1e-12
    assert np.all(out.values >= 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composition_gradients(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ad.Tensor(rng.normal(size=(3, 4)))
    w = ad.Tensor(rng.normal(size=(4, 3)))

    def f(params):
        h = ad.relu(ad.matmul(params[0], params[1]))
        s = ad.softmax_rows(ad.add(h, ad.Tensor(rng_offset)))
        return ad.mean(ad.multiply(s, ad.tanh(h)))

    rng_offset = rng.normal(size=(3, 3))
    assert ad.check_gradient(f, [x, w], eps=1e-6, coords_per_param=6,
                             seed=seed) <= 1e-4
