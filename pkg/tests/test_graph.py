"""Finite-difference checks for the autodiff engine.

Every primitive gets its gradient compared against central differences on
random inputs; a couple of composite graphs exercise fan-out accumulation
and the batched matrix products together.
"""

import numpy as np
import pytest

from mtnn import graph as g

RNG = np.random.default_rng(20240811)


def fd_grad(f, args, i, eps=1e-6):
    """Central finite differences of scalar f w.r.t. args[i]."""
    x = args[i]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(*args)
        x[idx] = orig - eps
        fm = f(*args)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return grad


def check_grads(build, arrays, atol=1e-7, rtol=1e-5):
    """build(*Vars) -> scalar Var; compares backward() grads to FD."""
    leaves = [g.Var(a.copy()) for a in arrays]
    out = build(*leaves)
    g.backward(out)

    def value_fn(*args):
        return build(*[g.Var(a) for a in args]).value

    for i, leaf in enumerate(leaves):
        want = fd_grad(value_fn, [a.copy() for a in arrays], i)
        got = leaf.grad
        assert got is not None, f"leaf {i} got no gradient"
        np.testing.assert_allclose(got, want, atol=atol, rtol=rtol)


class TestArithmetic:
    def test_add_sub_mul(self):
        a = RNG.normal(size=(4, 3))
        b = RNG.normal(size=(4, 3))
        check_grads(lambda x, y: g.sum_all((x + y) * (x - y) * y), [a, b])

    def test_scalar_and_constant_operands(self):
        a = RNG.normal(size=(5, 2))
        c = RNG.normal(size=(5, 2))
        check_grads(lambda x: g.sum_all(2.0 * x + (x * c) - 1.5), [a])

    def test_neg_and_scale(self):
        a = RNG.normal(size=(3, 3))
        check_grads(lambda x: g.sum_all(g.scale(-x, 0.25)), [a])

    def test_var_broadcast_rejected(self):
        x = g.Var(RNG.normal(size=(3, 1)))
        y = g.Var(RNG.normal(size=(3, 4)))
        with pytest.raises(ValueError):
            g.add(x, y)

    def test_mean_all(self):
        a = RNG.normal(size=(6, 2))
        check_grads(lambda x: g.mean_all(x * x), [a])


class TestActivations:
    def test_tanh(self):
        a = RNG.normal(size=(4, 5))
        check_grads(lambda x: g.sum_all(g.tanh(x)), [a])

    def test_sigmoid(self):
        a = RNG.normal(size=(4, 5)) * 3
        check_grads(lambda x: g.sum_all(g.sigmoid(x)), [a])

    def test_sigmoid_extreme_inputs_finite(self):
        v = g.sigmoid(g.Var(np.array([[-800.0, 800.0]])))
        assert np.all(np.isfinite(v.value))
        np.testing.assert_allclose(v.value, [[0.0, 1.0]], atol=1e-12)

    def test_relu_away_from_kink(self):
        a = RNG.normal(size=(4, 5))
        a[np.abs(a) < 0.1] = 0.5  # keep FD away from the nondifferentiable point
        check_grads(lambda x: g.sum_all(g.relu(x)), [a])

    def test_relu_subgradient_zero_at_kink(self):
        x = g.Var(np.zeros((1, 3)))
        out = g.sum_all(g.relu(x))
        g.backward(out)
        np.testing.assert_array_equal(x.grad, np.zeros((1, 3)))


class TestLinear:
    def test_all_three_grads(self):
        x = RNG.normal(size=(6, 4))
        W = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(3,))
        check_grads(lambda xx, WW, bb: g.sum_all(g.tanh(g.linear(xx, WW, bb))), [x, W, b])

    def test_constant_input(self):
        x = RNG.normal(size=(2, 4))
        W = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(3,))
        check_grads(lambda WW, bb: g.sum_all(g.linear(x, WW, bb)), [W, b])

    def test_value(self):
        x = np.array([[1.0, 2.0]])
        W = np.array([[3.0, 4.0], [5.0, 6.0]])
        b = np.array([0.5, -0.5])
        np.testing.assert_allclose(
            g.linear(g.Var(x), W, b).value, [[11.5, 16.5]]
        )


class TestBatchedMatrixOps:
    def test_mat_chain(self):
        W = RNG.normal(size=(3, 5))
        G = RNG.normal(size=(4, 5, 2))
        check_grads(lambda WW, GG: g.sum_all(g.mat_chain(WW, GG) * RNG_WEIGHTS), [W, G])

    def test_scale_rows(self):
        d = RNG.normal(size=(4, 3))
        G = RNG.normal(size=(4, 3, 2))
        check_grads(lambda dd, GG: g.sum_all(g.scale_rows(dd, GG) * RNG_WEIGHTS), [d, G])

    def test_bmat_vec(self):
        A = RNG.normal(size=(3, 4, 5))
        v = RNG.normal(size=(3, 5))
        check_grads(lambda AA, vv: g.sum_all(g.tanh(g.bmat_vec(AA, vv))), [A, v])

    def test_dot_rows(self):
        u = RNG.normal(size=(5, 3))
        v = RNG.normal(size=(5, 3))
        check_grads(lambda uu, vv: g.sum_all(g.dot_rows(uu, vv) * np.arange(1.0, 6.0)), [u, v])

    def test_mat_chain_value(self):
        W = np.array([[1.0, 0.0], [0.0, 2.0]])
        G = np.ones((1, 2, 3))
        out = g.mat_chain(g.Var(W), g.Var(G))
        np.testing.assert_allclose(out.value[0], [[1, 1, 1], [2, 2, 2]])

    def test_transpose_last(self):
        A = RNG.normal(size=(4, 3, 2))
        out = g.transpose_last(g.Var(A))
        np.testing.assert_array_equal(out.value, np.swapaxes(A, -1, -2))
        check_grads(
            lambda AA: g.sum_all(g.transpose_last(AA) * np.swapaxes(RNG_WEIGHTS, -1, -2)),
            [A],
        )


RNG_WEIGHTS = np.random.default_rng(7).normal(size=(4, 3, 2))


class TestDet:
    def test_grad_matches_fd(self):
        A = RNG.normal(size=(5, 3, 3))
        w = np.arange(1.0, 6.0)
        check_grads(lambda AA: g.sum_all(g.det(AA) * w), [A], atol=1e-6, rtol=1e-4)

    def test_value_batched(self):
        A = RNG.normal(size=(7, 4, 4))
        np.testing.assert_allclose(g.det(g.Var(A)).value, np.linalg.det(A))

    def test_grad_exact_at_singular(self):
        # Rank-1 matrix: det = 0 but the cofactor gradient is well defined.
        A = np.array([[[1.0, 2.0], [2.0, 4.0]]])
        v = g.Var(A)
        out = g.sum_all(g.det(v))
        g.backward(out)
        # d det / dA = [[a22, -a21], [-a12, a11]]
        np.testing.assert_allclose(v.grad[0], [[4.0, -2.0], [-2.0, 1.0]])

    def test_grad_1x1(self):
        A = np.array([[[3.0]], [[-2.0]]])
        v = g.Var(A)
        g.backward(g.sum_all(g.det(v)))
        np.testing.assert_allclose(v.grad, np.ones((2, 1, 1)))


class TestStructuralOps:
    def test_concat_last(self):
        a = RNG.normal(size=(4, 2))
        b = RNG.normal(size=(4, 3))
        w = np.random.default_rng(3).normal(size=(4, 5))
        check_grads(lambda x, y: g.sum_all(g.concat_last([x, y]) * w), [a, b])

    def test_concat_with_constant_piece(self):
        a = RNG.normal(size=(4, 2))
        cst = RNG.normal(size=(4, 1))
        check_grads(lambda x: g.sum_all(g.tanh(g.concat_last([x, cst]))), [a])

    def test_stack_cols_and_col(self):
        a = RNG.normal(size=(6,))
        b = RNG.normal(size=(6,))
        check_grads(
            lambda x, y: g.sum_all(g.col(g.stack_cols([x, y, x]), 2) * g.col(g.stack_cols([y, x]), 0)),
            [a, b],
        )


class TestBackward:
    def test_requires_scalar_root(self):
        with pytest.raises(ValueError):
            g.backward(g.Var(np.ones(3)))

    def test_fanout_accumulation(self):
        x = g.Var(np.array(2.0).reshape(()))
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        g.backward(y)
        np.testing.assert_allclose(x.grad, 7.0)

    def test_deep_chain_no_recursion_limit(self):
        x = g.Var(np.ones((1, 1)) * 0.001)
        v = x
        for _ in range(5000):
            v = v + x
        g.backward(g.sum_all(v))
        np.testing.assert_allclose(x.grad, np.full((1, 1), 5001.0))

    def test_unreached_leaf_has_none_grad(self):
        x = g.Var(np.ones((2, 2)))
        y = g.Var(np.ones((2, 2)))
        g.backward(g.sum_all(x * 2.0))
        assert y.grad is None

    def test_composite_network_like_graph(self):
        # One hidden layer with the analytic Jacobian chained in, then a
        # mixed loss over both, mirroring how the trainer uses the engine.
        x = RNG.normal(size=(3, 4))
        W1 = RNG.normal(size=(5, 4)) * 0.5
        b1 = RNG.normal(size=(5,))
        W2 = RNG.normal(size=(2, 5)) * 0.5
        b2 = RNG.normal(size=(2,))
        dz = RNG.normal(size=(3, 4))

        def build(W1v, b1v, W2v, b2v):
            h = g.tanh(g.linear(g.Var(x), W1v, b1v))
            out = g.linear(h, W2v, b2v)
            ones = 1.0 - h * h  # tanh' at the hidden preactivation
            eye = np.broadcast_to(np.eye(4), (3, 4, 4))
            J = g.mat_chain(W2v, g.scale_rows(ones, g.mat_chain(W1v, g.Var(eye))))
            corr = g.bmat_vec(J, g.Var(dz))
            return g.mean_all((out + corr) * (out + corr))

        check_grads(build, [W1, b1, W2, b2], atol=1e-6, rtol=1e-4)
