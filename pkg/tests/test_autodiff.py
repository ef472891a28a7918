import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gnntickets import autodiff as ad
from gnntickets.autodiff import CsrMatrix, Tape


def rand_csr(rng, m, n, density=0.4):
    a = sp.random(m, n, density=density, random_state=rng, format="csr")
    return CsrMatrix.from_scipy(a)


def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(b))
    np.testing.assert_array_equal(out.data, b)


def test_relu_value_and_grad_mask():
    tape = Tape()
    x = tape.leaf([-1.0, 2.0])
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 2.0])
    g = ad.backward(tape, ad.sum_all(y))[x]
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_leaky_relu():
    y = ad.leaky_relu(ad.constant([-1.0, 2.0]), 0.2)
    np.testing.assert_allclose(y.data, [-0.2, 2.0], rtol=0, atol=1e-15)


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(ad.constant(np.ones(2)), ad.constant(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.concat_cols(ad.constant(np.ones((2, 1))), ad.constant(np.ones((3, 1))))
    with pytest.raises(ad.ShapeError):
        ad.spmm(CsrMatrix.from_scipy(sp.eye(3)), ad.constant(np.ones((2, 1))))


def test_spmm_identity_and_half_matrix():
    x = np.array([[2.0], [4.0]])
    np.testing.assert_array_equal(ad.spmm(CsrMatrix.from_scipy(sp.eye(2)), ad.constant(x)).data, x)
    half = CsrMatrix.from_scipy(np.full((2, 2), 0.5))
    np.testing.assert_array_equal(ad.spmm(half, ad.constant(x)).data, [[3.0], [3.0]])


def test_spmm_matches_dense_on_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(1, 12))
        k = int(rng.integers(1, 5))
        adj = rand_csr(rng, m, m, density=float(rng.uniform(0.05, 0.9)))
        x = rng.standard_normal((m, k))
        out = ad.spmm(adj, ad.constant(x)).data
        np.testing.assert_allclose(out, adj.to_dense() @ x, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_spmm_dense_oracle_property(m, k, seed):
    rng = np.random.default_rng(seed)
    adj = rand_csr(rng, m, m)
    x = rng.standard_normal((m, k))
    np.testing.assert_allclose(ad.spmm(adj, ad.constant(x)).data, adj.to_dense() @ x, rtol=0, atol=1e-10)


def test_softmax_cross_entropy_uniform_is_log_c():
    loss = ad.softmax_cross_entropy(ad.constant(np.zeros((4, 5))), [0, 1, 2, 3], [0, 1, 2, 3])
    assert abs(float(loss.data) - np.log(5)) < 1e-14


def test_softmax_cross_entropy_large_margin_goes_to_zero():
    z = np.zeros((3, 3))
    z[np.arange(3), [2, 0, 1]] = 200.0
    assert float(ad.softmax_cross_entropy(ad.constant(z), [2, 0, 1], [0, 1, 2]).data) < 1e-80


def test_softmax_cross_entropy_against_direct_formula():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 3))
    y = np.array([2, 0, 1, 1])
    idx = [0, 2, 3]
    direct = -np.mean([z[i, y[i]] - np.log(sum(np.exp(z[i, c]) for c in range(3))) for i in idx])
    assert abs(float(ad.softmax_cross_entropy(ad.constant(z), y, idx).data) - direct) < 1e-13


def test_softmax_cross_entropy_empty_idx():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(ad.constant(np.zeros((2, 2))), [0, 0], [])


def test_edge_softmax_single_and_equal():
    adj = CsrMatrix.from_scipy(np.array([[0, 1.0, 0], [1, 1, 1], [0, 1, 0]]))
    out = ad.edge_softmax(ad.constant(np.array([5.0, 0.3, 0.3, 0.3, -2.0])), adj).data
    np.testing.assert_allclose(out, [1.0, 1 / 3, 1 / 3, 1 / 3, 1.0], rtol=0, atol=1e-15)


def test_edge_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(2, 15))
        a = sp.random(n, n, density=0.5, random_state=rng, format="csr") + sp.eye(n)
        adj = CsrMatrix.from_scipy(a)
        alpha = ad.edge_softmax(ad.constant(10 * rng.standard_normal(adj.nnz)), adj).data
        assert np.all(alpha > 0)
        np.testing.assert_allclose(np.bincount(adj.rows, weights=alpha, minlength=n), 1.0, rtol=0, atol=1e-12)


def test_backward_square_sum():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    np.testing.assert_array_equal(ad.backward(tape, ad.sum_all(ad.mul(x, x)))[x], [2.0, 4.0])


def test_backward_constant_loss_gives_zeros():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    grads = ad.backward(tape, ad.constant(3.0))
    np.testing.assert_array_equal(grads[x], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, ad.relu(x))


def test_grad_check_quadratic():
    err = ad.grad_check(lambda x: ad.sum_all(ad.mul(x, x)), np.array([0.3, -1.2, 2.0]), eps=1e-4)
    assert err < 1e-6


def _weighted(x):
    # fixed random projection so every output coordinate matters
    w = np.random.default_rng(42).standard_normal(x.shape)
    return ad.sum_all(ad.mul(x, ad.constant(w)))


@pytest.mark.parametrize("name", ["matmul_left", "matmul_right", "relu", "leaky_relu", "add", "mul", "scale",
                                  "concat_left", "concat_right", "take_rows", "spmm", "weighted_spmm_w",
                                  "weighted_spmm_x", "edge_softmax", "softmax_ce", "dropout"])
def test_grad_check_every_primitive(name):
    rng = np.random.default_rng(7)
    adj = CsrMatrix.from_scipy(sp.random(6, 6, density=0.5, random_state=rng, format="csr") + sp.eye(6))
    A = rng.standard_normal((6, 4))
    B = rng.standard_normal((4, 3))
    ew = rng.standard_normal(adj.nnz)
    # keep relu/leaky_relu inputs away from the kink
    K = rng.choice([-1.0, 1.0], size=(6, 4)) * rng.uniform(0.2, 1.0, size=(6, 4))
    fns = {
        "matmul_left": (lambda x: _weighted(ad.matmul(x, ad.constant(B))), A),
        "matmul_right": (lambda x: _weighted(ad.matmul(ad.constant(A), x)), B),
        "relu": (lambda x: _weighted(ad.relu(x)), K),
        "leaky_relu": (lambda x: _weighted(ad.leaky_relu(x, 0.2)), K),
        "add": (lambda x: _weighted(ad.add(x, ad.mul(x, x))), A),
        "mul": (lambda x: _weighted(ad.mul(x, ad.constant(A))), A),
        "scale": (lambda x: _weighted(ad.scale(x, -1.7)), A),
        "concat_left": (lambda x: _weighted(ad.concat_cols(x, ad.constant(A))), A),
        "concat_right": (lambda x: _weighted(ad.concat_cols(ad.constant(A), ad.mul(x, x))), A),
        "take_rows": (lambda x: _weighted(ad.take_rows(x, [0, 3, 3, 5, 1])), A),
        "spmm": (lambda x: _weighted(ad.spmm(adj, x)), A),
        "weighted_spmm_w": (lambda x: _weighted(ad.weighted_spmm(adj, x, ad.constant(A))),
                            rng.standard_normal(adj.nnz)),
        "weighted_spmm_x": (lambda x: _weighted(ad.weighted_spmm(adj, ad.constant(ew), x)),
                            A),
        "edge_softmax": (lambda x: _weighted(ad.edge_softmax(x, adj)), rng.standard_normal(adj.nnz)),
        "softmax_ce": (lambda x: ad.softmax_cross_entropy(x, [0, 1, 2, 3, 0, 1], [0, 2, 3, 5]), A),
        "dropout": (lambda x: _weighted(ad.dropout(x, 0.3, np.random.default_rng(5))), A),
    }
    f, x0 = fns[name]
    assert ad.grad_check(f, x0, eps=1e-4) < 1e-4


def test_csr_invariants():
    with pytest.raises(ValueError):
        CsrMatrix(np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 1.0]), (2, 2))
    with pytest.raises(ValueError):
        CsrMatrix(np.array([0, 2, 2]), np.array([1, 0]), np.array([1.0, 1.0]), (2, 2))
    with pytest.raises(ad.NumericFault):
        CsrMatrix(np.array([0, 1, 1]), np.array([0]), np.array([np.nan]), (2, 2))


def test_debug_tape_trips_on_nan():
    tape = Tape(debug=True)
    x = tape.leaf([1.0, -1.0])
    with pytest.raises(ad.NumericFault):
        ad.scale(ad.leaky_relu(x, 1e308), 1e10)


def test_forward_bit_identical():
    rng = np.random.default_rng(0)
    adj = rand_csr(rng, 30, 30)
    x = rng.standard_normal((30, 8))
    a = ad.relu(ad.spmm(adj, ad.constant(x))).data
    b = ad.relu(ad.spmm(adj, ad.constant(x))).data
    assert a.tobytes() == b.tobytes()


def test_release_clears_tape():
    tape = Tape()
    x = tape.leaf([1.0])
    ad.scale(x, 2.0)
    tape.release()
    assert tape.nodes == [] and tape.leaves == []
