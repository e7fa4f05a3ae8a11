import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mremq import autograd as ag
from mremq.autograd import Tensor
from oracles import central_diff, gelu_ref, layer_norm_ref, rel_err

F64 = np.float64


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=F64)


def check_grads(build, leaves, tol=1e-4):
    """Compare backprop against central differences of ``sum(build() * w)``."""
    out = build()
    w = np.random.default_rng(0).normal(size=out.shape)
    loss = ag.sum_all(ag.mul(build(), Tensor(w, dtype=F64)))
    grads = ag.backward(loss)

    def f():
        with ag.no_grad():
            return float((build().data * w).sum())

    num = central_diff(f, [t.data for t in leaves])
    for t, n in zip(leaves, num):
        assert rel_err(grads[t], n) < tol, t.name


def test_add_sub_mul_broadcast(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    check_grads(lambda: ag.add(a, b), [a, b])
    check_grads(lambda: ag.sub(a, b), [a, b])
    check_grads(lambda: ag.mul(a, b), [a, b])
    check_grads(lambda: ag.scale(a, -2.5), [a])


def test_matmul_variants(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    check_grads(lambda: ag.matmul(a, b), [a, b])
    c, d = leaf(rng, 2, 3, 4, 5), leaf(rng, 2, 3, 5, 2)
    check_grads(lambda: ag.matmul(c, d), [c, d])
    e, f = leaf(rng, 3, 4), leaf(rng, 4, 2)
    check_grads(lambda: ag.matmul(e, f), [e, f])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_gelu_matches_erf_form_and_grad(rng):
    x = leaf(rng, 5, 3, scale=2.0)
    np.testing.assert_allclose(ag.gelu(x).data, gelu_ref(x.data), rtol=1e-12, atol=1e-14)
    check_grads(lambda: ag.gelu(x), [x])


def test_softmax_rows(rng):
    x = leaf(rng, 2, 3, 5, scale=3.0)
    p = ag.softmax_rows(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    check_grads(lambda: ag.softmax_rows(x), [x])


def test_softmax_large_logits_finite():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0]]), dtype=F64)
    p = ag.softmax_rows(x).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_layer_norm(rng):
    x, g, b = leaf(rng, 3, 4, 6), leaf(rng, 6), leaf(rng, 6)
    np.testing.assert_allclose(ag.layer_norm(x, g, b).data, layer_norm_ref(x.data, g.data, b.data), rtol=1e-10)
    check_grads(lambda: ag.layer_norm(x, g, b, 1e-5), [x, g, b])


def test_layer_norm_constant_row_finite():
    x = Tensor(np.full((2, 4), 3.0), requires_grad=True, dtype=F64)
    y = ag.layer_norm(x, Tensor(np.ones(4), dtype=F64), Tensor(np.zeros(4), dtype=F64))
    assert np.all(np.isfinite(y.data))


def test_reshape_transpose_mean(rng):
    x = leaf(rng, 2, 3, 4)
    check_grads(lambda: ag.transpose(ag.reshape(x, (2, 12)), (1, 0)), [x])
    check_grads(lambda: ag.mean_axis(x, 1), [x])


def test_embedding_grad_accumulates_repeats(rng):
    table = leaf(rng, 5, 3)
    idx = np.array([[0, 1, 1], [4, 1, 0]])
    check_grads(lambda: ag.embedding(table, idx), [table])
    with pytest.raises(IndexError):
        ag.embedding(table, np.array([[5]]))


def test_mse_and_cross_entropy(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    loss = ag.mse(a, b)
    assert loss.data == pytest.approx(((a.data - b.data) ** 2).mean())
    grads = ag.backward(ag.mse(a, b))
    num = central_diff(lambda: float(((a.data - b.data) ** 2).mean()), [a.data])
    assert rel_err(grads[a], num[0]) < 1e-6
    lg = leaf(rng, 4, 3)
    y = np.array([0, 2, 1, 2])

    def ce():
        z = lg.data - lg.data.max(1, keepdims=True)
        return float(-(z[np.arange(4), y] - np.log(np.exp(z).sum(1))).mean())

    assert float(ag.cross_entropy(lg, y).data) == pytest.approx(ce(), rel=1e-12)
    g = ag.backward(ag.cross_entropy(lg, y))[lg]
    assert rel_err(g, central_diff(ce, [lg.data])[0]) < 1e-6


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = ag.mul(x, x)
    g = ag.backward(ag.sum_all(ag.add(y, x)))[x]
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        ag.backward(ag.add(leaf(rng, 2), leaf(rng, 2)))


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad and y._parents == ()
    assert ag.grad_enabled()


def test_backward_releases_graph_and_sets_grad(rng):
    x = leaf(rng, 3)
    loss = ag.sum_all(ag.mul(x, x))
    ag.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_finite_check_toggle():
    ag.set_check_finite(True)
    try:
        with pytest.raises(ag.NonFiniteError), np.errstate(invalid="ignore"):
            ag.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))
    finally:
        ag.set_check_finite(False)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_unbroadcast_inverts_broadcast(shape, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    small = tuple(1 if rng.random() < 0.5 else n for n in shape)
    g = rng.normal(size=(2,) + shape)
    r = ag.unbroadcast(g, small)
    assert r.shape == small
    np.testing.assert_allclose(r.sum(), g.sum())
