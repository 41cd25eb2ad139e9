import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supmae import diffcore as dc
from supmae.diffcore import Graph, backward, grad_check

RNG = np.random.default_rng(1234)


def _rand(*shape, rng=RNG):
    return rng.standard_normal(shape)


def _fd_check(f, params, tol, **kw):
    rep = grad_check(f, params, tol=tol, **kw)
    assert rep.passed, rep.table()
    return rep


# ---------------------------------------------------------------- matmul

def test_matmul_identity_cases():
    b = _rand(3, 2)
    assert np.array_equal(dc.matmul(np.eye(3), b).data, b)
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(dc.matmul(a, np.eye(2)).data, a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


@pytest.mark.parametrize("shapes", [((4, 5), (5, 3)), ((2, 4, 5), (5, 3)), ((2, 3, 4), (2, 4, 2))])
def test_matmul_grad(shapes):
    p = {"a": _rand(*shapes[0]), "b": _rand(*shapes[1])}
    _fd_check(lambda g, t: dc.total(dc.square(dc.matmul(t["a"], t["b"]))), p, tol=1e-6)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    x = np.full((1, 5), 3.7)
    out = dc.layer_norm(x, np.ones(5), np.zeros(5)).data
    assert np.allclose(out, 0.0, atol=1e-12)


def test_layer_norm_already_normalized():
    out = dc.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_dim_mismatch():
    with pytest.raises(dc.DimensionError):
        dc.layer_norm(np.zeros((2, 4)), np.ones(3), np.zeros(3))


@pytest.mark.parametrize("shape", [(2, 8), (3, 5), (2, 3, 6)])
def test_layer_norm_grads(shape):
    d = shape[-1]
    w = _rand(*shape)
    p = {"x": _rand(*shape), "gamma": 1 + 0.3 * _rand(d), "beta": _rand(d)}
    _fd_check(lambda g, t: dc.total(dc.mul(dc.layer_norm(t["x"], t["gamma"], t["beta"]), w)), p, tol=1e-5)


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(dc.softmax(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_no_overflow():
    s = dc.softmax(np.array([[1000.0, 0.0]])).data
    np.testing.assert_allclose(s, [[1.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("shape", [(3, 7), (2, 2, 5), (4, 1)])
def test_softmax_jacobian(shape):
    w = _rand(*shape)
    _fd_check(lambda g, t: dc.total(dc.mul(dc.softmax(t["x"]), w)), {"x": _rand(*shape)}, tol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1), st.floats(1.0, 1e4))
def test_softmax_rows_normalize(n, seed, mag):
    x = np.random.default_rng(seed).uniform(-mag, mag, size=(3, n))
    s = dc.softmax(x).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_log_softmax_grad():
    w = _rand(3, 6)
    _fd_check(lambda g, t: dc.total(dc.mul(dc.log_softmax(t["x"]), w)), {"x": _rand(3, 6)}, tol=1e-5)


# ---------------------------------------------------------------- gelu / relu

def test_gelu_values():
    assert dc.gelu(np.array([0.0])).data[0] == 0.0
    np.testing.assert_allclose(dc.gelu(np.array([50.0])).data, [50.0])
    assert abs(dc.gelu(np.array([-10.0])).data[0]) < 1e-6


@pytest.mark.parametrize("shape", [(10,), (3, 4), (2, 2, 3)])
def test_gelu_grad(shape):
    w = _rand(*shape)
    _fd_check(lambda g, t: dc.total(dc.mul(dc.gelu(t["x"]), w)), {"x": 2 * _rand(*shape)}, tol=1e-5)


def test_relu_grad_away_from_kink():
    x = _rand(4, 5)
    x[np.abs(x) < 0.1] = 0.5
    w = _rand(4, 5)
    _fd_check(lambda g, t: dc.total(dc.mul(dc.relu(t["x"]), w)), {"x": x}, tol=1e-6)


# ---------------------------------------------------------------- attention

def test_attention_single_token_returns_v():
    q, k, v = _rand(2, 1, 4), _rand(2, 1, 4), _rand(2, 1, 4)
    assert np.array_equal(dc.attention(q, k, v).data, v)


def test_attention_zero_query_is_mean_of_v():
    v = _rand(3, 5, 4)
    out = dc.attention(np.zeros((3, 5, 4)), _rand(3, 5, 4), v).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape), atol=1e-12)


def test_attention_shape_error():
    with pytest.raises(dc.DimensionError):
        dc.attention(np.zeros((2, 3, 4)), np.zeros((2, 3, 4)), np.zeros((2, 3, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(3)))
def test_attention_permutation_equivariant(seed, perm):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((2, 3, 4)).astype(np.float32) for _ in range(3))
    perm = np.array(perm)
    out = dc.attention(q, k, v).data
    out_p = dc.attention(q[:, perm], k[:, perm], v[:, perm]).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-6)


@pytest.mark.parametrize("shape", [(2, 3, 4), (1, 2, 5, 3), (3, 1, 2)])
def test_attention_grads(shape):
    w = _rand(*shape)
    p = {"q": _rand(*shape), "k": _rand(*shape), "v": _rand(*shape)}
    _fd_check(lambda g, t: dc.total(dc.mul(dc.attention(t["q"], t["k"], t["v"]), w)), p, tol=1e-5)


# ---------------------------------------------------------------- plumbing ops

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_plumbing_grads(seed):
    rng = np.random.default_rng(seed)
    idx = np.array([[2, 0, 2], [1, 1, 3]])
    p = {"x": rng.standard_normal((2, 4, 3)), "tok": rng.standard_normal(3), "w": rng.standard_normal((3, 5)),
         "b": rng.standard_normal(5)}
    wt = rng.standard_normal((2, 5, 5))

    def f(g, t):
        y = dc.gather_rows(t["x"], idx)
        y = dc.concat([y, dc.tile_rows(t["tok"], 2, 2)], axis=1)
        y = dc.linear(y, t["w"], t["b"])
        y = dc.transpose(dc.reshape(y, (2, 5, 5)), (0, 2, 1))
        return dc.total(dc.mul(y, wt)) + dc.total(dc.square(dc.mean(t["x"], axis=1)))

    _fd_check(f, p, tol=1e-6)


@pytest.mark.parametrize("bsz", [2, 3, 5])
def test_batch_norm_train_grads(bsz):
    rng = np.random.default_rng(bsz)
    w = rng.standard_normal((bsz, 4))
    p = {"x": rng.standard_normal((bsz, 4)), "gamma": 1 + 0.2 * rng.standard_normal(4), "beta": rng.standard_normal(4)}
    _fd_check(lambda g, t: dc.total(dc.mul(dc.batch_norm(t["x"], t["gamma"], t["beta"]), w)), p, tol=1e-5)


def test_batch_norm_eval_uses_running_stats():
    running = {"mean": np.zeros(3), "var": np.ones(3)}
    x = np.random.default_rng(0).standard_normal((8, 3))
    dc.batch_norm(x, running=running, train=True)
    np.testing.assert_allclose(running["mean"], 0.1 * x.mean(0))
    np.testing.assert_allclose(running["var"], 0.9 + 0.1 * x.var(0, ddof=1))
    out = dc.batch_norm(x[:1], running=running, train=False).data
    np.testing.assert_allclose(out, (x[:1] - running["mean"]) / np.sqrt(running["var"] + dc.BN_EPS))


def test_batch_norm_rejects_single_sample_in_train():
    with pytest.raises(dc.UsageError):
        dc.batch_norm(np.zeros((1, 3)))


# ---------------------------------------------------------------- backward

def test_backward_sum_is_ones():
    g = Graph()
    x = g.leaf("x", np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(backward(dc.total(x))["x"], np.ones(3))


def test_backward_square():
    g = Graph()
    x = g.leaf("x", np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(backward(dc.total(dc.square(x)))["x"], [2.0, 4.0, 6.0])


def test_untouched_leaf_gets_exact_zeros():
    g = Graph()
    x = g.leaf("x", np.ones(3))
    g.leaf("unused", np.ones((2, 2)))
    grads = backward(dc.total(x))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_repeatable_bitwise():
    g = Graph()
    t = g.bind({"a": _rand(4, 5), "b": _rand(5, 3)})
    loss = dc.total(dc.gelu(dc.matmul(t["a"], t["b"])))
    g1, g2 = backward(loss), backward(loss)
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_backward_non_leaf_request_is_usage_error():
    g = Graph()
    x = g.leaf("x", np.ones(3))
    y = dc.square(x)
    with pytest.raises(dc.UsageError):
        backward(dc.total(y), wrt=[y])


def test_graph_topological_order():
    g = Graph()
    t = g.bind({"a": _rand(2, 3), "b": _rand(3, 2)})
    dc.total(dc.relu(dc.matmul(t["a"], t["b"])))
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_forward_overflow_is_error():
    g = Graph()
    x = g.leaf("x", np.array([1e200]))
    with pytest.raises(dc.NumericError):
        dc.square(x)


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic_bowl():
    rep = grad_check(lambda g, t: dc.total(dc.square(t["x"])), {"x": _rand(5)}, tol=1e-6)
    assert rep.passed


def test_grad_check_detects_planted_bug(monkeypatch):
    # gradient of x^2 reported as 4x instead of 2x: rel err |4x-2x|/(4x+2x) = 1/3
    def bad_square(a):
        ad = a.data
        return a.graph._push("square", ad * ad, (a,), lambda g: (4 * ad * g,))

    rep = grad_check(lambda g, t: dc.total(bad_square(t["x"])), {"x": np.abs(_rand(4)) + 0.5}, tol=1e-4)
    assert not rep.passed
    assert rep.errors["x"] == pytest.approx(1 / 3, rel=1e-6)


def test_grad_check_requires_float64():
    with pytest.raises(dc.UsageError):
        grad_check(lambda g, t: dc.total(t["x"]), {"x": np.ones(2, dtype=np.float32)})


def test_grad_check_aborts_on_nonfinite_loss():
    g_ = lambda g, t: dc.scale(dc.total(t["x"]), float("inf"))
    with pytest.raises(dc.NumericError):
        grad_check(g_, {"x": np.ones(2)})
