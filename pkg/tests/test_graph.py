import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contractify.nnet.graph import GraphBuilder, GraphError, eval_graph, forward, gradient, vjp
from contractify.nnet.mlp import Layer, Mlp, add_mlp

from randgraph import checked_point, fd_gradient, random_graph, rel_err


def unary(op, **kw):
    b = GraphBuilder()
    x = b.input(1)
    return b.build(getattr(b, op)(x, **kw))


def test_relu_negative_branch():
    assert eval_graph(unary("relu"), [-1.0])[0] == 0.0


def test_sin_zero():
    assert eval_graph(unary("sin"), [0.0])[0] == 0.0


def test_tanh_mlp_hand_value():
    net = Mlp((Layer(np.full((2, 1), 0.5), np.zeros(2), "tanh"),
               Layer(np.full((1, 2), 0.5), np.zeros(1), "id")))
    b = GraphBuilder()
    g = b.build(add_mlp(b, b.input(1), net, prefix="net"))
    y = eval_graph(g, [1.0], net.flat())[0]
    assert y == pytest.approx(0.5 * (math.tanh(0.5) + math.tanh(0.5)), abs=1e-12)
    assert y == pytest.approx(0.46212, abs=1e-5)


def test_square_derivative():
    _, gx, _ = gradient(unary("square"), [3.0])
    assert gx[0] == 6.0


def test_relu_subgradient_at_zero():
    _, gx, _ = gradient(unary("relu"), [0.0])
    assert gx[0] == 0.0


def test_dimension_mismatch_rejected():
    g = unary("sin")
    with pytest.raises(GraphError):
        eval_graph(g, [0.0, 1.0])


def test_non_scalar_root_rejected():
    b = GraphBuilder()
    x = b.input(2)
    g = b.build(b.sin(x))
    with pytest.raises(GraphError):
        gradient(g, [0.0, 1.0])


def test_random_tanh_mlp_matches_finite_differences(rng):
    net = Mlp.init([2, 8, 8, 1], act="tanh", rng=rng)
    b = GraphBuilder()
    g = b.build(add_mlp(b, b.input(2), net, prefix="net"))
    x = rng.normal(size=2)
    _, gx, gp = gradient(g, x, net.flat())
    fx, fp = fd_gradient(g, x, net.flat())
    assert rel_err(gx, fx) <= 1e-5
    assert rel_err(gp, fp) <= 1e-5


@pytest.mark.parametrize("seed", range(100))
def test_random_graph_gradients(seed):
    rng = np.random.default_rng(seed)
    g, n_in, n_p = random_graph(rng)
    pt = checked_point(g, rng, n_in, n_p)
    if pt is None:
        pytest.skip("no kink-free point found")
    x, p = pt
    _, gx, gp = gradient(g, x, p)
    fx, fp = fd_gradient(g, x, p)
    assert rel_err(gx, fx) <= 1e-5
    assert rel_err(gp, fp) <= 1e-5


def test_batched_vjp_matches_per_sample(rng):
    g, n_in, n_p = random_graph(np.random.default_rng(7), n_in=3, depth=5)
    x = rng.normal(size=(6, n_in))
    p = rng.normal(size=n_p)
    vals = forward(g, x, p)
    xc, pc = vjp(g, vals, np.ones((6, 1)))
    for i in range(6):
        _, gx, gp = gradient(g, x[i], p)
        np.testing.assert_allclose(xc[i], gx, rtol=1e-12, atol=1e-12)
    total = sum(gradient(g, x[i], p)[2] for i in range(6))
    np.testing.assert_allclose(pc, total, rtol=1e-10, atol=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.integers(0, 50))
def test_eval_is_pure(x, seed):
    g, n_in, n_p = random_graph(np.random.default_rng(seed), n_in=2)
    p = np.linspace(-1, 1, n_p)
    a = eval_graph(g, x, p)
    c = eval_graph(g, x, p)
    assert np.array_equal(a, c, equal_nan=True)
