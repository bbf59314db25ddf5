import numpy as np
import pytest

from contractify.nnet.graph import GraphBuilder, eval_graph, gradient, secant_value
from contractify.nnet.slopes import inline

from randgraph import checked_point, random_graph, slope_graph


@pytest.mark.parametrize("seed", range(40))
def test_quotient_times_t_is_the_increment(seed):
    rng = np.random.default_rng(seed)
    g, n, n_p = random_graph(rng)
    q = slope_graph(g)
    p = rng.uniform(-1, 1, n_p)
    x = rng.uniform(-1, 1, (50, n))
    v = rng.uniform(-1, 1, (50, n))
    t = rng.uniform(0.05, 1.0, (50, 1))
    inc = eval_graph(g, x + t * v, p) - eval_graph(g, x, p)
    got = eval_graph(q, np.hstack([x, v, t]), p) * t
    np.testing.assert_allclose(got, inc, rtol=1e-8, atol=1e-9)


@pytest.mark.parametrize("seed", range(40))
def test_quotient_at_zero_is_directional_derivative(seed):
    rng = np.random.default_rng(100 + seed)
    g, n, n_p = random_graph(rng)
    pt = checked_point(g, rng, n, n_p)
    if pt is None:
        pytest.skip("no kink-free point")
    x, p = pt
    v = rng.uniform(-1, 1, n)
    _, gx, _ = gradient(g, x, p)
    got = eval_graph(slope_graph(g), np.concatenate([x, v, [0.0]]), p)[0]
    assert got == pytest.approx(gx @ v, rel=1e-9, abs=1e-9)


def test_secant_values():
    a = np.array([0.0, -1.0, 0.3, 2.0])
    b = np.array([0.5, 1.0, 0.3, 2.0 + 1e-9])
    for fn, f, df in (("sin", np.sin, np.cos),
                      ("tanh", np.tanh, lambda s: 1 - np.tanh(s) ** 2)):
        got = secant_value(fn, a, b)
        d = b - a
        want = np.where(np.abs(d) > 1e-6, (f(b) - f(a)) / np.where(d == 0, 1, d), df(a))
        np.testing.assert_allclose(got, want, rtol=1e-6)
    np.testing.assert_array_equal(secant_value("relu", np.array([-1.0, 1.0, 0.0]),
                                               np.array([1.0, 2.0, 0.0])), [0.5, 1.0, 0.0])


def test_inline_reproduces_graph(rng):
    g, n, n_p = random_graph(np.random.default_rng(3), n_in=2, depth=6)
    b = GraphBuilder()
    out = inline(b, g, b.input(2))
    h = b.build(out)
    x = rng.normal(size=(10, 2))
    p = rng.normal(size=n_p)
    np.testing.assert_array_equal(eval_graph(h, x, p), eval_graph(g, x, p))
