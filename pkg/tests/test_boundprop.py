import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contractify.boundprop import interval_primitive, linear_relax, output_bounds, propagate_box
from contractify.nnet.graph import GraphBuilder
from contractify.systems import make_vdp

from randgraph import containment_violations, random_box, random_graph, slope_graph


def unary(op, **kw):
    b = GraphBuilder()
    return b.build(getattr(b, op)(b.input(1), **kw))


def test_interval_add():
    lo, hi = interval_primitive("add", (np.array([0.0]), np.array([1.0])),
                                (np.array([2.0]), np.array([3.0])))
    assert lo[0] == 2.0 and hi[0] == 4.0


def test_interval_relu():
    lo, hi = interval_primitive("relu", (np.array([-1.0]), np.array([2.0])))
    assert (lo[0], hi[0]) == (0.0, 2.0)


def test_sin_interior_maximum():
    lo, hi = interval_primitive("sin", (np.array([0.0]), np.array([math.pi])))
    assert lo[0] <= 0.0 and lo[0] > -1e-12
    assert hi[0] == 1.0


def test_even_power_contains_zero():
    lo, hi = propagate_box(unary("square"), [-1.0], [2.0])
    assert lo[0, 0] == 0.0 and hi[0, 0] == pytest.approx(4.0)
    assert hi[0, 0] >= 4.0


def test_dependency_loss_is_expected():
    b = GraphBuilder()
    x = b.input(1)
    g = b.build(b.sub(x, x))
    lo, hi = propagate_box(g, [0.0], [1.0])
    assert lo[0, 0] <= -1.0 and hi[0, 0] >= 1.0


def test_vdp_map_containment(rng):
    sys = make_vdp()
    b = GraphBuilder()
    g = b.build(sys.build_map(b, b.input(2)))
    lo, hi = propagate_box(g, [0.0, 0.0], [0.1, 0.1])
    x = rng.uniform(0.0, 0.1, (100_000, 2))
    y = sys(x)
    assert np.all((y >= lo) & (y <= hi))


def test_relu_triangle():
    lb = linear_relax(unary("relu"), [-1.0], [1.0])
    assert lb.al[0, 0, 0] == 0.0 and lb.bl[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert lb.au[0, 0, 0] == pytest.approx(0.5) and lb.bu[0, 0] == pytest.approx(0.5)
    assert lb.lo[0, 0] == 0.0 and lb.hi[0, 0] == pytest.approx(1.0)


def test_affine_graph_is_exact():
    b = GraphBuilder()
    x = b.input(2)
    g = b.build(b.add(b.scale(x, 2.0), b.const([1.0, -1.0])))
    lb = linear_relax(g, [0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(lb.al, lb.au)
    np.testing.assert_allclose(lb.bl, lb.bu, atol=1e-12)


def test_square_chord_and_tangent(rng):
    g = unary("square")
    lb = linear_relax(g, [1.0], [2.0])
    assert lb.au[0, 0, 0] == pytest.approx(3.0) and lb.bu[0, 0] == pytest.approx(-2.0)
    x = rng.uniform(1, 2, (10_000, 1))
    y = x[:, 0] ** 2
    assert np.all(lb.lower(x)[:, 0] <= y + 1e-12)
    assert np.all(y <= lb.upper(x)[:, 0] + 1e-12)


@pytest.mark.parametrize("seed", range(200))
@pytest.mark.parametrize("method", ["ibp", "linear"])
def test_fuzz_soundness(seed, method):
    rng = np.random.default_rng(seed)
    g, n, n_p = random_graph(rng)
    p = rng.uniform(-1, 1, n_p)
    lo, hi = random_box(rng, n)
    assert containment_violations(g, lo, hi, p, rng, 200, method) == 0


@pytest.mark.parametrize("seed", range(60))
def test_fuzz_soundness_slope_graphs(seed):
    rng = np.random.default_rng(10_000 + seed)
    g, n, n_p = random_graph(rng, depth=int(rng.integers(1, 4)))
    q = slope_graph(g)
    p = rng.uniform(-1, 1, n_p)
    lo, hi = random_box(rng, 2 * n + 1)
    lo[-1], hi[-1] = sorted(rng.uniform(0, 1, 2))
    for method in ("ibp", "linear"):
        assert containment_violations(q, lo, hi, p, rng, 200, method) == 0


@pytest.mark.parametrize("seed", range(40))
def test_linear_never_looser_than_ibp(seed):
    rng = np.random.default_rng(seed)
    g, n, n_p = random_graph(rng)
    p = rng.uniform(-1, 1, n_p)
    lo, hi = random_box(rng, n)
    ilo, ihi = propagate_box(g, lo, hi, p)
    llo, lhi = output_bounds(g, lo, hi, p, "linear")
    assert np.all(llo >= ilo) and np.all(lhi <= ihi)


@given(st.integers(0, 100_000))
def test_bisection_does_not_widen(seed):
    rng = np.random.default_rng(seed)
    g, n, n_p = random_graph(rng)
    p = rng.uniform(-1, 1, n_p)
    lo, hi = random_box(rng, n)
    plo, phi = propagate_box(g, lo, hi, p)
    k = int(np.argmax(hi - lo))
    mid = 0.5 * (lo[k] + hi[k])
    a_hi = hi.copy()
    a_hi[k] = mid
    b_lo = lo.copy()
    b_lo[k] = mid
    clo, chi = propagate_box(g, np.vstack([lo, b_lo]), np.vstack([a_hi, hi]), p)
    fin = np.isfinite(phi - plo)
    width = (phi - plo)[fin]
    union = (chi.max(0, keepdims=True) - clo.min(0, keepdims=True))[fin]
    assert np.all(union <= width + 1e-12 * (1 + np.abs(width)))
