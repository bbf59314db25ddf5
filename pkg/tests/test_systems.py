import math

import numpy as np
import pytest

from contractify.box import IntervalBox
from contractify.nnet.mlp import Mlp
from contractify.reference import load_pendulum
from contractify.systems import (
    SimulationError, make_linear, make_pendulum, make_poly, make_power, make_system, make_vdp,
    simulate, step, write_trajectory_csv,
)


# dependency-free scalar re-implementations of each right-hand side
def vdp_rhs(x1, x2, mu=3.0):
    return -x2, x1 - mu * (1 - x1 * x1) * x2


def poly_rhs(x1, x2):
    return x2, -2 * x1 + x1**3 / 3 - x2


def power_rhs(x1, x2, d=math.pi / 3):
    return x2, -0.5 * x2 - (math.sin(x1 + d) - math.sin(d))


@pytest.mark.parametrize("sys,rhs", [(make_vdp(), vdp_rhs), (make_poly(), poly_rhs),
                                     (make_power(), power_rhs)])
def test_step_matches_scalar_oracle(sys, rhs, rng):
    xs = sys.box.sample(rng, 1000)
    got = step(sys, xs)
    want = np.array([[a + sys.h * da, b + sys.h * db]
                     for (a, b), (da, db) in ((x, rhs(*x)) for x in xs)])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_vdp_values():
    sys = make_vdp(3)
    assert sys.h == 0.05
    assert np.array_equal(step(sys, [0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_allclose(step(sys, [1.0, 1.0]), [0.95, 1.05], atol=1e-15)


def test_equilibria():
    for sys in (make_vdp(), make_poly(), make_power()):
        assert np.max(np.abs(sys.rhs_value([0.0, 0.0]))) <= 1e-9


def test_power_rhs_value():
    got = make_power(math.pi / 3).rhs_value([0.1, 0.0])
    want = -(math.sin(0.1 + math.pi / 3) - math.sin(math.pi / 3))
    assert got[0] == 0.0
    assert got[1] == pytest.approx(want, abs=1e-15)
    assert got[1] == pytest.approx(-0.045590, abs=1e-6)


def test_default_boxes():
    assert make_vdp().box.to_json() == {"lo": [-1.2, -2.3], "hi": [1.2, 2.3]}
    assert make_poly().box.to_json() == {"lo": [-4.0, -4.0], "hi": [4.0, 4.0]}
    assert make_power().box.to_json() == {"lo": [-1.0, -1.0], "hi": [1.0, 1.0]}


def test_simulate_linear():
    sys = make_linear(0.5)
    assert simulate(sys, [1.0, 0.0], 0).tolist() == [[1.0, 0.0]]
    assert simulate(sys, [1.0, 0.0], 2).tolist() == [[1, 0], [0.5, 0], [0.25, 0]]


def test_vdp_converges_from_inside_region():
    traj = simulate(make_vdp(), [0.1, 0.1], 400)
    assert np.linalg.norm(traj[-1]) < 1e-2


def test_divergence_reports_index():
    sys = make_linear(1e200, n=1)
    with pytest.raises(SimulationError, match="step 1"):
        simulate(sys, [1.0], 3)


def test_pendulum_needs_policy():
    with pytest.raises(ValueError, match="policy"):
        make_pendulum(None, None, IntervalBox([-1, -1], [1, 1]))
    with pytest.raises(ValueError):
        make_pendulum(None, Mlp.init([3, 1]), IntervalBox([-1, -1], [1, 1]))


def test_bundled_pendulum_equilibrium():
    sys, V = load_pendulum()
    assert sys.n == 2 and V.n == 2
    # reported rather than asserted for arbitrary policies; the bundled one fixes the origin
    assert np.max(np.abs(sys.rhs_value([0.0, 0.0]))) <= 1e-9


def test_unknown_system():
    with pytest.raises(ValueError, match="unknown system"):
        make_system("lorenz")


def test_trajectory_csv(tmp_path):
    traj = simulate(make_linear(0.5), [1.0, 2.0], 3)
    write_trajectory_csv(tmp_path / "t.csv", traj)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,x1,x2"
    assert lines[-1] == "3,0.125,0.25"
