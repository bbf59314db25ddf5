# %% [markdown]
# # Pendulum reference weights
#
# The pendulum benchmark needs a state-feedback controller and a Lyapunov
# function supplied as files.  This script builds both from scratch:
#
# * the controller is a saturated discrete LQR gain written exactly as a
#   two-neuron relu network, `clip(K x, -a, a) = relu(K x + a) - relu(K x - a) - a`;
# * the Lyapunov function is the quadratic synthesized (and certified) by
#   `synth_quadratic_lyapunov` for the resulting closed loop.
#
# Run it from the repository root to regenerate `src/contractify/data/`.

# %%
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_are

from contractify.box import IntervalBox
from contractify.certificates import save_json
from contractify.cegis import synth_quadratic_lyapunov
from contractify.nnet.mlp import Layer, Mlp, save_weights
from contractify.systems import DEFAULT_H, PENDULUM_DEFAULTS, make_pendulum

SATURATION = 1.0
BOX = IntervalBox.symmetric([1.0, 2.0])
KAPPA_FRAC = 0.8
OUT = Path(__file__).resolve().parents[1] / "src" / "contractify" / "data"

# %% Euler-discretized linearization about the upright equilibrium
p = PENDULUM_DEFAULTS
inertia = p["m"] * p["l"] ** 2
a_c = np.array([[0.0, 1.0], [p["g"] / p["l"], -p["beta"] / inertia]])
b_c = np.array([[0.0], [1.0 / inertia]])
a_d = np.eye(2) + DEFAULT_H * a_c
b_d = DEFAULT_H * b_c
x_are = solve_discrete_are(a_d, b_d, np.eye(2), np.eye(1))
gain = -np.linalg.solve(np.eye(1) + b_d.T @ x_are @ b_d, b_d.T @ x_are @ a_d)
print("LQR gain", gain, "closed-loop |eig|", np.abs(np.linalg.eigvals(a_d + b_d @ gain)))

# %% the controller as a relu network
policy = Mlp((
    Layer(np.vstack([gain, gain]), np.array([SATURATION, -SATURATION]), "relu"),
    Layer(np.array([[1.0, -1.0]]), np.array([-SATURATION]), "id"),
))
probe = np.random.default_rng(0).uniform(-3, 3, size=(1000, 2))
assert np.allclose(policy(probe)[:, 0], np.clip(probe @ gain[0], -SATURATION, SATURATION))

# %% certified quadratic Lyapunov function
system = make_pendulum(None, policy, BOX)
V, cert = synth_quadratic_lyapunov(system, BOX, kappa_frac=KAPPA_FRAC, tol=1e-3)
print("certified rho_V", V.rho_V, "kappa", V.kappa)

# %%
save_weights(policy, OUT / "pendulum_controller.json")
save_json(OUT / "pendulum_lyapunov.json", {**V.to_json(), "box": BOX.to_json()})
