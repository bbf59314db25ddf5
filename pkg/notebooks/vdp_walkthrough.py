# %% [markdown]
# # Van der Pol walkthrough
#
# From a closed-loop map to a certified contraction region, using the
# library directly instead of the CLI.  Training here uses a small network
# and few rounds so the script finishes in a couple of minutes; the shipped
# `configs/vdp.json` uses the full defaults.

# %%
import time

import numpy as np

from contractify.bnb import Budget, contraction_template, max_levelset, verify_contraction
from contractify.cegis import TrainConfig, synth_quadratic_lyapunov, train_metric
from contractify.certificates import ContractionTask, constant_metric_from
from contractify.pipeline import grid_values, sublevel_area_ratio
from contractify.systems import make_vdp, simulate

sys = make_vdp()
print(sys.box, "h =", sys.h)

# %% [markdown]
# A trajectory from inside the box settles at the origin.

# %%
traj = simulate(sys, [0.3, -0.4], 200)
print(traj[[0, 50, 100, 200]])

# %% [markdown]
# ## Forward-invariant region
#
# A quadratic Lyapunov function from the linearization, with its level
# pushed up by bisection until the invariance verifier stops proving it.

# %%
V, inv_cert = synth_quadratic_lyapunov(sys, kappa_frac=0.945)
print("rho_V =", V.rho_V, inv_cert["status"])

# %% [markdown]
# ## Constant-metric baseline
#
# `M = P` from the Lyapunov function.  The largest sublevel set on which it
# proves contraction gives the baseline ratio.

# %%
lam = np.linalg.eigvalsh(V.P).min()
const = ContractionTask(sys, constant_metric_from(V.P, min(0.1, 0.5 * lam)), V, rho_c=0.99)
t0 = time.perf_counter()
rho, _, _ = max_levelset(contraction_template(const, Budget(time_limit=300)), 0.0, V.rho_V,
                         0.02 * V.rho_V)
r = sublevel_area_ratio(V, sys.box, rho, V.rho_V, 200_000) if rho else 0.0
print(f"constant metric: rho* = {rho:.4g}, r = {100 * r:.1f}% ({time.perf_counter() - t0:.0f} s)")

# %% [markdown]
# ## A learned metric
#
# Counterexample-guided training on growing sublevel sets.

# %%
cfg = TrainConfig(rho_c=0.99, hidden=(16, 16), epochs=20, max_rounds=10, batch=256,
                  schedule=(0.25, 0.5, 0.75, 1.0))
metric, log = train_metric(sys, V, cfg)
print(log.rows[-1])

# %%
task = ContractionTask(sys, metric, V, rho_c=0.99)
res = verify_contraction(task, inv_cert, Budget(time_limit=300))
print("full level:", res.status, res.stats.get("boxes"), "boxes")
if res.witness is not None:
    print("witness x =", res.witness["x"], "delta =", res.witness["delta"])

# %% [markdown]
# ## Grid diagnostic
#
# `minG >= 0` means no sampled perturbation expands the metric distance at
# that cell.  Print the raster coarsely: `#` for contracting cells.

# %%
xs, vals, shape = grid_values(task, 32)
img = (vals.reshape(shape) >= 0)[::-1]
print("\n".join("".join("#" if c else "." for c in row) for row in img))
