"""Discrete-time closed-loop systems built from expression-graph primitives.

Every system is the explicit Euler map ``f(x) = x + h * rhs(x, pi(x))``; the
right-hand side is written once with :class:`~contractify.nnet.GraphBuilder`
operations and shared by simulation, training and bound propagation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .box import IntervalBox
from .nnet.graph import ExprGraph, GraphBuilder, Ref, eval_graph
from .nnet.mlp import Mlp, add_mlp

RhsBuilder = Callable[[GraphBuilder, Ref], Ref]

DEFAULT_H = 0.05
PENDULUM_DEFAULTS = {"m": 0.15, "l": 0.5, "g": 9.81, "beta": 0.1}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClosedLoopSystem:
    name: str
    n: int
    h: float
    box: IntervalBox
    rhs: RhsBuilder = field(repr=False, compare=False)
    policy: Mlp | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size must be positive")
        if self.box.dim != self.n:
            raise ValueError(f"box has {self.box.dim} dims, system has {self.n}")
        if np.any(self.box.lo >= self.box.hi):
            raise ValueError("domain box must be non-degenerate")

    def build_map(self, b: GraphBuilder, x: Ref) -> Ref:
        """Append ``f(x) = x + h * rhs(x)`` to ``b``."""
        return b.add(x, b.scale(self.rhs(b, x), self.h))

    @cached_property
    def map_graph(self) -> ExprGraph:
        b = GraphBuilder()
        x = b.input(self.n)
        return b.build(self.build_map(b, x))

    @cached_property
    def rhs_graph(self) -> ExprGraph:
        b = GraphBuilder()
        x = b.input(self.n)
        return b.build(self.rhs(b, x))

    def rhs_value(self, x) -> np.ndarray:
        return eval_graph(self.rhs_graph, x)

    def __call__(self, x) -> np.ndarray:
        """Vectorized map evaluation without finiteness checks."""
        return eval_graph(self.map_graph, x)


def step(sys: ClosedLoopSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.n:
        raise ValueError(f"state of size {x.shape[-1]} for a {sys.n}-dim system")
    with np.errstate(all="ignore"):
        y = sys(x)
    if not np.all(np.isfinite(y)):
        raise SimulationError(f"non-finite state after one step of {sys.name}")
    return y


def simulate(sys: ClosedLoopSystem, x0, k: int) -> np.ndarray:
    """Trajectory ``[x0, f(x0), ..., f^k(x0)]`` as a ``(k+1, n)`` array."""
    if k < 0:
        raise ValueError("number of steps must be non-negative")
    traj = np.empty((k + 1, sys.n))
    traj[0] = x0
    for i in range(k):
        try:
            traj[i + 1] = step(sys, traj[i])
        except SimulationError as exc:
            raise SimulationError(f"step {i}: {exc}") from None
    return traj


def write_trajectory_csv(path, traj) -> None:
    from .io import atomic_write_text
    import io as _io

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"x{i + 1}" for i in range(traj.shape[1])])
    for k, row in enumerate(traj):
        w.writerow([k] + [repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# benchmark zoo


def make_vdp(mu: float = 3.0, h: float = DEFAULT_H, box=None) -> ClosedLoopSystem:
    """Reverse-time Van der Pol oscillator."""
    mu = float(mu)

    def rhs(b, x):
        x1, x2 = x[0], x[1]
        damp = b.scale(b.sub(b.const([1.0]), b.square(x1)), mu)
        return b.concat(-x2, x1 - b.mul(damp, x2))

    box = box or IntervalBox([-1.2, -2.3], [1.2, 2.3])
    return ClosedLoopSystem("vdp", 2, h, box, rhs, params={"mu": mu})


def make_poly(h: float = DEFAULT_H, box=None) -> ClosedLoopSystem:
    def rhs(b, x):
        x1, x2 = x[0], x[1]
        return b.concat(x2, b.scale(x1, -2.0) + b.scale(b.power(x1, 3), 1.0 / 3.0) - x2)

    box = box or IntervalBox([-4.0, -4.0], [4.0, 4.0])
    return ClosedLoopSystem("poly", 2, h, box, rhs)


def make_power(delta: float = math.pi / 3, h: float = DEFAULT_H, box=None) -> ClosedLoopSystem:
    """Two-machine power system with load angle ``delta``."""
    delta = float(delta)
    s0 = math.sin(delta)

    def rhs(b, x):
        x1, x2 = x[0], x[1]
        swing = b.sin(x1 + delta) - s0
        return b.concat(x2, b.scale(x2, -0.5) - swing)

    box = box or IntervalBox([-1.0, -1.0], [1.0, 1.0])
    return ClosedLoopSystem("power", 2, h, box, rhs, params={"delta": delta})


def make_pendulum(params: dict | None, policy: Mlp | None, box, h: float = DEFAULT_H):
    """Inverted pendulum ``(theta, theta_dot)`` under an MLP state-feedback policy."""
    if policy is None:
        raise ValueError("the pendulum needs a state-feedback policy")
    if policy.input_dim != 2 or policy.output_dim != 1:
        raise ValueError("pendulum policy must map 2 states to 1 torque")
    if box is None:
        raise ValueError("the pendulum domain box must be supplied")
    p = dict(PENDULUM_DEFAULTS)
    p.update(params or {})
    m, l, g, beta = (float(p[k]) for k in ("m", "l", "g", "beta"))
    inertia = m * l * l

    def rhs(b, x):
        th, om = x[0], x[1]
        u = add_mlp(b, x, policy)
        acc = b.scale(om, -beta / inertia) + b.scale(b.sin(th), g / l) + b.scale(u, 1.0 / inertia)
        return b.concat(om, acc)

    if not isinstance(box, IntervalBox):
        box = IntervalBox(*box)
    return ClosedLoopSystem("pendulum", 2, h, box, rhs, policy=policy, params=p)


def make_linear(a, n: int = 2, box=None, name: str = "linear") -> ClosedLoopSystem:
    """Synthetic map ``f(x) = A x`` written with h = 1; scalar ``a`` means ``a * I_n``."""
    a = np.asarray(a, dtype=float)
    a = a * np.eye(n) if a.ndim == 0 else np.atleast_2d(a)
    n = a.shape[0]
    if box is None:
        box = IntervalBox(-np.ones(n), np.ones(n))
    elif not isinstance(box, IntervalBox):
        box = IntervalBox(*box)
    shift = (a - np.eye(n)).ravel()

    def rhs(b, x):
        return b.matvec(b.const(shift), x, n)

    return ClosedLoopSystem(name, n, 1.0, box, rhs, params={"A": a.tolist()})


def make_system(kind: str, **kw) -> ClosedLoopSystem:
    factories = {"vdp": make_vdp, "poly": make_poly, "power": make_power,
                 "pendulum": make_pendulum, "linear": make_linear}
    if kind not in factories:
        raise ValueError(f"unknown system {kind!r}; choose from {sorted(factories)}")
    return factories[kind](**kw)
