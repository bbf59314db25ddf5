"""Certificates and the scalar conditions checked on them.

* :class:`MetricNet` -- ``M(x) = mu I + R(x)^T R(x)`` with ``R`` an MLP.
* :class:`LyapunovFn` -- quadratic ``x^T P x`` or a scalar MLP, with a
  levelset threshold ``rho_V`` and decay rate ``kappa``.
* :class:`ContractionTask` -- bundles system, metric, Lyapunov function,
  contraction rate ``rho_c`` and perturbation radius ``eps``.

``G(x, d) = (f(x)-f(x+d))^T M(f(x)) (f(x)-f(x+d)) - rho_c^2 d^T M(x) d`` is
always assembled in the expanded sum-of-squares form

    mu |df|^2 + |R(f(x)) df|^2 - rho_c^2 (mu |d|^2 + |R(x) d|^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .box import IntervalBox
from .nnet.graph import ExprGraph, GraphBuilder, Ref, eval_graph
from .nnet.mlp import Layer, Mlp, WeightFileError, add_mlp, dumps_json, loads_json
from .systems import ClosedLoopSystem

METRIC_PREFIX = "R"


@dataclass(frozen=True)
class MetricNet:
    mu: float
    net: Mlp
    rows: int
    n: int

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.net.input_dim != self.n or self.net.output_dim != self.rows * self.n:
            raise ValueError(
                f"R must map {self.n} -> {self.rows}x{self.n}, got "
                f"{self.net.input_dim} -> {self.net.output_dim}"
            )

    @classmethod
    def init(cls, n, mu=0.1, hidden=(32, 32), act="tanh", rows=None, rng=None, scale=1.0):
        rows = n if rows is None else rows
        net = Mlp.init([n, *hidden, rows * n], act=act, rng=rng, scale=scale)
        return cls(float(mu), net, rows, n)

    @property
    def theta(self) -> np.ndarray:
        return self.net.flat()

    def with_theta(self, theta) -> MetricNet:
        return replace(self, net=self.net.with_flat(theta))

    def r_matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.net(x)
        return out.reshape(x.shape[:-1] + (self.rows, self.n))

    def add_quad(self, b: GraphBuilder, x: Ref, v: Ref) -> Ref:
        """Graph nodes for ``v^T M(x) v = mu |v|^2 + |R(x) v|^2``."""
        r = add_mlp(b, x, self.net, prefix=METRIC_PREFIX)
        rv = b.matvec(r, v, self.rows)
        return b.scale(b.sumsq(v), self.mu) + b.sumsq(rv)

    def to_json(self, header: dict | None = None) -> dict:
        obj = self.net.to_json()
        obj["rows"] = self.rows
        obj["header"] = {"mu": self.mu, **(header or {})}
        return obj

    @classmethod
    def from_json(cls, obj) -> MetricNet:
        try:
            mu = float(obj["header"]["mu"])
        except (KeyError, TypeError, ValueError):
            raise WeightFileError("metric file needs a header with 'mu'") from None
        net = Mlp.from_json(obj)
        rows = int(obj.get("rows", net.output_dim // net.input_dim))
        return cls(mu, net, rows, net.input_dim)


def metric_eval(m: MetricNet, x) -> np.ndarray:
    """``M(x)``; batched inputs give a ``(..., n, n)`` stack."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.n:
        raise ValueError(f"state of size {x.shape[-1]} for a {m.n}-dim metric")
    r = m.r_matrix(x)
    return m.mu * np.eye(m.n) + np.swapaxes(r, -1, -2) @ r


def constant_metric_from(p, mu: float) -> MetricNet:
    """Constant metric ``M = P`` written as ``mu I + R^T R`` with a bias-only ``R``."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if p.shape != (n, n) or not np.allclose(p, p.T, atol=1e-12 * max(1.0, np.abs(p).max())):
        raise ValueError("P must be a symmetric square matrix")
    lam, vec = np.linalg.eigh(0.5 * (p + p.T) - mu * np.eye(n))
    if lam.min() < -1e-12 * max(1.0, abs(lam).max()):
        raise ValueError(f"P - mu I is not positive semidefinite (min eigenvalue {lam.min():.3g})")
    root = (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T
    layer = Layer(np.zeros((n * n, n)), root.ravel(), "id")
    return MetricNet(float(mu), Mlp((layer,)), n, n)


@dataclass(frozen=True)
class LyapunovFn:
    """``V(x) = x^T P x`` (``form='quadratic'``) or ``V(x) = net(x)`` (``'neural'``)."""

    form: str
    rho_V: float
    kappa: float
    P: np.ndarray | None = None
    net: Mlp | None = None

    def __post_init__(self):
        if self.form == "quadratic":
            p = np.asarray(self.P, dtype=float)
            if p.ndim != 2 or p.shape[0] != p.shape[1] or not np.allclose(p, p.T):
                raise ValueError("quadratic Lyapunov needs a symmetric P")
            if np.linalg.eigvalsh(p).min() <= 0:
                raise ValueError("P must be positive definite")
            object.__setattr__(self, "P", 0.5 * (p + p.T))
        elif self.form == "neural":
            if self.net is None or self.net.output_dim != 1:
                raise ValueError("neural Lyapunov needs a scalar-output MLP")
        else:
            raise ValueError(f"unknown Lyapunov form {self.form!r}")
        if self.rho_V < 0:
            raise ValueError("rho_V must be non-negative")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")

    @classmethod
    def quadratic(cls, p, rho_V=0.0, kappa=0.01) -> LyapunovFn:
        return cls("quadratic", float(rho_V), float(kappa), P=np.asarray(p, dtype=float))

    @property
    def n(self) -> int:
        return self.P.shape[0] if self.form == "quadratic" else self.net.input_dim

    def with_level(self, rho_V: float) -> LyapunovFn:
        return replace(self, rho_V=float(rho_V))

    @cached_property
    def _chol_t(self) -> np.ndarray:
        return np.linalg.cholesky(self.P).T

    def add_value(self, b: GraphBuilder, x: Ref) -> Ref:
        if self.form == "quadratic":
            # |L^T x|^2 keeps the enclosure non-negative
            return b.sumsq(b.matvec(b.const(self._chol_t.ravel()), x, self.n))
        return add_mlp(b, x, self.net)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.form == "quadratic":
            return np.einsum("...i,ij,...j->...", x, self.P, x)
        return self.net(x)[..., 0]

    def header(self) -> dict:
        return {"rho_V": self.rho_V, "kappa": self.kappa}

    def to_json(self) -> dict:
        if self.form == "quadratic":
            return {"form": "quadratic", "P": self.P.tolist(), "header": self.header()}
        obj = {"form": "neural", **self.net.to_json(), "header": self.header()}
        return obj

    @classmethod
    def from_json(cls, obj) -> LyapunovFn:
        try:
            head = obj["header"]
            rho, kappa = float(head["rho_V"]), float(head["kappa"])
            form = obj.get("form", "quadratic")
        except (KeyError, TypeError, ValueError):
            raise WeightFileError("Lyapunov file needs a header with rho_V and kappa") from None
        if form == "quadratic":
            p = np.asarray(obj["P"], dtype=float)
            if not np.all(np.isfinite(p)):
                raise WeightFileError("non-finite entry in P")
            return cls("quadratic", rho, kappa, P=p)
        return cls("neural", rho, kappa, net=Mlp.from_json(obj))


def lyap_eval(V: LyapunovFn, x) -> np.ndarray:
    return V(x)


def f_residual(V: LyapunovFn, sys: ClosedLoopSystem, x) -> np.ndarray:
    """``V(f(x)) - (1 - kappa) V(x)``; negative means one-step decay."""
    x = np.asarray(x, dtype=float)
    return V(sys(x)) - (1.0 - V.kappa) * V(x)


@dataclass(frozen=True)
class ContractionTask:
    system: ClosedLoopSystem
    metric: MetricNet
    lyapunov: LyapunovFn | None
    rho_c: float = 0.99
    eps: float = 0.05
    box: IntervalBox | None = field(default=None)

    def __post_init__(self):
        if not 0 < self.rho_c < 1:
            raise ValueError("contraction rate must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("perturbation radius must be positive")
        if self.metric.n != self.system.n:
            raise ValueError("metric and system dimensions differ")
        if self.box is None:
            object.__setattr__(self, "box", self.system.box)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def rho_V(self) -> float:
        return np.inf if self.lyapunov is None else self.lyapunov.rho_V

    def with_metric(self, metric: MetricNet) -> ContractionTask:
        return replace(self, metric=metric)

    def with_level(self, rho_V: float) -> ContractionTask:
        return replace(self, lyapunov=self.lyapunov.with_level(rho_V))

    def header(self) -> dict:
        head = {"mu": self.metric.mu, "rho_c": self.rho_c, "epsilon": self.eps}
        if self.lyapunov is not None:
            head.update(self.lyapunov.header())
        return head

    # graphs over the joint input (x, delta); parameters are the metric weights
    def _g_nodes(self, b: GraphBuilder, z: Ref):
        n = self.n
        x, d = z[0:n], z[n : 2 * n]
        xd = b.add(x, d)
        fx = self.system.build_map(b, x)
        fxd = self.system.build_map(b, xd)
        df = b.sub(fx, fxd)
        lhs = self.metric.add_quad(b, fx, df)
        rhs = self.metric.add_quad(b, x, d)
        return b.sub(lhs, b.scale(rhs, self.rho_c**2)), x, xd

    @cached_property
    def g_graph(self) -> ExprGraph:
        b = GraphBuilder()
        z = b.input(2 * self.n)
        g, _, _ = self._g_nodes(b, z)
        return b.build(g)

    def violation_graph(self, rho_V: float | None = None, hinge: float | None = None) -> ExprGraph:
        """``min(G, rho - V(x), rho - V(x + d))``, optionally ``max(., -hinge)``."""
        rho = self.rho_V if rho_V is None else rho_V
        b = GraphBuilder()
        z = b.input(2 * self.n)
        g, x, xd = self._g_nodes(b, z)
        if self.lyapunov is not None and np.isfinite(rho):
            vx = self.lyapunov.add_value(b, x)
            vxd = self.lyapunov.add_value(b, xd)
            r = b.const([rho])
            g = b.min(g, b.min(b.sub(r, vx), b.sub(r, vxd)))
        if hinge is not None:
            g = b.neg(b.min(b.neg(g), b.const([hinge])))
        return b.build(g)


def _joint(x, d):
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    x, d = np.broadcast_arrays(x, d)
    return np.concatenate([x, d], axis=-1)


def g_value(t: ContractionTask, x, d) -> np.ndarray:
    z = _joint(x, d)
    out = eval_graph(t.g_graph, z.reshape(-1, 2 * t.n), t.metric.theta)[:, 0]
    return out.reshape(z.shape[:-1]) if z.ndim > 1 else out[0]


def g_value_quadform(t: ContractionTask, x, d) -> np.ndarray:
    """Direct quadratic-form evaluation of G (oracle for the expanded form)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    fx = t.system(x)
    df = fx - t.system(x + d)
    m1 = metric_eval(t.metric, fx)
    m0 = metric_eval(t.metric, x)
    return (np.einsum("bi,bij,bj->b", df, m1, df)
            - t.rho_c**2 * np.einsum("bi,bij,bj->b", d, m0, d))


def violation_loss(t: ContractionTask, x, d, rho_V: float | None = None) -> np.ndarray:
    z = _joint(x, d)
    graph = t.violation_graph(rho_V)
    out = eval_graph(graph, z.reshape(-1, 2 * t.n), t.metric.theta)[:, 0]
    return out.reshape(z.shape[:-1]) if z.ndim > 1 else out[0]


def save_json(path, obj) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, dumps_json(obj))


def load_json(path):
    return loads_json(Path(path).read_text())
