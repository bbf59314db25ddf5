"""Counterexample-guided metric training and quadratic Lyapunov synthesis."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .bnb import Budget, invariance_certificate, invariance_template, max_levelset
from .box import IntervalBox
from .certificates import ContractionTask, LyapunovFn, MetricNet
from .io import atomic_write_text
from .nnet.graph import forward, vjp
from .systems import ClosedLoopSystem


class SynthesisError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    """Divergence during training; carries the last finite metric and the log."""

    def __init__(self, msg, metric=None, log=None):
        super().__init__(msg)
        self.metric = metric
        self.log = log


# ---------------------------------------------------------------------------
# quadratic Lyapunov synthesis


def jacobian_at_origin(sys: ClosedLoopSystem, step: float = 1e-5, check: bool = True) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at 0, cross-checked against step ``10 * step``."""

    def jac(hs):
        e = np.eye(sys.n) * hs
        return ((sys(e) - sys(-e)) / (2 * hs)).T

    a = jac(step)
    if check and not np.allclose(a, jac(10 * step), rtol=0, atol=1e-6):
        raise SynthesisError("the map does not look differentiable at the origin")
    return a


def synth_quadratic_lyapunov(sys: ClosedLoopSystem, box: IntervalBox | None = None,
                             kappa: float | None = None, q_scale: float | None = None,
                             kappa_frac: float = 0.9, rho_hi: float | None = None,
                             tol: float = 1e-3, budget: Budget | None = None):
    """Quadratic ``V = x^T P x`` with the largest certified invariant level.

    ``P`` solves ``A^T P A - P = -Q`` with ``A`` the Jacobian at the origin and
    ``Q = q_scale * I`` (default ``q_scale = h``, which keeps ``P`` on the
    scale of the continuous-time Lyapunov matrix).  ``kappa`` defaults to
    ``kappa_frac`` times the largest decay rate the linearization allows.

    Returns ``(V, certificate_dict)``; ``V.rho_V`` is the certified level.
    """
    box = box or sys.box
    a = jacobian_at_origin(sys)
    radius = float(np.max(np.abs(np.linalg.eigvals(a))))
    if radius >= 1.0:
        raise SynthesisError(f"linearization not Schur stable (spectral radius {radius:.6g})")
    q = sys.h if q_scale is None else q_scale
    p = solve_discrete_lyapunov(a.T, q * np.eye(sys.n))
    p = 0.5 * (p + p.T)
    # decay allowed by the linearization: V(Ax) <= (1 - k_lin) V(x)
    k_lin = q / float(np.linalg.eigvalsh(p).max())
    if kappa is None:
        kappa = kappa_frac * k_lin
    V = LyapunovFn.quadratic(p, 0.0, kappa)
    if rho_hi is None:
        # the smallest level whose sublevel set covers the whole box
        corners = np.array(np.meshgrid(*zip(box.lo, box.hi))).reshape(sys.n, -1).T
        rho_hi = float(V(corners).max())
    tmpl = invariance_template(sys, V, box, budget)
    rho, res, probes = max_levelset(tmpl, 0.0, rho_hi, tol)
    V = V.with_level(rho)
    cert = invariance_certificate(sys, V, res, box)
    cert["synthesis"] = {"A": a.tolist(), "Q_scale": q, "kappa_lin": k_lin,
                         "probes": [[r, s] for r, s in probes]}
    return V, cert


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    pgd_steps: int = 20
    pgd_step: float | None = None  # defaults to eps / 4
    epochs: int = 50
    batch: int = 512
    schedule: tuple = tuple(round(0.1 * k, 10) for k in range(1, 11))
    eps: float = 0.05
    rho_c: float = 0.99
    mu: float = 0.1
    hidden: tuple = (32, 32)
    act: str = "tanh"
    rows: int | None = None
    seed: int = 0
    hinge: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    max_rounds: int = 40
    patience: int = 5
    dataset_cap: int = 100_000
    minibatch: int | None = 4096
    init_scale: float = 1.0

    def __post_init__(self):
        if not self.lr > 0 or self.pgd_steps < 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("need lr > 0, pgd_steps >= 0, epochs >= 1, batch >= 1")
        if self.pgd_step is not None and not self.pgd_step > 0:
            raise ValueError("PGD step must be positive")
        s = np.asarray(self.schedule, dtype=float)
        if s.size == 0 or np.any(np.diff(s) <= 0) or s[0] <= 0 or s[-1] > 1:
            raise ValueError("scale schedule must be strictly increasing in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.rho_c < 1 or not self.eps > 0 or not self.mu > 0:
            raise ValueError("need 0 < rho_c < 1, eps > 0, mu > 0")

    @property
    def beta(self) -> float:
        return self.eps / 4 if self.pgd_step is None else self.pgd_step

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["schedule"] = list(self.schedule)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        obj = dict(obj)
        for k in ("schedule", "hidden"):
            if k in obj:
                obj[k] = tuple(obj[k])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class CexDataset:
    """Mined ``(x, delta)`` pairs, FIFO-capped."""

    n: int
    cap: int = 100_000
    x: np.ndarray = field(default=None)
    d: np.ndarray = field(default=None)
    value: np.ndarray = field(default=None)

    def __post_init__(self):
        self.clear()

    def clear(self):
        self.x = np.zeros((0, self.n))
        self.d = np.zeros((0, self.n))
        self.value = np.zeros(0)

    def __len__(self):
        return len(self.x)

    def add(self, x, d, value):
        self.x = np.concatenate([self.x, x])[-self.cap :]
        self.d = np.concatenate([self.d, d])[-self.cap :]
        self.value = np.concatenate([self.value, value])[-self.cap :]


def pgd_mine(task: ContractionTask, cfg: TrainConfig, batch: int, rng, rho_V: float | None = None,
             graph=None, steps: int | None = None):
    """Projected ascent of the violation loss from uniform random starts.

    Returns ``(x, delta, loss)``; every iterate stays in ``B x B(0; eps)``.
    """
    n = task.n
    box = task.box
    eps = task.eps
    graph = graph or task.violation_graph(rho_V)
    theta = task.metric.theta
    steps = cfg.pgd_steps if steps is None else steps
    x = box.sample(rng, batch)
    d = rng.uniform(-eps, eps, size=(batch, n))
    beta = cfg.beta
    for _ in range(steps):
        z = np.concatenate([x, d], axis=1)
        vals = forward(graph, z, theta)
        cot, _ = vjp(graph, vals, np.ones((batch, 1)))
        # input steps scaled by the box size; delta steps by beta
        x = box.project(x + beta * box.width / (2 * eps) * np.sign(cot[:, :n]))
        d = np.clip(d + beta * np.sign(cot[:, n:]), -eps, eps)
        if not (np.all(box.contains(x)) and np.all(np.abs(d) <= eps)):
            raise TrainingError("PGD iterate left the projection set")
    z = np.concatenate([x, d], axis=1)
    loss = forward(graph, z, theta)[graph.outputs[0]][:, 0]
    return x, d, loss


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, theta, g):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, g):
        return theta - self.lr * g


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["iteration", "scale", "max_violation", "mean_loss", "dataset_size"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["iteration"], repr(float(r["scale"])), repr(float(r["max_violation"])),
                        repr(float(r["mean_loss"])), r["dataset_size"]])
        return buf.getvalue()

    def save(self, path):
        atomic_write_text(path, self.to_csv())


def train_metric(sys: ClosedLoopSystem, V: LyapunovFn, cfg: TrainConfig,
                 metric: MetricNet | None = None, box: IntervalBox | None = None,
                 callback=None):
    """Counterexample-guided training of ``M(x) = mu I + R(x)^T R(x)``.

    For each scale ``s`` of the schedule the level is ``s * rho_V``: the
    dataset is reset, then rounds of PGD mining alternate with ``epochs``
    descent steps on the mean of ``max(L_violate, -hinge)`` over the dataset.
    A scale ends after ``patience`` consecutive clean mining rounds or
    ``max_rounds`` rounds.  Returns ``(metric, log)``.
    """
    rng = np.random.default_rng(cfg.seed)
    if metric is None:
        metric = MetricNet.init(sys.n, mu=cfg.mu, hidden=cfg.hidden, act=cfg.act, rows=cfg.rows,
                                rng=rng, scale=cfg.init_scale)
    task = ContractionTask(sys, metric, V, rho_c=cfg.rho_c, eps=cfg.eps, box=box)
    theta = metric.theta.copy()
    opt = _Adam(cfg.lr) if cfg.optimizer == "adam" else _Sgd(cfg.lr)
    log = TrainLog()
    data = CexDataset(sys.n, cfg.dataset_cap)
    it = 0
    last_good = theta.copy()
    for scale in cfg.schedule:
        level = scale * V.rho_V
        mine_graph = task.violation_graph(level)
        train_graph = task.violation_graph(level, hinge=cfg.hinge)
        data.clear()
        clean = 0
        for _ in range(cfg.max_rounds):
            cur = task.with_metric(metric.with_theta(theta))
            x, d, loss = pgd_mine(cur, cfg, cfg.batch, rng, graph=mine_graph)
            data.add(x, d, loss)
            worst = float(loss.max())
            if not np.isfinite(worst):
                raise TrainingError(f"non-finite violation at iteration {it}; "
                                    "last finite checkpoint kept",
                                    metric.with_theta(last_good), log)
            clean = clean + 1 if worst <= 0 else 0
            mean = 0.0
            z_all = np.concatenate([data.x, data.d], axis=1)
            for _ in range(cfg.epochs):
                if cfg.minibatch and len(z_all) > cfg.minibatch:
                    z = z_all[rng.choice(len(z_all), cfg.minibatch, replace=False)]
                else:
                    z = z_all
                vals = forward(train_graph, z, theta)
                out = vals[train_graph.outputs[0]][:, 0]
                mean = float(out.mean())
                if not np.isfinite(mean):
                    raise TrainingError(f"non-finite loss at iteration {it}; "
                                        "last finite checkpoint kept",
                                        metric.with_theta(last_good), log)
                _, g = vjp(train_graph, vals, np.full((len(z), 1), 1.0 / len(z)))
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * theta
                new = opt.step(theta, g)
                if not np.all(np.isfinite(new)):
                    raise TrainingError(f"non-finite parameters at iteration {it}; "
                                        "last finite checkpoint kept",
                                        metric.with_theta(last_good), log)
                theta = new
            last_good = theta.copy()
            log.add(iteration=it, scale=scale, max_violation=worst, mean_loss=mean,
                    dataset_size=len(data))
            if callback is not None:
                callback(it, scale, worst, metric.with_theta(theta))
            it += 1
            if clean >= cfg.patience:
                break
    return metric.with_theta(last_good), log
