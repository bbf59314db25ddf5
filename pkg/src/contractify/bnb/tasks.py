"""Specifications for forward invariance and contraction, levelset search, certificate files.

Both conditions have an expression that vanishes identically on part of the
domain (``F(0) = 0``, ``G(x, 0) = 0``), so no sound bound can prove it on a box
touching that set.  The specs therefore use polar coordinates in the
infinity norm: a point of the ball of radius ``r`` is ``t * r * u`` with ``u``
on a face of the unit cube (one coordinate fixed to +-1) and ``t`` in
``[0, 1]``.  Divided differences turn ``G / t^2`` (resp. ``F / t^2``) into a
graph that stays strictly negative near ``t = 0`` whenever the linearization
contracts, and the verifier bounds that graph instead.  The attack graph
keeps the plain expressions, which have the same sign for ``t > 0``.
"""

from __future__ import annotations

import hashlib
import json
import numpy as np

from ..box import IntervalBox
from ..certificates import ContractionTask, LyapunovFn, g_value
from ..nnet.graph import GraphBuilder
from ..nnet.slopes import difference_quotient
from ..systems import ClosedLoopSystem
from .engine import FALSIFIED, VERIFIED, Budget, VerifyResult, verify
from .spec import BoxExclusion, BoxInclusion, Conjunction, DisjunctiveSpec, ExprNonNeg


class CertificateError(ValueError):
    pass


def _face_boxes(lead_lo, lead_hi, n: int, tail: bool = True):
    """Boxes ``lead x face x [0, 1]`` covering ``lead x {u : |u|_inf = 1} x [0, 1]``."""
    out = []
    for k in range(n):
        for s in (-1.0, 1.0):
            ulo = -np.ones(n)
            uhi = np.ones(n)
            ulo[k] = uhi[k] = s
            lo = np.concatenate([lead_lo, ulo, [0.0] if tail else []])
            hi = np.concatenate([lead_hi, uhi, [1.0] if tail else []])
            out.append(IntervalBox(lo, hi))
    return tuple(out)


def _f_fixes_origin(sys: ClosedLoopSystem) -> bool:
    return bool(np.all(sys(np.zeros(sys.n)) == 0.0))


# ---------------------------------------------------------------------------
# forward invariance


def invariance_spec(sys: ClosedLoopSystem, V: LyapunovFn, box: IntervalBox | None = None,
                    polar: bool | None = None) -> DisjunctiveSpec:
    """``(-F(x) >= 0 and f(x) in B) or V(x) >= rho_V`` over ``B``."""
    box = box or sys.box
    n = sys.n
    if V.n != n:
        raise ValueError("Lyapunov function and system dimensions differ")
    can_polar = V.form == "quadratic" and box.is_symmetric() and _f_fixes_origin(sys)
    polar = can_polar if polar is None else polar
    if polar and not can_polar:
        raise ValueError("polar form needs a quadratic V, a symmetric box and f(0) = 0")
    rho = V.rho_V
    fi = tuple(range(1, n + 1))
    clauses = (Conjunction((ExprNonNeg(0), BoxInclusion(fi, box))), ExprNonNeg(n + 1))

    def direct(b, x):
        fx = sys.build_map(b, x)
        vx = V.add_value(b, x)
        res = b.sub(V.add_value(b, fx), b.scale(vx, 1.0 - V.kappa))
        return [b.neg(res), fx, b.sub(vx, b.const([rho]))]

    if not polar:
        b = GraphBuilder()
        g = b.build(direct(b, b.input(n)))
        return DisjunctiveSpec(clauses, (box,), g, name=f"invariance/{sys.name}",
                               decode=lambda z: {"x": z.tolist()})

    s = box.hi.copy()

    def coords(b, z):
        u, t = z[0:n], z[n : n + 1]
        return b.mul(b.const(s), u), t

    # bound graph: x = t w, F / t^2 = V(D) - (1 - kappa) V(w) with D = f(t w) / t
    b = GraphBuilder()
    z = b.input(n + 1)
    w, t = coords(b, z)
    _, (fx,), (dq,) = difference_quotient(b, sys.map_graph, b.const(np.zeros(n)), w, t)
    x = b.mul(t, w)
    hat = b.sub(V.add_value(b, dq), b.scale(V.add_value(b, w), 1.0 - V.kappa))
    bound = b.build([b.neg(hat), fx, b.sub(V.add_value(b, x), b.const([rho]))])

    b = GraphBuilder()
    z = b.input(n + 1)
    w, t = coords(b, z)
    attack = b.build(direct(b, b.mul(t, w)))

    def decode(zz):
        return {"x": (zz[n] * s * zz[:n]).tolist()}

    domain = _face_boxes(np.zeros(0), np.zeros(0), n)
    return DisjunctiveSpec(clauses, domain, bound, attack, decode=decode,
                           name=f"invariance/{sys.name}")


def verify_forward_invariance(sys: ClosedLoopSystem, V: LyapunovFn, box: IntervalBox | None = None,
                              budget: Budget | None = None) -> VerifyResult:
    """Certify that ``{V < rho_V} intersected with B`` is forward invariant with decay ``kappa``."""
    box = box or sys.box
    if V.rho_V <= 0:
        # empty sublevel set: nothing to check
        return VerifyResult(VERIFIED, None, {"boxes": 0, "vacuous": True},
                            np.zeros((0, sys.n)), np.zeros((0, sys.n)))
    return verify(invariance_spec(sys, V, box), budget)


# ---------------------------------------------------------------------------
# contraction


def contraction_spec(task: ContractionTask, polar: bool = True) -> DisjunctiveSpec:
    """``-G >= 0 or x + d not in B or V(x) >= rho_V or V(x + d) >= rho_V`` over ``B x B(0; eps)``."""
    n = task.n
    sys, box, eps, rho_c = task.system, task.box, task.eps, task.rho_c
    V = task.lyapunov
    rho = task.rho_V
    with_v = V is not None and np.isfinite(rho)
    metric = task.metric
    theta = metric.theta

    def tail(b, x, xd):
        outs = [xd]
        if with_v:
            r = b.const([rho])
            outs += [b.sub(V.add_value(b, x), r), b.sub(V.add_value(b, xd), r)]
        return outs

    def g_direct(b, x, d):
        xd = b.add(x, d)
        fx = sys.build_map(b, x)
        df = b.sub(fx, sys.build_map(b, xd))
        lhs = metric.add_quad(b, fx, df)
        return b.sub(lhs, b.scale(metric.add_quad(b, x, d), rho_c**2)), xd

    xi = tuple(range(1, n + 1))
    clauses = [ExprNonNeg(0), BoxExclusion(xi, box)]
    if with_v:
        clauses += [ExprNonNeg(n + 1), ExprNonNeg(n + 2)]

    if not polar:
        b = GraphBuilder()
        z = b.input(2 * n)
        x, d = z[0:n], z[n : 2 * n]
        g, xd = g_direct(b, x, d)
        graph = b.build([b.neg(g)] + tail(b, x, xd))
        ball = IntervalBox(np.concatenate([box.lo, -eps * np.ones(n)]),
                           np.concatenate([box.hi, eps * np.ones(n)]))
        return DisjunctiveSpec(clauses, (ball,), graph, params=theta,
                               decode=lambda zz: {"x": zz[:n].tolist(), "delta": zz[n:].tolist()},
                               name=f"contraction/{sys.name}")

    def coords(b, z):
        x, u, t = z[0:n], z[n : 2 * n], z[2 * n : 2 * n + 1]
        return x, b.scale(u, eps), t

    # bound graph: H = G / t^2 in terms of D = (f(x + t v) - f(x)) / t
    b = GraphBuilder()
    z = b.input(2 * n + 1)
    x, v, t = coords(b, z)
    (fx,), _, (dq,) = difference_quotient(b, sys.map_graph, x, v, t)
    h = b.sub(metric.add_quad(b, fx, dq), b.scale(metric.add_quad(b, x, v), rho_c**2))
    xd = b.add(x, b.mul(t, v))
    bound = b.build([b.neg(h)] + tail(b, x, xd))

    b = GraphBuilder()
    z = b.input(2 * n + 1)
    x, v, t = coords(b, z)
    g, xd = g_direct(b, x, b.mul(t, v))
    attack = b.build([b.neg(g)] + tail(b, x, xd))

    def decode(zz):
        return {"x": zz[:n].tolist(), "delta": (zz[2 * n] * eps * zz[n : 2 * n]).tolist()}

    domain = _face_boxes(box.lo, box.hi, n)
    return DisjunctiveSpec(tuple(clauses), domain, bound, attack, params=theta, decode=decode,
                           name=f"contraction/{sys.name}")


def box_invariance_spec(sys: ClosedLoopSystem, box: IntervalBox | None = None) -> DisjunctiveSpec:
    """``f(x) in B`` over ``B``: the box itself is forward invariant."""
    box = box or sys.box
    b = GraphBuilder()
    g = b.build(sys.build_map(b, b.input(sys.n)))
    return DisjunctiveSpec((BoxInclusion(tuple(range(sys.n)), box),), (box,), g,
                           decode=lambda z: {"x": z.tolist()}, name=f"box-invariance/{sys.name}")


def lyapunov_digest(sys: ClosedLoopSystem, V: LyapunovFn | None, box: IntervalBox | None = None) -> str:
    """Hash of the system (including its policy), the domain box and ``V`` without its level."""
    box = box or sys.box
    obj = {"system": sys.name, "params": sys.params, "h": sys.h, "box": box.to_json(),
           "policy": None if sys.policy is None else sys.policy.to_json(),
           "V": None if V is None else {k: v for k, v in V.to_json().items() if k != "header"},
           "kappa": None if V is None else V.kappa}
    blob = json.dumps(obj, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()


def invariance_certificate(sys, V: LyapunovFn | None, result: VerifyResult, box=None) -> dict:
    """Certificate dict; ``V = None`` certifies the box itself."""
    box = box or sys.box
    config = {"box": box.to_json(), "system": sys.name}
    if V is not None:
        config.update(rho_V=V.rho_V, kappa=V.kappa)
    return {
        "kind": "invariance",
        "lyapunov_hash": lyapunov_digest(sys, V, box),
        "config": config,
        "lyapunov": None if V is None else V.to_json(),
        **result.to_json(),
    }


def verify_box_invariance(sys: ClosedLoopSystem, box: IntervalBox | None = None,
                          budget: Budget | None = None) -> VerifyResult:
    return verify(box_invariance_spec(sys, box), budget)


def verify_contraction(task: ContractionTask, invariance: dict | None,
                       budget: Budget | None = None) -> VerifyResult:
    """Certify the contraction condition on the invariant region of ``task``.

    ``invariance`` must be a Verified invariance certificate for the same
    system, box and Lyapunov function with a level at least ``task.rho_V``
    (or, for a task without Lyapunov function, for the box itself).
    """
    if invariance is None:
        raise CertificateError("missing forward-invariance certificate")
    if invariance.get("kind") != "invariance" or invariance.get("status") != VERIFIED:
        raise CertificateError("invariance certificate is not Verified")
    if invariance.get("lyapunov_hash") != lyapunov_digest(task.system, task.lyapunov, task.box):
        raise CertificateError(
            "invariance certificate belongs to another system, box or Lyapunov function")
    if task.lyapunov is not None:
        if float(invariance["config"]["rho_V"]) < task.rho_V:
            raise CertificateError(
                f"invariance certified up to rho_V={invariance['config']['rho_V']}, "
                f"requested {task.rho_V}"
            )
        if task.rho_V <= 0:
            return VerifyResult(VERIFIED, None, {"boxes": 0, "vacuous": True},
                                np.zeros((0, task.n)), np.zeros((0, task.n)))
    res = verify(contraction_spec(task), budget)
    if res.status == FALSIFIED:
        w = res.witness
        w["G"] = float(g_value(task, np.array(w["x"]), np.array(w["delta"])))
    return res


def contraction_certificate(task: ContractionTask, result: VerifyResult) -> dict:
    return {
        "kind": "contraction",
        "lyapunov_hash": lyapunov_digest(task.system, task.lyapunov, task.box),
        "config": {**task.header(), "box": task.box.to_json(), "system": task.system.name},
        **result.to_json(),
    }


# ---------------------------------------------------------------------------
# levelset search


def max_levelset(template, lo: float, hi: float, tol: float):
    """Largest ``rho`` in ``[lo, hi]`` with ``template(rho)`` Verified, by bisection.

    ``template`` maps a level to a :class:`VerifyResult`.  Returns
    ``(rho_star, result_at_rho_star, probes)``; ``rho_star`` is ``None``
    when ``lo > 0`` does not verify.
    """
    if hi < lo or not tol > 0:
        raise ValueError("need lo <= hi and tol > 0")
    probes = []

    def probe(r):
        res = template(r)
        probes.append((r, res.status))
        return res

    best = None
    if lo > 0:
        best = probe(lo)
        if not best.verified:
            return None, best, probes
    top = probe(hi)
    if top.verified:
        return hi, top, probes
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = probe(mid)
        if res.verified:
            lo, best = mid, res
        else:
            hi = mid
    return lo, best, probes


def invariance_template(sys, V: LyapunovFn, box=None, budget=None):
    return lambda r: verify_forward_invariance(sys, V.with_level(r), box, budget)


def contraction_template(task: ContractionTask, budget=None):
    """Contraction at level ``r``; the invariance of ``{V < r}`` follows from the task's certificate."""
    return lambda r: verify(contraction_spec(task.with_level(r)), budget) if r > 0 else \
        VerifyResult(VERIFIED, None, {"boxes": 0, "vacuous": True})

