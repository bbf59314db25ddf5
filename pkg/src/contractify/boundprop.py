"""Sound bounds for expression graphs over boxes.

Two tiers, both batched over many boxes at once (``lo``/``hi`` of shape
``(batch, n_inputs)``):

* :func:`propagate_box` -- interval bound propagation (IBP) with outward
  rounding at every primitive.
* :func:`linear_relax` -- forward linear relaxation: every node carries
  affine lower/upper functions of the graph input, built from triangle
  (relu), chord/tangent (convex or concave pieces) and McCormick (bilinear)
  envelopes.  Concrete bounds are intersected with IBP so they are never
  looser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnet.graph import ExprGraph, GraphError, secant_value

EPS = np.finfo(float).eps
TINY = 1e-300
HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi
# max |tanh''| on the real line
TANH_CURV = 4.0 / (3.0 * math.sqrt(3.0))


def _widen(lo, hi, mag=None, k=2.0):
    if mag is None:
        mag = np.maximum(np.abs(lo), np.abs(hi))
    r = k * EPS * mag + TINY
    return lo - r, hi + r


def _two_sum_bounds(a, b):
    """Floating sum with exact directed rounding: tight ``(down, up)`` of ``a + b``."""
    with np.errstate(invalid="ignore", over="ignore"):
        s = a + b
        bb = s - a
        err = (a - (s - bb)) + (b - bb)
    ok = np.isfinite(err)
    down = np.where(ok & (err >= 0), s, np.nextafter(s, -np.inf))
    up = np.where(ok & (err <= 0), s, np.nextafter(s, np.inf))
    return down, up


# ---------------------------------------------------------------------------
# interval primitives


def _sin_range(lo, hi):
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    mn = np.minimum(s_lo, s_hi)
    mx = np.maximum(s_lo, s_hi)
    slack = 1e-12 * (1.0 + np.abs(lo) + np.abs(hi))
    # a maximiser pi/2 + 2 pi k inside [lo, hi] (tested on a slightly wider interval)
    k = np.ceil((lo - slack - HALF_PI) / TWO_PI)
    has_max = HALF_PI + TWO_PI * k <= hi + slack
    k = np.ceil((lo - slack - 3 * HALF_PI) / TWO_PI)
    has_min = 3 * HALF_PI + TWO_PI * k <= hi + slack
    full = (hi - lo) >= TWO_PI
    mx = np.where(has_max | full, 1.0, mx)
    mn = np.where(has_min | full, -1.0, mn)
    mn, mx = _widen(mn, mx, np.ones_like(mn), 4.0)
    return np.maximum(mn, -1.0), np.minimum(mx, 1.0)


def _sq_range(lo, hi, p=2):
    plo, phi = lo**p, hi**p
    if p % 2:
        return plo, phi
    straddle = (lo < 0) & (hi > 0)
    mn = np.where(straddle, 0.0, np.minimum(plo, phi))
    mx = np.maximum(plo, phi)
    return mn, mx


def _mul_range(la, ua, lb, ub):
    c = np.stack(np.broadcast_arrays(la * lb, la * ub, ua * lb, ua * ub))
    return c.min(axis=0), c.max(axis=0)


def _tanh_deriv_range(lo, hi):
    near = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    far = np.maximum(np.abs(lo), np.abs(hi))
    return 1.0 - np.tanh(far) ** 2, 1.0 - np.tanh(near) ** 2


def _relu_slope(a, b, at_equal):
    d = b - a
    nz = d != 0
    chord = (np.maximum(b, 0.0) - np.maximum(a, 0.0)) / np.where(nz, d, 1.0)
    return np.where(nz, chord, at_equal)


def _secant_range(fn, la, ua, lb, ub):
    """Enclosure of ``(f(b) - f(a)) / (b - a)`` for ``a in [la, ua]``, ``b in [lb, ub]``.

    The mean value theorem puts it in ``f'(hull)``.  For relu the secant slope
    of a convex function is monotone in both endpoints; for smooth ``f`` the
    slope is Lipschitz in each endpoint with constant ``max|f''| / 2`` around
    its value at the box centre.  Both enclosures shrink with the box.
    """
    hl, hu = np.minimum(la, lb), np.maximum(ua, ub)
    if fn == "relu":
        lo = _relu_slope(la, lb, (la > 0).astype(float))
        hi = _relu_slope(ua, ub, (ua >= 0).astype(float))
        lo, hi = _widen(lo, hi, np.ones_like(lo), 8.0)
        return (np.maximum(lo, (hl > 0).astype(float)),
                np.minimum(hi, (hu > 0).astype(float)))
    if fn == "sin":
        # secant of sin lies in cos(hull) = sin(hull + pi/2)
        mlo, mhi = _sin_range(hl + HALF_PI, hu + HALF_PI)
        slo, shi = _sin_range(hl, hu)
        curv = np.maximum(np.abs(slo), np.abs(shi))
    elif fn == "tanh":
        mlo, mhi = _widen(*_tanh_deriv_range(hl, hu), k=8)
        mlo, mhi = np.maximum(mlo, 0.0), np.minimum(mhi, 1.0)
        curv = TANH_CURV
    else:
        raise GraphError(f"no secant rule for {fn!r}")
    ac, bc = 0.5 * (la + ua), 0.5 * (lb + ub)
    mid = secant_value(fn, ac, bc)
    r = 0.5 * curv * ((ua - la) * 0.5 + (ub - lb) * 0.5) * (1.0 + 4 * EPS)
    r = r + 1e-12 * (1.0 + np.abs(mid))
    return np.maximum(mlo, mid - r), np.minimum(mhi, mid + r)


def interval_primitive(op: str, *args, attr=None):
    """Sound enclosure of one primitive; ``args`` are ``(lo, hi)`` pairs."""
    (la, ua) = args[0]
    if len(args) > 1:
        (lb, ub) = args[1]
    if op == "add":
        return _two_sum_bounds(la, lb)[0], _two_sum_bounds(ua, ub)[1]
    if op == "sub":
        return _two_sum_bounds(la, -ub)[0], _two_sum_bounds(ua, -lb)[1]
    if op == "mul":
        return _widen(*_mul_range(la, ua, lb, ub), k=1)
    if op == "min":
        return np.minimum(la, lb), np.minimum(ua, ub)
    if op == "neg":
        return -ua, -la
    if op == "scale":
        c = attr
        lo, hi = (c * la, c * ua) if c >= 0 else (c * ua, c * la)
        if c in (0.0, 1.0, -1.0):
            return lo, hi
        return _widen(lo, hi, k=1)
    if op in ("square", "power"):
        p = 2 if op == "square" else attr
        lo, hi = _widen(*_sq_range(la, ua, p), k=p)
        return (np.maximum(lo, 0.0) if p % 2 == 0 else lo), hi
    if op == "sin":
        return _sin_range(la, ua)
    if op == "relu":
        return np.maximum(la, 0.0), np.maximum(ua, 0.0)
    if op == "tanh":
        lo, hi = _widen(np.tanh(la), np.tanh(ua), k=4)
        return np.maximum(lo, -1.0), np.minimum(hi, 1.0)
    if op == "sum":
        mag = np.maximum(np.abs(la), np.abs(ua)).sum(axis=1, keepdims=True)
        return _widen(la.sum(axis=1, keepdims=True), ua.sum(axis=1, keepdims=True), mag,
                      k=la.shape[1] + 1)
    if op == "dot":
        lo, hi = _mul_range(la, ua, lb, ub)
        return interval_primitive("sum", (lo, hi))
    if op == "matvec":
        rows, cols = attr
        wl = la.reshape(la.shape[0], rows, cols)
        wu = ua.reshape(ua.shape[0], rows, cols)
        xl = lb[:, None, :]
        xu = ub[:, None, :]
        if np.array_equal(wl, wu):
            wp, wn = np.maximum(wl, 0), np.minimum(wl, 0)
            lo = (wp * xl + wn * xu).sum(axis=2)
            hi = (wp * xu + wn * xl).sum(axis=2)
            mag = (np.abs(wl) * np.maximum(np.abs(xl), np.abs(xu))).sum(axis=2)
            zero = ~np.any(wl, axis=2)
            lo, hi = _widen(lo, hi, mag, k=cols + 1)
            # rows of exact zeros give an exact zero
            return np.where(zero, 0.0, lo), np.where(zero, 0.0, hi)
        else:
            plo, phi = _mul_range(wl, wu, xl, xu)
            lo, hi = plo.sum(axis=2), phi.sum(axis=2)
            mag = np.maximum(np.abs(plo), np.abs(phi)).sum(axis=2)
        return _widen(lo, hi, mag, k=cols + 1)
    if op == "secant":
        return _secant_range(attr, la, ua, *args[1])
    raise GraphError(f"no interval rule for op {op!r}")


# ---------------------------------------------------------------------------
# interval bound propagation


def _as_batch(lo, hi, n):
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.shape[1] != n:
        raise GraphError(f"box of shape {lo.shape} does not match {n} graph inputs")
    if np.any(lo > hi):
        raise GraphError("box with lo > hi")
    return lo, hi


def _ibp_nodes(graph: ExprGraph, lo, hi, params):
    p = np.zeros(0) if params is None else np.asarray(params, dtype=float).ravel()
    if p.size != graph.n_params:
        raise GraphError(f"expected {graph.n_params} parameters, got {p.size}")
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for node in graph.nodes:
        op = node.op
        if op == "input":
            iv = (lo, hi)
        elif op == "param":
            off, size = node.attr
            v = p[off : off + size][None, :]
            iv = (v, v)
        elif op == "const":
            v = node.attr[None, :]
            iv = (v, v)
        elif op == "slice":
            s, e = node.attr
            a = out[node.args[0]]
            iv = (a[0][:, s:e], a[1][:, s:e])
        elif op == "concat":
            parts = [out[i] for i in node.args]
            bsz = max(q[0].shape[0] for q in parts)
            iv = tuple(
                np.concatenate([np.broadcast_to(q[j], (bsz, q[j].shape[1])) for q in parts], 1)
                for j in (0, 1)
            )
        else:
            iv = interval_primitive(op, *[out[i] for i in node.args], attr=node.attr)
        out.append(iv)
    return out


def _collect(graph, per_node, bsz):
    lo = np.concatenate(
        [np.broadcast_to(per_node[i][0], (bsz, graph.nodes[i].size)) for i in graph.outputs], 1
    )
    hi = np.concatenate(
        [np.broadcast_to(per_node[i][1], (bsz, graph.nodes[i].size)) for i in graph.outputs], 1
    )
    return lo, hi


def propagate_box(graph: ExprGraph, lo, hi, params=None):
    """Interval enclosure of all graph outputs over each box.

    Returns ``(out_lo, out_hi)`` of shape ``(batch, n_outputs)``.
    """
    lo, hi = _as_batch(lo, hi, graph.n_inputs)
    nodes = _ibp_nodes(graph, lo, hi, params)
    return _collect(graph, nodes, lo.shape[0])


# ---------------------------------------------------------------------------
# forward linear relaxation


@dataclass
class LinearBounds:
    """Affine envelopes ``al @ x + bl <= f(x) <= au @ x + bu`` over a box batch.

    ``al``/``au`` have shape ``(batch, n_outputs, n_inputs)``; ``lo``/``hi``
    are the concretized bounds (already intersected with IBP).
    """

    al: np.ndarray
    bl: np.ndarray
    au: np.ndarray
    bu: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def lower(self, x):
        return np.einsum("bod,bd->bo", self.al, np.atleast_2d(x)) + self.bl

    def upper(self, x):
        return np.einsum("bod,bd->bo", self.au, np.atleast_2d(x)) + self.bu


class _Lin:
    """Per-node state: affine bounds (``A is None`` means input-independent)."""

    __slots__ = ("al", "bl", "au", "bu", "lo", "hi")

    def __init__(self, al, bl, au, bu, lo, hi):
        self.al, self.bl, self.au, self.bu = al, bl, au, bu
        self.lo, self.hi = lo, hi


class _Relaxer:
    def __init__(self, lo, hi):
        self.c = 0.5 * (lo + hi)  # (B, d)
        self.r = 0.5 * (hi - lo)
        self.m = np.maximum(np.abs(lo), np.abs(hi))
        self.bsz, self.d = lo.shape

    def concretize(self, al, bl, au, bu):
        lo = bl + np.einsum("bsd,bd->bs", al, self.c) - np.einsum("bsd,bd->bs", np.abs(al), self.r)
        hi = bu + np.einsum("bsd,bd->bs", au, self.c) + np.einsum("bsd,bd->bs", np.abs(au), self.r)
        return lo, hi

    def slack(self, al, bl, au, bu, k=16.0):
        """Offset widening covering float error of the affine forms."""
        ml = np.abs(bl) + np.einsum("bsd,bd->bs", np.abs(al), self.m)
        mu = np.abs(bu) + np.einsum("bsd,bd->bs", np.abs(au), self.m)
        return bl - (k * EPS * ml + TINY), bu + (k * EPS * mu + TINY)

    def finish(self, al, bl, au, bu, ibp):
        bl, bu = self.slack(al, bl, au, bu)
        clo, chi = self.concretize(al, bl, au, bu)
        lo = np.maximum(clo, ibp[0])
        hi = np.minimum(chi, ibp[1])
        return _Lin(al, bl, au, bu, lo, hi)

    def const(self, ibp):
        return _Lin(None, ibp[0], None, ibp[1], ibp[0], ibp[1])

    def full(self, n: _Lin, size: int):
        """Materialize (A, b) arrays for a node, broadcasting constants."""
        shape = (self.bsz, size)
        if n.al is None:
            z = np.zeros((self.bsz, size, self.d))
            return z, np.broadcast_to(n.bl, shape), z, np.broadcast_to(n.bu, shape)
        return n.al, n.bl, n.au, n.bu

    @staticmethod
    def scale(coef, al, bl, au, bu, off_l=0.0, off_u=0.0):
        """Bounds of ``coef * y + off`` given bounds of y; ``coef`` per element."""
        cp = np.maximum(coef, 0.0)
        cn = np.minimum(coef, 0.0)
        nal = cp[..., None] * al + cn[..., None] * au
        nau = cp[..., None] * au + cn[..., None] * al
        nbl = cp * bl + cn * bu + off_l
        nbu = cp * bu + cn * bl + off_u
        return nal, nbl, nau, nbu


def _convex_relax(f, df, l, u):
    """Chord (upper) and midpoint tangent (lower) of a convex function."""
    w = u - l
    m = 0.5 * (l + u)
    fm = f(m)
    dm = df(m)
    thin = w == 0
    k = np.where(thin, dm, (f(u) - f(l)) / np.where(thin, 1.0, w))
    su, ou = k, np.where(thin, fm - dm * m, f(l) - k * l)
    sl, ol = dm, fm - dm * m
    return sl, ol, su, ou


def _smooth_relax(kind, l, u, attr=None):
    """(lower slope, lower offset, upper slope, upper offset) of a 1-D nonlinearity."""
    if kind in ("square", "power"):
        p = 2 if kind == "square" else attr
        f = lambda z: z**p  # noqa: E731
        df = lambda z: p * z ** (p - 1)  # noqa: E731
        if p % 2 == 0:
            return _convex_relax(f, df, l, u)
        convex = l >= 0
        concave = u <= 0
        curv = p * (p - 1) * np.maximum(np.abs(l), np.abs(u)) ** (p - 2)
    elif kind == "sin":
        f, df = np.sin, np.cos
        s_lo, s_hi = _sin_range(l, u)
        convex = s_hi <= 0  # sin'' = -sin
        concave = s_lo >= 0
        curv = np.maximum(np.abs(s_lo), np.abs(s_hi))
    elif kind == "tanh":
        f = np.tanh
        df = lambda z: 1.0 - np.tanh(z) ** 2  # noqa: E731
        convex = u <= 0
        concave = l >= 0
        curv = np.full_like(l, TANH_CURV)
    else:
        raise GraphError(kind)

    sl, ol, su, ou = _convex_relax(f, df, l, u)
    # concave: negate the convex recipe applied to -f
    nsl, nol, nsu, nou = _convex_relax(lambda z: -f(z), lambda z: -df(z), l, u)
    csl, col, csu, cou = -nsu, -nou, -nsl, -nol
    # mixed curvature: midpoint tangent +- Taylor remainder
    m = 0.5 * (l + u)
    dm = df(m)
    rem = curv * (u - l) ** 2 / 8.0
    tl_o = f(m) - dm * m - rem
    tu_o = f(m) - dm * m + rem
    sl = np.where(convex, sl, np.where(concave, csl, dm))
    ol = np.where(convex, ol, np.where(concave, col, tl_o))
    su = np.where(convex, su, np.where(concave, csu, dm))
    ou = np.where(convex, ou, np.where(concave, cou, tu_o))
    return sl, ol, su, ou


def _relu_relax(l, u):
    active = l >= 0
    dead = u <= 0
    unstable = ~(active | dead)
    den = np.where(unstable, u - l, 1.0)
    k = np.where(unstable, u / den, np.where(active, 1.0, 0.0))
    ou = np.where(unstable, -k * l, 0.0)
    sl = np.where(active, 1.0, np.where(dead, 0.0, (0.5 * (l + u) > 0).astype(float)))
    ol = np.zeros_like(l)
    return sl, ol, k, ou


def _bilinear(R: _Relaxer, A, B):
    """McCormick envelope of the elementwise product of two relaxed operands.

    ``A``/``B`` are tuples ``(al, bl, au, bu, lo, hi)`` with matching shapes.
    """
    aal, abl, aau, abu, la, ua = A
    bal, bbl, bau, bbu, lb, ub = B
    # lower: avg of  lb*a + la*b - la*lb  and  ub*a + ua*b - ua*ub
    ca = 0.5 * (lb + ub)
    cb = 0.5 * (la + ua)
    c0 = -0.5 * (la * lb + ua * ub)
    l1 = R.scale(ca, aal, abl, aau, abu)
    l2 = R.scale(cb, bal, bbl, bau, bbu)
    al = l1[0] + l2[0]
    bl = l1[1] + l2[1] + c0
    # upper: avg of  ub*a + la*b - la*ub  and  lb*a + ua*b - ua*lb
    c1 = -0.5 * (la * ub + ua * lb)
    au = l1[2] + l2[2]
    bu = l1[3] + l2[3] + c1
    return al, bl, au, bu


def _lin_nodes(graph: ExprGraph, lo, hi, params):
    ibp = _ibp_nodes(graph, lo, hi, params)
    dep = graph.depends_on_input()
    R = _Relaxer(lo, hi)
    bsz, d = lo.shape
    out: list[_Lin] = []
    for k, node in enumerate(graph.nodes):
        op = node.op
        size = node.size
        if not dep[k]:
            out.append(R.const(ibp[k]))
            continue
        if op == "input":
            eye = np.broadcast_to(np.eye(d), (bsz, d, d))
            zero = np.zeros((bsz, d))
            out.append(_Lin(eye, zero, eye, zero, lo, hi))
            continue
        args = [out[i] for i in node.args]
        ain = [graph.nodes[i].size for i in node.args]
        if op == "slice":
            s, e = node.attr
            a = args[0]
            out.append(_Lin(a.al[:, s:e], a.bl[:, s:e], a.au[:, s:e], a.bu[:, s:e],
                            a.lo[:, s:e], a.hi[:, s:e]))
            continue
        if op == "concat":
            parts = [R.full(a, n) for a, n in zip(args, ain)]
            al = np.concatenate([p[0] for p in parts], 1)
            bl = np.concatenate([p[1] for p in parts], 1)
            au = np.concatenate([p[2] for p in parts], 1)
            bu = np.concatenate([p[3] for p in parts], 1)
            lo_ = np.concatenate([np.broadcast_to(a.lo, (bsz, n)) for a, n in zip(args, ain)], 1)
            hi_ = np.concatenate([np.broadcast_to(a.hi, (bsz, n)) for a, n in zip(args, ain)], 1)
            out.append(_Lin(al, bl, au, bu, lo_, hi_))
            continue
        if op == "neg":
            al, bl, au, bu = R.full(args[0], size)
            out.append(_Lin(-au, -bu, -al, -bl, -args[0].hi, -args[0].lo))
            continue
        if op == "secant":
            out.append(R.const(ibp[k]))
            continue

        if op in ("add", "sub"):
            a = R.full(args[0], ain[0])
            b = R.full(args[1], ain[1])
            if op == "add":
                res = (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])
            else:
                res = (a[0] - b[2], a[1] - b[3], a[2] - b[0], a[3] - b[1])
            res = tuple(np.broadcast_to(v, (bsz, size, d) if v.ndim == 3 else (bsz, size))
                        for v in res)
        elif op == "scale":
            res = R.scale(np.full((bsz, size), node.attr), *R.full(args[0], size))
        elif op == "mul":
            res = _lin_mul(R, args, ain, size, dep[list(node.args)], bsz)
        elif op == "min":
            a = R.full(args[0], size) + (args[0].lo, args[0].hi)
            b = R.full(args[1], size) + (args[1].lo, args[1].hi)
            # min(a, b) = a - relu(a - b)
            cl = a[0] - b[2]
            cbl = a[1] - b[3]
            cu = a[2] - b[0]
            cbu = a[3] - b[1]
            c_lo, c_hi = interval_primitive("sub", (a[4], a[5]), (b[4], b[5]))
            sl, ol, su, ou = _relu_relax(np.broadcast_to(c_lo, (bsz, size)),
                                         np.broadcast_to(c_hi, (bsz, size)))
            r = R.scale(sl, cl, cbl, cu, cbu, ol, ol)
            r_u = R.scale(su, cl, cbl, cu, cbu, ou, ou)
            res = (a[0] - r_u[2], a[1] - r_u[3], a[2] - r[0], a[3] - r[1])
        elif op in ("relu", "square", "power", "sin", "tanh"):
            a = args[0]
            l = np.broadcast_to(a.lo, (bsz, size))
            u = np.broadcast_to(a.hi, (bsz, size))
            if op == "relu":
                sl, ol, su, ou = _relu_relax(l, u)
            else:
                sl, ol, su, ou = _smooth_relax(op, l, u, node.attr)
            al, bl, au, bu = R.full(a, size)
            lower = R.scale(sl, al, bl, au, bu, ol, ol)
            upper = R.scale(su, al, bl, au, bu, ou, ou)
            res = (lower[0], lower[1], upper[2], upper[3])
        elif op in ("sum", "dot"):
            if op == "dot":
                prod = _lin_mul(R, args, ain, ain[0], dep[list(node.args)], bsz)
            else:
                prod = R.full(args[0], ain[0])
            res = (prod[0].sum(1, keepdims=True), prod[1].sum(1, keepdims=True),
                   prod[2].sum(1, keepdims=True), prod[3].sum(1, keepdims=True))
        elif op == "matvec":
            res = _lin_matvec(R, node, args, dep[list(node.args)], bsz)
        else:
            raise GraphError(f"no linear rule for op {op!r}")
        out.append(R.finish(*res, ibp[k]))
    return out, ibp


def _lin_mul(R, args, ain, size, dep, bsz):
    a, b = args
    shape = (bsz, size)
    if not dep[0] or not dep[1]:
        # point-or-interval constant times a relaxed operand
        cst, var, nvar = (a, b, ain[1]) if not dep[0] else (b, a, ain[0])
        vf = R.full(var, nvar)
        vf = tuple(np.broadcast_to(v, (bsz, size, R.d) if v.ndim == 3 else shape) for v in vf)
        if np.array_equal(cst.lo, cst.hi):
            return R.scale(np.broadcast_to(cst.lo, shape), *vf)
        # interval constant: McCormick with a zero-coefficient operand
        z = np.zeros((bsz, size, R.d))
        A = vf + (np.broadcast_to(var.lo, shape), np.broadcast_to(var.hi, shape))
        C = (z, np.broadcast_to(cst.lo, shape), z, np.broadcast_to(cst.hi, shape),
             np.broadcast_to(cst.lo, shape), np.broadcast_to(cst.hi, shape))
        return _bilinear(R, A, C)
    fa = R.full(a, ain[0])
    fb = R.full(b, ain[1])
    A = tuple(np.broadcast_to(v, (bsz, size, R.d) if v.ndim == 3 else shape) for v in fa) + (
        np.broadcast_to(a.lo, shape), np.broadcast_to(a.hi, shape))
    B = tuple(np.broadcast_to(v, (bsz, size, R.d) if v.ndim == 3 else shape) for v in fb) + (
        np.broadcast_to(b.lo, shape), np.broadcast_to(b.hi, shape))
    return _bilinear(R, A, B)


def _lin_matvec(R, node, args, dep, bsz):
    rows, cols = node.attr
    w, x = args
    d = R.d
    if not dep[0] and np.array_equal(w.lo, w.hi) and w.lo.shape[0] == 1:
        W = w.lo[0].reshape(rows, cols)
        wp, wn = np.maximum(W, 0), np.minimum(W, 0)
        xal, xbl, xau, xbu = R.full(x, cols)
        al = np.einsum("rc,bcd->brd", wp, xal) + np.einsum("rc,bcd->brd", wn, xau)
        au = np.einsum("rc,bcd->brd", wp, xau) + np.einsum("rc,bcd->brd", wn, xal)
        bl = xbl @ wp.T + xbu @ wn.T
        bu = xbu @ wp.T + xbl @ wn.T
        return al, bl, au, bu
    # general bilinear: expand to (B, rows, cols) products then reduce
    def expand_w():
        fa = R.full(w, rows * cols)
        al, bl, au, bu = fa
        shp = (bsz, rows, cols)
        return (np.broadcast_to(al, (bsz, rows * cols, d)).reshape(bsz, rows, cols, d),
                np.broadcast_to(bl, (bsz, rows * cols)).reshape(shp),
                np.broadcast_to(au, (bsz, rows * cols, d)).reshape(bsz, rows, cols, d),
                np.broadcast_to(bu, (bsz, rows * cols)).reshape(shp),
                np.broadcast_to(w.lo, (bsz, rows * cols)).reshape(shp),
                np.broadcast_to(w.hi, (bsz, rows * cols)).reshape(shp))

    def expand_x():
        al, bl, au, bu = R.full(x, cols)
        shp = (bsz, rows, cols)
        return (np.broadcast_to(al[:, None], (bsz, rows, cols, d)),
                np.broadcast_to(bl[:, None], shp),
                np.broadcast_to(au[:, None], (bsz, rows, cols, d)),
                np.broadcast_to(bu[:, None], shp),
                np.broadcast_to(np.broadcast_to(x.lo, (bsz, cols))[:, None], shp),
                np.broadcast_to(np.broadcast_to(x.hi, (bsz, cols))[:, None], shp))

    class _R4:
        # _Relaxer.scale works elementwise; shapes here carry an extra axis
        scale = staticmethod(_Relaxer.scale)

    al, bl, au, bu = _bilinear(_R4, expand_w(), expand_x())
    return al.sum(2), bl.sum(2), au.sum(2), bu.sum(2)


def linear_relax(graph: ExprGraph, lo, hi, params=None) -> LinearBounds:
    """Affine envelopes of every graph output over each box of the batch."""
    lo, hi = _as_batch(lo, hi, graph.n_inputs)
    nodes, _ = _lin_nodes(graph, lo, hi, params)
    R = _Relaxer(lo, hi)
    parts = [R.full(nodes[i], graph.nodes[i].size) for i in graph.outputs]
    bsz = lo.shape[0]
    # both enclosures are sound; the interval pass can be a few ulps tighter
    ilo, ihi = propagate_box(graph, lo, hi, params)
    return LinearBounds(
        al=np.concatenate([np.broadcast_to(p[0], (bsz,) + p[0].shape[1:]) for p in parts], 1),
        bl=np.concatenate([np.broadcast_to(p[1], (bsz, p[1].shape[1])) for p in parts], 1),
        au=np.concatenate([np.broadcast_to(p[2], (bsz,) + p[2].shape[1:]) for p in parts], 1),
        bu=np.concatenate([np.broadcast_to(p[3], (bsz, p[3].shape[1])) for p in parts], 1),
        lo=np.maximum(ilo, np.concatenate([np.broadcast_to(nodes[i].lo, (bsz, graph.nodes[i].size))
                                           for i in graph.outputs], 1)),
        hi=np.minimum(ihi, np.concatenate([np.broadcast_to(nodes[i].hi, (bsz, graph.nodes[i].size))
                                           for i in graph.outputs], 1)),
    )


def output_bounds(graph: ExprGraph, lo, hi, params=None, method: str = "linear"):
    """Concrete ``(lo, hi)`` output bounds with the chosen tier."""
    if method == "ibp":
        return propagate_box(graph, lo, hi, params)
    if method == "linear":
        lb = linear_relax(graph, lo, hi, params)
        return lb.lo, lb.hi
    raise ValueError(f"unknown bounding method {method!r}")
