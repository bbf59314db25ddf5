"""Random expression graphs for the gradient and bound-soundness fuzzers."""

import numpy as np

from contractify.nnet.graph import GraphBuilder

UNARY = ("square", "power", "sin", "relu", "tanh", "neg", "scale", "sum")
BINARY = ("add", "sub", "mul", "min", "dot", "matvec")


def random_graph(rng, n_in=None, depth=None, with_params=True):
    """A graph of scalar or vector nodes; returns ``(graph, n_in, n_params)``."""
    b = GraphBuilder()
    n_in = n_in or int(rng.integers(1, 4))
    depth = depth or int(rng.integers(1, 7))
    x = b.input(n_in)
    pool = [x]
    if with_params:
        pool.append(b.param("p", (n_in,)))
    for i in range(depth):
        if rng.random() < 0.5:
            a = pool[rng.integers(len(pool))]
            op = UNARY[rng.integers(len(UNARY))]
            if op == "power":
                r = b.power(a, int(rng.integers(2, 4)))
            elif op == "scale":
                r = b.scale(a, float(rng.normal()))
            else:
                r = getattr(b, op)(a)
        else:
            a = pool[rng.integers(len(pool))]
            op = BINARY[rng.integers(len(BINARY))]
            if op == "matvec":
                rows = int(rng.integers(1, 4))
                if with_params and rng.random() < 0.5:
                    w = b.param(f"w{i}", (rows, a.size))
                else:
                    w = b.const(rng.normal(size=rows * a.size))
                r = b.matvec(w, a, rows)
            else:
                same = [p for p in pool if p.size in (a.size, 1)]
                if op == "min":
                    # min(a, a) sits on its own kink everywhere
                    same = [p for p in same if p.idx != a.idx] or [b.scale(a, -0.5)]
                c = same[rng.integers(len(same))]
                if op == "dot" and c.size != a.size:
                    op = "mul"
                r = getattr(b, op)(a, c)
        # keep magnitudes moderate so compositions stay finite
        if r.size > 0 and rng.random() < 0.3:
            r = b.tanh(r)
        pool.append(r)
    g = b.build(b.sum(pool[-1]))
    return g, n_in, g.n_params


def near_kink(graph, vals, tol=1e-3):
    """Per-sample flag: some relu input or min argument pair is within ``tol`` of a kink."""
    bsz = max(v.shape[0] for v in vals)
    flag = np.zeros(bsz, dtype=bool)
    for node in graph.nodes:
        if node.op == "relu":
            a = vals[node.args[0]]
            flag |= np.broadcast_to(np.any(np.abs(a) < tol, axis=1), (bsz,))
        elif node.op == "min":
            a, c = vals[node.args[0]], vals[node.args[1]]
            flag |= np.broadcast_to(np.any(np.abs(a - c) < tol, axis=1), (bsz,))
    return flag


def fd_gradient(graph, x, p, h=1e-5):
    """Central differences of the scalar output w.r.t. inputs and params."""
    from contractify.nnet.graph import eval_graph

    def f(xx, pp):
        return eval_graph(graph, xx, pp)[0]

    gx = np.array([(f(x + h * e, p) - f(x - h * e, p)) / (2 * h) for e in np.eye(len(x))])
    gp = np.array([(f(x, p + h * e) - f(x, p - h * e)) / (2 * h) for e in np.eye(len(p))])
    return gx, gp


def rel_err(a, b):
    """``|a - b| / max(|b|, 1)`` in the infinity norm."""
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


def checked_point(graph, rng, n_in, n_p, tries=200):
    """A random ``(x, p)`` away from relu/min kinks, or ``None``."""
    from contractify.nnet.graph import forward

    for _ in range(tries):
        x = rng.uniform(-1.5, 1.5, n_in)
        p = rng.uniform(-1.5, 1.5, n_p)
        if not near_kink(graph, forward(graph, x[None], p))[0]:
            return x, p
    return None


def slope_graph(graph):
    """Graph of ``(x, v, t) -> (g(x + t v) - g(x)) / t`` built by the slope transform."""
    from contractify.nnet.graph import GraphBuilder
    from contractify.nnet.slopes import difference_quotient

    n = graph.n_inputs
    b = GraphBuilder()
    z = b.input(2 * n + 1)
    _, _, q = difference_quotient(b, graph, b.slice(z, 0, n), b.slice(z, n, 2 * n),
                                  b.slice(z, 2 * n, 2 * n + 1))
    return b.build(q)


def random_box(rng, n):
    c = rng.uniform(-1.5, 1.5, n)
    r = 10.0 ** rng.uniform(-3, 0, n)
    return c - r, c + r


def containment_violations(graph, lo, hi, p, rng, samples=1000, method="ibp"):
    """Sampled points whose value falls outside the bounds of one box."""
    from contractify.boundprop import linear_relax, propagate_box

    if method == "ibp":
        blo, bhi = propagate_box(graph, lo, hi, p)
    else:
        lb = linear_relax(graph, lo, hi, p)
        blo, bhi = lb.lo, lb.hi
    x = rng.uniform(lo, hi, (samples, len(lo)))
    corners = np.array([lo, hi, 0.5 * (lo + hi)])
    x = np.vstack([x, corners])
    y = eval_graph_safe(graph, x, p)
    ok = ~np.all(np.isfinite(y), axis=1)
    inside = (y >= blo) & (y <= bhi)
    bad = ~(ok | np.all(inside, axis=1))
    if method != "ibp":
        # the affine envelopes themselves must hold too
        lower = np.einsum("od,bd->bo", lb.al[0], x) + lb.bl[0]
        upper = np.einsum("od,bd->bo", lb.au[0], x) + lb.bu[0]
        slack = 1e-9 * (1 + np.abs(y))
        bad |= ~ok & ~np.all((lower <= y + slack) & (y <= upper + slack), axis=1)
    return int(bad.sum())


def eval_graph_safe(graph, x, p):
    from contractify.nnet.graph import eval_graph

    with np.errstate(all="ignore"):
        return eval_graph(graph, x, p)
