"""Graph inlining and divided-difference (slope) transformation.

``difference_quotient`` rewrites a graph ``g`` into nodes computing

    q(x, v, t) = (g(x + t v) - g(x)) / t

without any division: every primitive contributes an exact slope rule, so
``q`` stays finite (and tightly boundable) as ``t -> 0``.  Nonlinear
activations use ``secant`` nodes whose interval enclosure follows from the
mean value theorem.
"""

from __future__ import annotations

from .graph import ExprGraph, GraphBuilder, GraphError, Ref


def _source(b: GraphBuilder, graph: ExprGraph, node) -> Ref:
    if node.op == "const":
        return b.const(node.attr)
    if node.op == "param":
        off, size = node.attr
        for name, (o, shape) in graph.param_layout.items():
            if o == off:
                return b.param(name, shape)
        raise GraphError("parameter node missing from layout")
    raise GraphError(node.op)


def _declare_params(b: GraphBuilder, graph: ExprGraph) -> None:
    # keep the source parameter layout even for parameters the outputs never touch
    for name, (_, shape) in sorted(graph.param_layout.items(), key=lambda kv: kv[1][0]):
        b.param(name, shape)


def _replay(b: GraphBuilder, node, a: list[Ref]) -> Ref:
    op = node.op
    if op in ("add", "sub", "mul", "min"):
        return getattr(b, op)(a[0], a[1])
    if op in ("neg", "square", "sin", "relu", "tanh", "sum"):
        return getattr(b, op)(a[0])
    if op == "scale":
        return b.scale(a[0], node.attr)
    if op == "power":
        return b.power(a[0], node.attr)
    if op == "dot":
        return b.dot(a[0], a[1])
    if op == "matvec":
        return b.matvec(a[0], a[1], node.attr[0])
    if op == "slice":
        return b.slice(a[0], *node.attr)
    if op == "concat":
        return b.concat(*a)
    if op == "secant":
        return b.secant(node.attr, a[0], a[1])
    raise GraphError(f"cannot replay op {op!r}")


def inline(b: GraphBuilder, graph: ExprGraph, x: Ref) -> list[Ref]:
    """Append ``graph`` evaluated at ``x`` to builder ``b``; returns its outputs."""
    if x.size != graph.n_inputs:
        raise GraphError(f"inline: graph expects {graph.n_inputs} inputs, got {x.size}")
    _declare_params(b, graph)
    refs: list[Ref] = []
    for node in graph.nodes:
        if node.op == "input":
            refs.append(x)
        elif node.op in ("const", "param"):
            refs.append(_source(b, graph, node))
        else:
            refs.append(_replay(b, node, [refs[i] for i in node.args]))
    return [refs[i] for i in graph.outputs]


def difference_quotient(
    b: GraphBuilder, graph: ExprGraph, base: Ref, direction: Ref, t: Ref
) -> tuple[list[Ref], list[Ref], list[Ref]]:
    """Values at ``base``, at ``base + t*direction`` and the slope quotient.

    Returns three lists aligned with ``graph.outputs``.  ``t`` must be a
    size-1 node; the quotient is exact for every ``t`` (including 0, where
    it equals the directional derivative wherever that exists).
    """
    if t.size != 1:
        raise GraphError("t must be scalar")
    _declare_params(b, graph)
    moved = b.add(base, b.mul(t, direction))
    v0: list[Ref] = []
    v1: list[Ref] = []
    dq: list[Ref | None] = []
    zero_cache: dict[int, Ref] = {}

    def zeros(size: int) -> Ref:
        if size not in zero_cache:
            zero_cache[size] = b.const([0.0] * size)
        return zero_cache[size]

    for node in graph.nodes:
        op = node.op
        args = node.args
        if op == "input":
            v0.append(base)
            v1.append(moved)
            dq.append(direction)
            continue
        if op in ("const", "param"):
            r = _source(b, graph, node)
            v0.append(r)
            v1.append(r)
            dq.append(None)
            continue
        a0 = [v0[i] for i in args]
        a1 = [v1[i] for i in args]
        d = [dq[i] for i in args]
        r0 = _replay(b, node, a0)
        r1 = _replay(b, node, a1)
        if all(x is None for x in d):
            v0.append(r0)
            v1.append(r1)
            dq.append(None)
            continue
        if op in ("add", "sub"):
            da = d[0] if d[0] is not None else zeros(graph.nodes[args[0]].size)
            db = d[1] if d[1] is not None else zeros(graph.nodes[args[1]].size)
            q = getattr(b, op)(da, db)
        elif op in ("neg", "sum"):
            q = getattr(b, op)(d[0])
        elif op == "scale":
            q = b.scale(d[0], node.attr)
        elif op == "slice":
            q = b.slice(d[0], *node.attr)
        elif op == "concat":
            q = b.concat(*[
                di if di is not None else zeros(graph.nodes[j].size) for di, j in zip(d, args)
            ])
        elif op == "mul":
            # a'b' - ab = (a' - a) b' + a (b' - b)
            terms = []
            if d[0] is not None:
                terms.append(b.mul(d[0], a1[1]))
            if d[1] is not None:
                terms.append(b.mul(a0[0], d[1]))
            q = terms[0] if len(terms) == 1 else b.add(*terms)
        elif op == "dot":
            terms = []
            if d[0] is not None:
                terms.append(b.dot(d[0], a1[1]))
            if d[1] is not None:
                terms.append(b.dot(a0[0], d[1]))
            q = terms[0] if len(terms) == 1 else b.add(*terms)
        elif op == "matvec":
            rows = node.attr[0]
            terms = []
            if d[0] is not None:
                terms.append(b.matvec(d[0], a1[1], rows))
            if d[1] is not None:
                terms.append(b.matvec(a0[0], d[1], rows))
            q = terms[0] if len(terms) == 1 else b.add(*terms)
        elif op == "square":
            q = b.mul(d[0], b.add(a0[0], a1[0]))
        elif op == "power":
            # a'^p - a^p = (a' - a) * sum_k a'^k a^(p-1-k)
            p = node.attr
            acc = None
            for k in range(p):
                parts = []
                if k:
                    parts.append(a1[0] if k == 1 else b.power(a1[0], k))
                if p - 1 - k:
                    parts.append(a0[0] if p - 1 - k == 1 else b.power(a0[0], p - 1 - k))
                term = parts[0] if len(parts) == 1 else b.mul(parts[0], parts[1])
                acc = term if acc is None else b.add(acc, term)
            q = b.mul(d[0], acc)
        elif op == "min":
            # min(a, b) = a - relu(a - b)
            da = d[0] if d[0] is not None else zeros(graph.nodes[args[0]].size)
            db = d[1] if d[1] is not None else zeros(graph.nodes[args[1]].size)
            gap = b.secant("relu", b.sub(a0[0], a0[1]), b.sub(a1[0], a1[1]))
            q = b.sub(da, b.mul(gap, b.sub(da, db)))
        elif op in ("sin", "tanh", "relu"):
            q = b.mul(b.secant(op, a0[0], a1[0]), d[0])
        else:
            raise GraphError(f"no slope rule for op {op!r}")
        v0.append(r0)
        v1.append(r1)
        dq.append(q)

    outs = list(graph.outputs)
    quot = [
        dq[i] if dq[i] is not None else zeros(graph.nodes[i].size) for i in outs
    ]
    return [v0[i] for i in outs], [v1[i] for i in outs], quot
