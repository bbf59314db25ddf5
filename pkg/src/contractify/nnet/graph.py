"""Batched expression graphs with reverse-mode differentiation.

A graph is a topologically ordered list of vector-valued nodes.  Every node
value is a 2-D array ``(batch, size)``; sources that do not depend on the
input (parameters, constants) carry a batch dimension of 1 and broadcast.

Graphs are built with :class:`GraphBuilder`, which hands out :class:`Ref`
handles supporting the usual arithmetic operators, and frozen into an
:class:`ExprGraph` by :meth:`GraphBuilder.build`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

UNARY = ("neg", "scale", "square", "power", "sin", "relu", "tanh", "sum")
BINARY = ("add", "sub", "mul", "min", "dot")
SECANT_FNS = ("sin", "tanh", "relu")


class GraphError(ValueError):
    """Malformed graph or mismatched evaluation arguments."""


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    size: int
    attr: Any = None


@dataclass(frozen=True)
class ExprGraph:
    nodes: tuple[Node, ...]
    n_inputs: int
    n_params: int
    outputs: tuple[int, ...]
    param_layout: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    @property
    def output_sizes(self) -> tuple[int, ...]:
        return tuple(self.nodes[i].size for i in self.outputs)

    @property
    def n_outputs(self) -> int:
        return sum(self.output_sizes)

    def depends_on_input(self) -> np.ndarray:
        """Boolean mask: does node i (transitively) read the graph input."""
        dep = np.zeros(len(self.nodes), dtype=bool)
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                dep[i] = True
            elif node.args:
                dep[i] = any(dep[a] for a in node.args)
        return dep

    def has_op(self, op: str) -> bool:
        return any(n.op == op for n in self.nodes)

    def signature(self) -> list:
        """JSON-friendly structural description (used for hashing)."""
        out = []
        for n in self.nodes:
            attr = n.attr
            if isinstance(attr, np.ndarray):
                attr = [float(v) for v in attr.ravel()]
            elif isinstance(attr, tuple):
                attr = list(attr)
            out.append([n.op, list(n.args), n.size, attr])
        return [out, self.n_inputs, self.n_params, list(self.outputs)]


class Ref:
    """Handle to a node under construction."""

    __slots__ = ("b", "idx", "size")

    def __init__(self, builder: GraphBuilder, idx: int, size: int):
        self.b = builder
        self.idx = idx
        self.size = size

    def _lift(self, other) -> Ref:
        if isinstance(other, Ref):
            return other
        return self.b.const(np.atleast_1d(np.asarray(other, dtype=float)))

    def __add__(self, other):
        return self.b.add(self, self._lift(other))

    def __radd__(self, other):
        return self.b.add(self._lift(other), self)

    def __sub__(self, other):
        return self.b.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.b.sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.b.scale(self, float(other))
        return self.b.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.b.neg(self)

    def __getitem__(self, key):
        if isinstance(key, int):
            key = slice(key, key + 1 if key != -1 else None)
        start, stop, step = key.indices(self.size)
        if step != 1:
            raise GraphError("strided slices are not supported")
        return self.b.slice(self, start, stop)


class GraphBuilder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._param_nodes: dict[str, int] = {}
        self._n_params = 0
        self._input: Ref | None = None
        self._const_cache: dict[bytes, int] = {}

    def _push(self, op: str, args: Sequence[Ref], size: int, attr=None) -> Ref:
        for a in args:
            if a.b is not self:
                raise GraphError("reference belongs to a different builder")
        self.nodes.append(Node(op, tuple(a.idx for a in args), size, attr))
        return Ref(self, len(self.nodes) - 1, size)

    # sources
    def input(self, n: int) -> Ref:
        if self._input is not None:
            if self._input.size != n:
                raise GraphError("graph input already declared with another size")
            return self._input
        self._input = self._push("input", (), n)
        return self._input

    def param(self, name: str, shape: Sequence[int]) -> Ref:
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape))
        if name in self.layout:
            if self.layout[name][1] != shape:
                raise GraphError(f"parameter {name!r} redeclared with shape {shape}")
            return Ref(self, self._param_nodes[name], size)
        offset = self._n_params
        self.layout[name] = (offset, shape)
        self._n_params += size
        ref = self._push("param", (), size, (offset, size))
        self._param_nodes[name] = ref.idx
        return ref

    def const(self, value) -> Ref:
        value = np.array(value, dtype=float).ravel()
        key = value.tobytes()
        if key in self._const_cache:
            return Ref(self, self._const_cache[key], value.size)
        ref = self._push("const", (), value.size, value)
        self._const_cache[key] = ref.idx
        return ref

    # elementwise
    def _binary(self, op: str, a: Ref, b: Ref) -> Ref:
        if a.size != b.size and 1 not in (a.size, b.size):
            raise GraphError(f"{op}: incompatible sizes {a.size} and {b.size}")
        return self._push(op, (a, b), max(a.size, b.size))

    def add(self, a: Ref, b: Ref) -> Ref:
        return self._binary("add", a, b)

    def sub(self, a: Ref, b: Ref) -> Ref:
        return self._binary("sub", a, b)

    def mul(self, a: Ref, b: Ref) -> Ref:
        return self._binary("mul", a, b)

    def min(self, a: Ref, b: Ref) -> Ref:
        return self._binary("min", a, b)

    def neg(self, a: Ref) -> Ref:
        return self._push("neg", (a,), a.size)

    def scale(self, a: Ref, c: float) -> Ref:
        return self._push("scale", (a,), a.size, float(c))

    def square(self, a: Ref) -> Ref:
        return self._push("square", (a,), a.size)

    def power(self, a: Ref, p: int) -> Ref:
        if int(p) != p or p < 2:
            raise GraphError("power exponent must be an integer >= 2")
        return self._push("power", (a,), a.size, int(p))

    def sin(self, a: Ref) -> Ref:
        return self._push("sin", (a,), a.size)

    def relu(self, a: Ref) -> Ref:
        return self._push("relu", (a,), a.size)

    def tanh(self, a: Ref) -> Ref:
        return self._push("tanh", (a,), a.size)

    def act(self, a: Ref, kind: str) -> Ref:
        if kind in ("id", "identity"):
            return a
        return {"relu": self.relu, "tanh": self.tanh}[kind](a)

    # reductions and structure
    def sum(self, a: Ref) -> Ref:
        return self._push("sum", (a,), 1)

    def dot(self, a: Ref, b: Ref) -> Ref:
        if a.size != b.size:
            raise GraphError("dot: size mismatch")
        return self._push("dot", (a, b), 1)

    def sumsq(self, a: Ref) -> Ref:
        return self.sum(self.square(a))

    def matvec(self, w: Ref, x: Ref, rows: int) -> Ref:
        """``reshape(w, (rows, x.size)) @ x``; w may itself depend on the input."""
        if w.size != rows * x.size:
            raise GraphError(f"matvec: {w.size} entries cannot form {rows}x{x.size}")
        return self._push("matvec", (w, x), rows, (rows, x.size))

    def slice(self, a: Ref, start: int, stop: int) -> Ref:
        if not 0 <= start < stop <= a.size:
            raise GraphError("empty or out-of-range slice")
        if start == 0 and stop == a.size:
            return a
        return self._push("slice", (a,), stop - start, (start, stop))

    def concat(self, *parts: Ref) -> Ref:
        if len(parts) == 1:
            return parts[0]
        return self._push("concat", parts, sum(p.size for p in parts))

    def secant(self, fn: str, a: Ref, a2: Ref) -> Ref:
        """Divided difference ``(fn(a2) - fn(a)) / (a2 - a)``, fn'(a) when equal.

        Bound-only primitive: evaluable and interval-propagatable but not
        differentiable.
        """
        if fn not in SECANT_FNS:
            raise GraphError(f"no secant rule for {fn!r}")
        if a.size != a2.size:
            raise GraphError("secant: size mismatch")
        return self._push("secant", (a, a2), a.size, fn)

    def build(self, outputs: Sequence[Ref] | Ref) -> ExprGraph:
        if isinstance(outputs, Ref):
            outputs = [outputs]
        n_in = self._input.size if self._input is not None else 0
        # drop nodes unreachable from the outputs; the input node always stays
        live = set(o.idx for o in outputs)
        for i in range(len(self.nodes) - 1, -1, -1):
            if i in live:
                live.update(self.nodes[i].args)
        if self._input is not None:
            live.add(self._input.idx)
        remap: dict[int, int] = {}
        nodes = []
        for i, node in enumerate(self.nodes):
            if i in live:
                remap[i] = len(nodes)
                nodes.append(Node(node.op, tuple(remap[a] for a in node.args), node.size, node.attr))
        return ExprGraph(
            nodes=tuple(nodes),
            n_inputs=n_in,
            n_params=self._n_params,
            outputs=tuple(remap[o.idx] for o in outputs),
            param_layout=dict(self.layout),
        )


# ---------------------------------------------------------------------------
# forward evaluation


def _sinhc(d):
    small = np.abs(d) < 1e-4
    safe = np.where(small, 1.0, d)
    return np.where(small, 1.0 + d * d / 6.0, np.sinh(safe) / safe)


def secant_value(fn: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    if fn == "sin":
        return np.cos(0.5 * (a + b)) * np.sinc(d / (2 * np.pi))
    if fn == "tanh":
        # tanh(b) - tanh(a) = sinh(b - a) / (cosh a cosh b)
        with np.errstate(over="ignore"):
            sech_a = 1.0 / np.cosh(a)
            sech_b = 1.0 / np.cosh(b)
        return _sinhc(np.clip(d, -700, 700)) * sech_a * sech_b
    if fn == "relu":
        nz = d != 0
        safe = np.where(nz, d, 1.0)
        chord = (np.maximum(b, 0) - np.maximum(a, 0)) / safe
        return np.where(nz, chord, (a > 0).astype(float))
    raise GraphError(fn)


def _check_inputs(graph: ExprGraph, inputs, params):
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != graph.n_inputs:
        raise GraphError(
            f"expected inputs of length {graph.n_inputs}, got shape {np.shape(inputs)}"
        )
    p = np.zeros(0) if params is None else np.asarray(params, dtype=float).ravel()
    if p.size != graph.n_params:
        raise GraphError(f"expected {graph.n_params} parameters, got {p.size}")
    return x, p


def forward(graph: ExprGraph, inputs, params=None) -> list[np.ndarray]:
    """Evaluate every node; returns the per-node value list (the tape)."""
    x, p = _check_inputs(graph, inputs, params)
    vals: list[np.ndarray] = []
    for node in graph.nodes:
        op = node.op
        a = vals[node.args[0]] if node.args else None
        if op == "input":
            v = x
        elif op == "param":
            off, size = node.attr
            v = p[off : off + size][None, :]
        elif op == "const":
            v = node.attr[None, :]
        elif op == "add":
            v = a + vals[node.args[1]]
        elif op == "sub":
            v = a - vals[node.args[1]]
        elif op == "mul":
            v = a * vals[node.args[1]]
        elif op == "min":
            v = np.minimum(a, vals[node.args[1]])
        elif op == "neg":
            v = -a
        elif op == "scale":
            v = node.attr * a
        elif op == "square":
            v = a * a
        elif op == "power":
            v = a**node.attr
        elif op == "sin":
            v = np.sin(a)
        elif op == "relu":
            v = np.maximum(a, 0.0)
        elif op == "tanh":
            v = np.tanh(a)
        elif op == "sum":
            v = a.sum(axis=1, keepdims=True)
        elif op == "dot":
            v = (a * vals[node.args[1]]).sum(axis=1, keepdims=True)
        elif op == "matvec":
            rows, cols = node.attr
            w = a.reshape(a.shape[0], rows, cols)
            xv = vals[node.args[1]]
            if w.shape[0] == 1:
                v = xv @ w[0].T
            else:
                v = np.matmul(w, xv[:, :, None])[:, :, 0]
        elif op == "slice":
            s, e = node.attr
            v = a[:, s:e]
        elif op == "concat":
            parts = [vals[i] for i in node.args]
            bsz = max(q.shape[0] for q in parts)
            v = np.concatenate([np.broadcast_to(q, (bsz, q.shape[1])) for q in parts], axis=1)
        elif op == "secant":
            v = secant_value(node.attr, a, vals[node.args[1]])
        else:
            raise GraphError(f"unknown op {op!r}")
        vals.append(v)
    return vals


def eval_graph(graph: ExprGraph, inputs, params=None) -> np.ndarray:
    """Forward values of all declared outputs, concatenated: ``(batch, n_outputs)``.

    A 1-D input returns a 1-D result.
    """
    vals = forward(graph, inputs, params)
    bsz = np.atleast_2d(np.asarray(inputs, dtype=float)).shape[0]
    out = np.concatenate(
        [np.broadcast_to(vals[i], (bsz, vals[i].shape[1])) for i in graph.outputs], axis=1
    )
    if np.ndim(inputs) == 1:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# reverse mode


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape[0] != shape[0]:
        g = g.sum(axis=0, keepdims=True)
    if g.shape[1] != shape[1]:
        g = g.sum(axis=1, keepdims=True)
    return g


def vjp(graph: ExprGraph, vals: list[np.ndarray], seed: np.ndarray):
    """Pull an output cotangent ``(batch, n_outputs)`` back to inputs and params.

    Returns ``(input_cotangent (batch, n_inputs), param_cotangent (n_params,))``;
    the parameter cotangent is summed over the batch.
    """
    n = len(graph.nodes)
    cot: list[np.ndarray | None] = [None] * n
    col = 0
    for i in graph.outputs:
        s = graph.nodes[i].size
        g = seed[:, col : col + s]
        cot[i] = g if cot[i] is None else cot[i] + g
        col += s

    def acc(j: int, g: np.ndarray) -> None:
        g = _unbroadcast(g, vals[j].shape) if g.shape != vals[j].shape else g
        cot[j] = g if cot[j] is None else cot[j] + g

    bsz = seed.shape[0]
    x_cot = np.zeros((bsz, graph.n_inputs))
    p_cot = np.zeros(graph.n_params)
    for k in range(n - 1, -1, -1):
        g = cot[k]
        if g is None:
            continue
        node = graph.nodes[k]
        op = node.op
        args = node.args
        if op == "input":
            x_cot = x_cot + np.broadcast_to(g, x_cot.shape)
        elif op == "param":
            off, size = node.attr
            p_cot[off : off + size] += g.sum(axis=0)
        elif op == "const":
            pass
        elif op == "add":
            acc(args[0], g)
            acc(args[1], g)
        elif op == "sub":
            acc(args[0], g)
            acc(args[1], -g)
        elif op == "mul":
            acc(args[0], g * vals[args[1]])
            acc(args[1], g * vals[args[0]])
        elif op == "min":
            pick = vals[args[0]] <= vals[args[1]]
            acc(args[0], np.where(pick, g, 0.0))
            acc(args[1], np.where(pick, 0.0, g))
        elif op == "neg":
            acc(args[0], -g)
        elif op == "scale":
            acc(args[0], node.attr * g)
        elif op == "square":
            acc(args[0], 2.0 * vals[args[0]] * g)
        elif op == "power":
            p = node.attr
            acc(args[0], p * vals[args[0]] ** (p - 1) * g)
        elif op == "sin":
            acc(args[0], np.cos(vals[args[0]]) * g)
        elif op == "relu":
            acc(args[0], (vals[args[0]] > 0) * g)
        elif op == "tanh":
            acc(args[0], (1.0 - vals[k] ** 2) * g)
        elif op == "sum":
            acc(args[0], np.broadcast_to(g, (g.shape[0], vals[args[0]].shape[1])))
        elif op == "dot":
            acc(args[0], g * vals[args[1]])
            acc(args[1], g * vals[args[0]])
        elif op == "matvec":
            rows, cols = node.attr
            wv = vals[args[0]]
            xv = vals[args[1]]
            w = wv.reshape(wv.shape[0], rows, cols)
            if w.shape[0] == 1:
                acc(args[1], g @ w[0])
            else:
                acc(args[1], np.matmul(g[:, None, :], w)[:, 0, :])
            if wv.shape[0] == 1:
                acc(args[0], (g.T @ np.broadcast_to(xv, (g.shape[0], cols))).reshape(1, -1))
            else:
                acc(args[0], (g[:, :, None] * xv[:, None, :]).reshape(-1, rows * cols))
        elif op == "slice":
            s, e = node.attr
            full = np.zeros((g.shape[0], vals[args[0]].shape[1]))
            full[:, s:e] = g
            acc(args[0], full)
        elif op == "concat":
            c = 0
            for j in args:
                w = graph.nodes[j].size
                acc(j, g[:, c : c + w])
                c += w
        elif op == "secant":
            raise GraphError("secant nodes are bound-only and cannot be differentiated")
        else:
            raise GraphError(f"unknown op {op!r}")
    return x_cot, p_cot


def gradient(graph: ExprGraph, inputs, params=None, root: int = 0):
    """Reverse-mode derivative of scalar output ``root``.

    Returns ``(value, input_cotangent, param_cotangent)``; with batched inputs
    the value and input cotangents are per-sample and the parameter
    cotangent is summed over the batch.
    """
    if graph.nodes[graph.outputs[root]].size != 1:
        raise GraphError("gradient root must be a scalar output")
    vals = forward(graph, inputs, params)
    bsz = max(1, np.atleast_2d(np.asarray(inputs, dtype=float)).shape[0])
    seed = np.zeros((bsz, graph.n_outputs))
    col = sum(graph.output_sizes[:root])
    seed[:, col] = 1.0
    x_cot, p_cot = vjp(graph, vals, seed)
    value = np.broadcast_to(vals[graph.outputs[root]], (bsz, 1))[:, 0]
    if np.ndim(inputs) == 1:
        return value[0], x_cot[0], p_cot
    return value, x_cot, p_cot
