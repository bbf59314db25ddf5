"""Disjunctive specifications: "for every input in the domain, some clause holds".

Clauses read the outputs of two graphs over the same input coordinates:

* the *bound graph*, which the verifier encloses over boxes, and
* the *attack graph*, differentiable and sign-equivalent to the bound graph
  at every point it is evaluated on, which the falsifier ascends and which
  re-checks witnesses.

For most specs the two are the same graph.  They differ when a clause
expression vanishes identically on part of the domain (e.g. ``G(x, 0) = 0``)
and the bound graph carries a rescaled version of it.

Every clause has a *margin*: non-negative (positive for exclusions) exactly
when the clause holds.  A witness must give every clause a strictly
negative margin.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..box import IntervalBox
from ..nnet.graph import ExprGraph


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExprNonNeg:
    """Output ``idx`` is non-negative."""

    idx: int

    def outputs(self):
        return (self.idx,)

    def proof_margin(self, lo, hi):
        return lo[:, self.idx]

    def proved(self, lo, hi):
        return lo[:, self.idx] >= 0.0

    def margin(self, y):
        seed = np.zeros_like(y)
        seed[:, self.idx] = 1.0
        return y[:, self.idx], seed

    def describe(self):
        return {"kind": "nonneg", "idx": self.idx}


@dataclass(frozen=True)
class BoxExclusion:
    """The outputs ``idx`` lie strictly outside ``box``."""

    idx: tuple[int, ...]
    box: IntervalBox

    def outputs(self):
        return self.idx

    def _gaps(self, lo, hi):
        sel = list(self.idx)
        return np.maximum(lo[:, sel] - self.box.hi, self.box.lo - hi[:, sel])

    def proof_margin(self, lo, hi):
        return self._gaps(lo, hi).max(axis=1)

    def proved(self, lo, hi):
        return self.proof_margin(lo, hi) > 0.0

    def margin(self, y):
        sel = list(self.idx)
        up = y[:, sel] - self.box.hi
        down = self.box.lo - y[:, sel]
        g = np.maximum(up, down)
        k = g.argmax(axis=1)
        rows = np.arange(len(y))
        seed = np.zeros_like(y)
        sign = np.where(up[rows, k] >= down[rows, k], 1.0, -1.0)
        seed[rows, np.asarray(sel)[k]] = sign
        return g[rows, k], seed

    def describe(self):
        return {"kind": "exclusion", "idx": list(self.idx), "box": self.box.to_json()}


@dataclass(frozen=True)
class BoxInclusion:
    """The outputs ``idx`` lie in the closed ``box``."""

    idx: tuple[int, ...]
    box: IntervalBox

    def outputs(self):
        return self.idx

    def proof_margin(self, lo, hi):
        sel = list(self.idx)
        return np.minimum(self.box.hi - hi[:, sel], lo[:, sel] - self.box.lo).min(axis=1)

    def proved(self, lo, hi):
        return self.proof_margin(lo, hi) >= 0.0

    def margin(self, y):
        sel = list(self.idx)
        up = self.box.hi - y[:, sel]
        down = y[:, sel] - self.box.lo
        g = np.minimum(up, down)
        k = g.argmin(axis=1)
        rows = np.arange(len(y))
        seed = np.zeros_like(y)
        sign = np.where(up[rows, k] <= down[rows, k], -1.0, 1.0)
        seed[rows, np.asarray(sel)[k]] = sign
        return g[rows, k], seed

    def describe(self):
        return {"kind": "inclusion", "idx": list(self.idx), "box": self.box.to_json()}


@dataclass(frozen=True)
class Conjunction:
    """All parts hold; each must be proved on the same box."""

    parts: tuple

    def outputs(self):
        return tuple(i for p in self.parts for i in p.outputs())

    def proof_margin(self, lo, hi):
        return np.min([p.proof_margin(lo, hi) for p in self.parts], axis=0)

    def proved(self, lo, hi):
        return np.all([p.proved(lo, hi) for p in self.parts], axis=0)

    def margin(self, y):
        ms, seeds = zip(*(p.margin(y) for p in self.parts))
        ms = np.stack(ms)
        k = ms.argmin(axis=0)
        rows = np.arange(len(y))
        return ms[k, rows], np.stack(seeds)[k, rows]

    def describe(self):
        return {"kind": "and", "parts": [p.describe() for p in self.parts]}


Clause = ExprNonNeg | BoxExclusion | BoxInclusion | Conjunction


@dataclass(frozen=True)
class DisjunctiveSpec:
    """``forall z in union(domain): some clause holds``."""

    clauses: tuple
    domain: tuple[IntervalBox, ...]
    bound_graph: ExprGraph
    attack_graph: ExprGraph | None = None
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decode: Callable | None = field(default=None, compare=False)
    name: str = "spec"

    def __post_init__(self):
        if not self.clauses:
            raise SpecError("a specification needs at least one clause")
        dom = (self.domain,) if isinstance(self.domain, IntervalBox) else tuple(self.domain)
        if not dom:
            raise SpecError("empty domain")
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "clauses", tuple(self.clauses))
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float).ravel())
        if self.attack_graph is None:
            object.__setattr__(self, "attack_graph", self.bound_graph)
        n = self.bound_graph.n_inputs
        for g in (self.bound_graph, self.attack_graph):
            if g.n_inputs != n:
                raise SpecError("bound and attack graphs must share their inputs")
            if g.n_params != self.params.size:
                raise SpecError(f"graph expects {g.n_params} parameters, got {self.params.size}")
        if self.attack_graph.n_outputs != self.bound_graph.n_outputs:
            raise SpecError("bound and attack graphs must have the same outputs")
        if self.attack_graph.has_op("secant"):
            raise SpecError("the attack graph must be differentiable (no secant nodes)")
        for box in dom:
            if box.dim != n:
                raise SpecError(f"domain box of dim {box.dim} for a {n}-input graph")
        for c in self.clauses:
            if max(c.outputs()) >= self.bound_graph.n_outputs:
                raise SpecError("clause refers to a missing graph output")

    @property
    def dim(self) -> int:
        return self.bound_graph.n_inputs

    @property
    def hull(self) -> IntervalBox:
        return IntervalBox(
            np.min([b.lo for b in self.domain], axis=0), np.max([b.hi for b in self.domain], axis=0)
        )

    def proof(self, lo, hi):
        """Per box: best clause proof margin, and whether any clause is proved."""
        margins = np.stack([c.proof_margin(lo, hi) for c in self.clauses])
        proved = np.any([c.proved(lo, hi) for c in self.clauses], axis=0)
        return margins, proved

    def margins(self, y):
        """Clause margins ``(n_clauses, batch)`` and their output seeds."""
        ms, seeds = zip(*(c.margin(y) for c in self.clauses))
        return np.stack(ms), np.stack(seeds)

    def violated(self, y) -> np.ndarray:
        """Points where every clause has a strictly negative margin."""
        ms, _ = self.margins(y)
        return np.all(ms < 0.0, axis=0)

    def point(self, z) -> dict:
        z = np.asarray(z, dtype=float)
        return self.decode(z) if self.decode is not None else {"z": z.tolist()}

    def digest(self) -> str:
        blob = json.dumps(
            {
                "bound": self.bound_graph.signature(),
                "attack": self.attack_graph.signature(),
                "clauses": [c.describe() for c in self.clauses],
                "domain": [b.to_json() for b in self.domain],
                "params": [float(v) for v in self.params],
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()
