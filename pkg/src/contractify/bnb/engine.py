"""Best-first branch and bound over unions of boxes, with a PGD falsifier."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..boundprop import linear_relax, propagate_box
from ..box import IntervalBox
from ..nnet.graph import eval_graph, forward, vjp
from .spec import DisjunctiveSpec, ExprNonNeg

VERIFIED = "Verified"
FALSIFIED = "Falsified"
UNKNOWN = "Unknown"


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 30
    step_frac: float = 0.1
    restarts: int = 5

    def __post_init__(self):
        if self.steps < 0 or self.restarts < 1 or not self.step_frac > 0:
            raise ValueError("PGD needs steps >= 0, restarts >= 1 and a positive step")


@dataclass(frozen=True)
class Budget:
    """Limits and knobs of one verification run."""

    max_boxes: int = 2_000_000
    max_depth: int = 200
    time_limit: float = 1800.0
    batch: int = 1024
    method: str = "linear"
    threads: int = 1
    seed: int = 0
    min_width: float = 1e-6
    pgd: PgdConfig = field(default_factory=PgdConfig)
    pgd_every: int = 16
    pgd_top: int = 32

    def __post_init__(self):
        if self.max_boxes < 1:
            raise ValueError("budget must allow at least one box")
        if self.max_depth < 0 or not self.time_limit > 0 or self.batch < 1:
            raise ValueError("invalid budget")
        if self.method not in ("linear", "ibp"):
            raise ValueError(f"unknown bounding method {self.method!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class VerifyResult:
    status: str
    witness: dict | None
    stats: dict
    undischarged_lo: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    undischarged_hi: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    spec_hash: str = ""

    @property
    def verified(self) -> bool:
        return self.status == VERIFIED

    def smallest_undischarged(self):
        if not len(self.undischarged_lo):
            return None
        vol = np.prod(np.maximum(self.undischarged_hi - self.undischarged_lo, 0.0), axis=1)
        k = int(np.argmin(vol))
        return IntervalBox(self.undischarged_lo[k], self.undischarged_hi[k])

    def to_json(self, max_boxes: int | None = None) -> dict:
        lo, hi = self.undischarged_lo, self.undischarged_hi
        if max_boxes is not None:
            lo, hi = lo[:max_boxes], hi[:max_boxes]
        small = self.smallest_undischarged()
        return {
            "status": self.status,
            "spec_hash": self.spec_hash,
            "witness": self.witness,
            "stats": self.stats,
            "undischarged": {
                "count": int(len(self.undischarged_lo)),
                "smallest": None if small is None else small.to_json(),
                "boxes": [{"lo": a.tolist(), "hi": b.tolist()} for a, b in zip(lo, hi)],
            },
        }


# ---------------------------------------------------------------------------
# falsification


def _objective(spec: DisjunctiveSpec, z):
    """Largest clause margin per point (negative everywhere = violation) and its gradient."""
    vals = forward(spec.attack_graph, z, spec.params)
    g = spec.attack_graph
    bsz = z.shape[0]
    y = np.concatenate(
        [np.broadcast_to(vals[i], (bsz, g.nodes[i].size)) for i in g.outputs], axis=1
    )
    ms, seeds = spec.margins(y)
    k = ms.argmax(axis=0)
    rows = np.arange(bsz)
    x_cot, _ = vjp(g, vals, seeds[k, rows])
    return ms[k, rows], ms, x_cot


def check_witness(spec: DisjunctiveSpec, z) -> dict | None:
    """Re-evaluate both graphs at ``z``; a witness if every clause fails strictly."""
    z = np.asarray(z, dtype=float).reshape(1, -1)
    if not any(np.all((z >= b.lo) & (z <= b.hi)) for b in spec.domain):
        return None
    y = eval_graph(spec.attack_graph, z, spec.params)
    ms, _ = spec.margins(y)
    if not np.all(ms[:, 0] < 0.0):
        return None
    # the bound graph avoids the cancellation of the plain expressions, so
    # agreement rules out witnesses that are pure rounding noise
    if spec.bound_graph is not spec.attack_graph:
        yb = eval_graph(spec.bound_graph, z, spec.params)
        if not np.all(spec.margins(yb)[0][:, 0] < 0.0):
            return None
    return {"z": z[0].tolist(), "margins": ms[:, 0].tolist(), **spec.point(z[0])}


def _first_witness(spec, z):
    if not len(z):
        return None
    y = eval_graph(spec.attack_graph, z, spec.params)
    hits = np.flatnonzero(spec.violated(y))
    for i in hits:
        w = check_witness(spec, z[i])
        if w is not None:
            return w
    return None


def falsify_boxes(spec: DisjunctiveSpec, lo, hi, pgd: PgdConfig, rng) -> dict | None:
    """Projected sign-gradient descent on the largest clause margin inside each box."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    nb, d = lo.shape
    r = pgd.restarts
    blo = np.repeat(lo, r, axis=0)
    bhi = np.repeat(hi, r, axis=0)
    z = blo + (bhi - blo) * rng.random((nb * r, d))
    z[::r] = 0.5 * (lo + hi)
    step = pgd.step_frac * (bhi - blo)
    w = _first_witness(spec, z)
    for _ in range(pgd.steps):
        if w is not None:
            return w
        _, _, grad = _objective(spec, z)
        z = np.clip(z - step * np.sign(grad), blo, bhi)
        w = _first_witness(spec, z)
    return w


def falsify(spec: DisjunctiveSpec, box: IntervalBox | None = None, pgd: PgdConfig | None = None,
            seed: int = 0) -> dict | None:
    """Search ``box`` (default: every domain box) for a point violating all clauses."""
    pgd = pgd or PgdConfig()
    rng = np.random.default_rng(seed)
    boxes = spec.domain if box is None else (box,)
    lo = np.stack([b.lo for b in boxes])
    hi = np.stack([b.hi for b in boxes])
    return falsify_boxes(spec, lo, hi, pgd, rng)


# ---------------------------------------------------------------------------
# bounding and splitting


def _bounds(spec, lo, hi, method):
    if method == "ibp":
        blo, bhi = propagate_box(spec.bound_graph, lo, hi, spec.params)
        return blo, bhi, None
    lb = linear_relax(spec.bound_graph, lo, hi, spec.params)
    return lb.lo, lb.hi, lb


def _vertex_candidates(spec, lo, hi, lb):
    """Box vertices minimizing each plain clause's affine lower bound."""
    if lb is None:
        return []
    out = []
    for c in spec.clauses:
        if isinstance(c, ExprNonNeg):
            a = lb.al[:, c.idx, :]
            out.append(np.where(a > 0, lo, hi))
    return out


def split_scores(spec: DisjunctiveSpec, lo, hi, clause_idx, min_width=0.0, scale=None):
    """Per-dimension split priority: sensitivity x width.

    Sensitivity is a central difference of the chosen clause's pointwise
    margin on the bound graph, taken over half of each box width.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    nb, d = lo.shape
    w = hi - lo
    scale = np.ones(d) if scale is None else scale
    ok = w > min_width * scale
    c = 0.5 * (lo + hi)
    pts = np.repeat(c[:, None, :], 2 * d, axis=1)
    eye = np.eye(d)
    pts[:, 0::2, :] += 0.25 * w[:, None, :] * eye
    pts[:, 1::2, :] -= 0.25 * w[:, None, :] * eye
    y = eval_graph(spec.bound_graph, pts.reshape(-1, d), spec.params)
    ms, _ = spec.margins(y)
    ms = ms.reshape(len(spec.clauses), nb, 2 * d)
    m = ms[np.asarray(clause_idx), np.arange(nb)]
    diff = np.abs(m[:, 0::2] - m[:, 1::2])
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(ok, diff / np.where(ok, 0.5 * w, 1.0), 0.0)
    sens = np.nan_to_num(sens, nan=0.0, posinf=1e300)
    n_ok = np.maximum(ok.sum(axis=1, keepdims=True), 1)
    base = 0.1 * sens.sum(axis=1, keepdims=True) / n_ok + 1e-300
    score = (sens + base) * w
    return np.where(ok, score, -np.inf)


def split(lo, hi, dim):
    """Bisect each box along ``dim``; the children partition the parent."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    rows = np.arange(len(lo))
    mid = 0.5 * (lo[rows, dim] + hi[rows, dim])
    hi1 = hi.copy()
    hi1[rows, dim] = mid
    lo2 = lo.copy()
    lo2[rows, dim] = mid
    return (lo, hi1), (lo2, hi)


@dataclass
class _Chunk:
    proved: np.ndarray
    best: np.ndarray
    witness: dict | None
    child_lo: np.ndarray
    child_hi: np.ndarray
    child_depth: np.ndarray
    child_prio: np.ndarray
    floor_lo: np.ndarray
    floor_hi: np.ndarray
    split_dims: np.ndarray


def _process(spec, lo, hi, depth, budget: Budget, scale):
    blo, bhi, lb = _bounds(spec, lo, hi, budget.method)
    margins, proved = spec.proof(blo, bhi)
    best = margins.max(axis=0)
    open_ = ~proved
    witness = None
    if open_.any():
        olo, ohi = lo[open_], hi[open_]
        cands = [0.5 * (olo + ohi)]
        if lb is not None:
            sub = type(lb)(lb.al[open_], lb.bl[open_], lb.au[open_], lb.bu[open_],
                           lb.lo[open_], lb.hi[open_])
            cands += _vertex_candidates(spec, olo, ohi, sub)
        witness = _first_witness(spec, np.concatenate(cands))
    d = lo.shape[1]
    olo, ohi, odep = lo[open_], hi[open_], depth[open_]
    obest = best[open_]
    tight = margins[:, open_].argmax(axis=0)
    scores = split_scores(spec, olo, ohi, tight, budget.min_width, scale) if len(olo) else np.zeros((0, d))
    can = np.isfinite(scores).any(axis=1) & (odep < budget.max_depth)
    dims = scores[can].argmax(axis=1)
    (l1, h1), (l2, h2) = split(olo[can], ohi[can], dims)
    child_lo = np.concatenate([l1, l2])
    child_hi = np.concatenate([h1, h2])
    child_depth = np.concatenate([odep[can] + 1] * 2)
    child_prio = np.concatenate([obest[can]] * 2)
    return _Chunk(proved, best, witness, child_lo, child_hi, child_depth, child_prio,
                  olo[~can], ohi[~can], dims)


def verify(spec: DisjunctiveSpec, budget: Budget | None = None) -> VerifyResult:
    """Discharge every domain box by proving some clause on it, or find a witness."""
    budget = budget or Budget()
    t0 = time.perf_counter()
    rng = np.random.default_rng(budget.seed)
    hull = spec.hull
    scale = np.where(hull.width > 0, hull.width, 1.0)
    d = spec.dim
    digest = spec.digest()

    front_lo = np.stack([b.lo for b in spec.domain])
    front_hi = np.stack([b.hi for b in spec.domain])
    front_dep = np.zeros(len(front_lo), dtype=int)
    front_prio = np.full(len(front_lo), -np.inf)
    floor_lo = [np.zeros((0, d))]
    floor_hi = [np.zeros((0, d))]
    stats = {"boxes": 0, "max_depth": 0, "rounds": 0, "pgd_runs": 0,
             "min_margin": float("inf"), "split_dims": [0] * d, "threads": budget.threads,
             "method": budget.method}

    def result(status, witness=None, rest=None):
        stats["wall_time"] = time.perf_counter() - t0
        if not np.isfinite(stats["min_margin"]):
            stats["min_margin"] = None
        ulo = np.concatenate(floor_lo + ([rest[0]] if rest else []))
        uhi = np.concatenate(floor_hi + ([rest[1]] if rest else []))
        if status == VERIFIED:
            ulo, uhi = np.zeros((0, d)), np.zeros((0, d))
        return VerifyResult(status, witness, stats, ulo, uhi, digest)

    w = falsify_boxes(spec, front_lo, front_hi, budget.pgd, rng)
    stats["pgd_runs"] += 1
    if w is not None:
        return result(FALSIFIED, w)

    pool = ThreadPoolExecutor(budget.threads) if budget.threads > 1 else None
    try:
        while len(front_lo):
            if stats["boxes"] >= budget.max_boxes or time.perf_counter() - t0 > budget.time_limit:
                return result(UNKNOWN, rest=(front_lo, front_hi))
            k = min(budget.batch, len(front_lo), budget.max_boxes - stats["boxes"])
            if k < len(front_lo):
                sel = np.argpartition(front_prio, k - 1)[:k]
                sel = sel[np.lexsort((sel, front_prio[sel]))]
            else:
                sel = np.lexsort((np.arange(len(front_lo)), front_prio))
            keep = np.ones(len(front_lo), dtype=bool)
            keep[sel] = False
            lo, hi, dep = front_lo[sel], front_hi[sel], front_dep[sel]
            front_lo, front_hi = front_lo[keep], front_hi[keep]
            front_dep, front_prio = front_dep[keep], front_prio[keep]

            if pool is not None and len(lo) >= 2 * budget.threads:
                parts = np.array_split(np.arange(len(lo)), budget.threads)
                chunks = list(pool.map(
                    lambda ix: _process(spec, lo[ix], hi[ix], dep[ix], budget, scale), parts))
            else:
                chunks = [_process(spec, lo, hi, dep, budget, scale)]

            stats["boxes"] += len(lo)
            stats["rounds"] += 1
            stats["max_depth"] = max(stats["max_depth"], int(dep.max()))
            stats["min_margin"] = min(stats["min_margin"],
                                      float(min(c.best.min() for c in chunks)))
            for c in chunks:
                if c.witness is not None:
                    return result(FALSIFIED, c.witness)
            for c in chunks:
                for dim in c.split_dims:
                    stats["split_dims"][int(dim)] += 1
                floor_lo.append(c.floor_lo)
                floor_hi.append(c.floor_hi)
            new_lo = np.concatenate([c.child_lo for c in chunks])
            new_hi = np.concatenate([c.child_hi for c in chunks])
            new_prio = np.concatenate([c.child_prio for c in chunks])

            if len(new_lo) and stats["rounds"] % budget.pgd_every == 0:
                top = np.lexsort((np.arange(len(new_prio)), new_prio))[: budget.pgd_top]
                w = falsify_boxes(spec, new_lo[top], new_hi[top], budget.pgd, rng)
                stats["pgd_runs"] += 1
                if w is not None:
                    return result(FALSIFIED, w)

            front_lo = np.concatenate([front_lo, new_lo])
            front_hi = np.concatenate([front_hi, new_hi])
            front_dep = np.concatenate([front_dep] + [c.child_depth for c in chunks])
            front_prio = np.concatenate([front_prio, new_prio])
    finally:
        if pool is not None:
            pool.shutdown()

    if sum(len(f) for f in floor_lo):
        return result(UNKNOWN)
    return result(VERIFIED)
