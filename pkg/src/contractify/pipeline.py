"""Run configuration and the end-to-end commands behind the CLI.

A run is described by one JSON file; relative paths inside it are resolved
against the file's directory.  Every command writes its outputs atomically
into ``output_dir`` and embeds the resolved configuration in them.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bnb import (
    FALSIFIED, UNKNOWN, VERIFIED, Budget, CertificateError, PgdConfig, contraction_certificate,
    contraction_template, invariance_certificate, invariance_template, max_levelset,
    verify_box_invariance, verify_contraction, verify_forward_invariance,
)
from .box import IntervalBox
from .certificates import (
    ContractionTask, LyapunovFn, MetricNet, constant_metric_from, load_json, save_json,
)
from .cegis import SynthesisError, TrainConfig, TrainingError, synth_quadratic_lyapunov, train_metric
from .io import atomic_write_bytes, atomic_write_text
from .nnet.graph import forward, vjp
from .nnet.mlp import WeightFileError, load_weights
from .systems import ClosedLoopSystem, make_system

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_UNKNOWN = 0, 1, 2, 3
STATUS_EXIT = {VERIFIED: EXIT_OK, FALSIFIED: EXIT_FAIL, UNKNOWN: EXIT_UNKNOWN}


class ConfigError(ValueError):
    """Unusable configuration (exit code 2)."""


class CommandFailed(RuntimeError):
    """A command ran but could not produce a certificate (exit code 1)."""


DEFAULTS = {
    "system": {"name": "vdp", "params": {}},
    "lyapunov": {"kappa_frac": 0.9, "tol": 1e-3},
    "metric": {"source": "trained"},
    "train": {},
    "budget": {},
    "roa": {"template": "contraction", "metric": "trained", "tol_frac": 0.01,
            "samples": 1_000_000},
    "grid": {"resolution": 64, "metric": "trained", "pgd_steps": 10},
    "report": {"runs": []},
    "seed": 0,
    "threads": 1,
    "output_dir": "out",
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict
    root: Path
    path: Path | None = None
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, **overrides) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw, path.parent, path, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, root=".", path=None, **overrides) -> RunConfig:
        cfg = _merge(DEFAULTS, raw)
        ov = {k: v for k, v in overrides.items() if v is not None}
        if "seed" in ov:
            cfg["seed"] = int(ov["seed"])
        if "threads" in ov:
            cfg["threads"] = int(ov["threads"])
        if "budget_boxes" in ov:
            cfg["budget"]["max_boxes"] = int(ov["budget_boxes"])
        if "time_limit" in ov:
            cfg["budget"]["time_limit"] = float(ov["time_limit"])
        return cls(cfg, Path(root), None if path is None else Path(path), ov)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def out(self) -> Path:
        d = self.resolve(self.raw["output_dir"])
        d.mkdir(parents=True, exist_ok=True)
        return d

    def section(self, name) -> dict:
        return self.raw[name]

    def budget(self) -> Budget:
        b = dict(self.raw["budget"])
        pgd = PgdConfig(**b.pop("pgd", {}))
        b.setdefault("threads", self.raw["threads"])
        b.setdefault("seed", self.raw["seed"])
        try:
            return Budget(pgd=pgd, **b)
        except TypeError as exc:
            raise ConfigError(f"budget: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t.setdefault("seed", self.raw["seed"])
        try:
            return TrainConfig.from_json(t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def embedded(self) -> dict:
        return {"run_config": self.raw, "config_path": None if self.path is None else str(self.path)}


# ---------------------------------------------------------------------------
# building blocks


def build_system(cfg: RunConfig) -> ClosedLoopSystem:
    s = dict(cfg.section("system"))
    name = s.get("name")
    params = dict(s.get("params", {}))
    box = IntervalBox.from_json(s["box"]) if "box" in s else None
    try:
        if name == "pendulum":
            ctrl = s.get("controller")
            if ctrl is None:
                from .reference import data_path

                ctrl = data_path("pendulum_controller.json")
            else:
                ctrl = cfg.resolve(ctrl)
                if not Path(ctrl).is_file():
                    raise ConfigError(f"controller file not found: {ctrl}")
            if box is None:
                from .reference import load_pendulum

                box = load_pendulum()[0].box
            return make_system("pendulum", params=params, policy=load_weights(ctrl), box=box)
        if box is not None:
            params["box"] = box
        return make_system(name, **params)
    except WeightFileError as exc:
        raise ConfigError(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"system: {exc}") from None


def _lyap_file(cfg: RunConfig) -> Path:
    return cfg.out / "lyapunov.json"


def load_invariance(cfg: RunConfig):
    """The stored invariance certificate and its Lyapunov function (or ``None``)."""
    path = _lyap_file(cfg)
    if not path.is_file():
        raise ConfigError(f"invariance certificate not found: {path} (run synth-lyap first)")
    cert = load_json(path)
    V = None if cert.get("lyapunov") is None else LyapunovFn.from_json(cert["lyapunov"])
    return cert, V


def build_metric(cfg: RunConfig, sys, V, source=None) -> MetricNet:
    m = cfg.section("metric")
    source = source or m.get("source", "trained")
    mu = m.get("mu")
    if source == "trained":
        path = cfg.resolve(m["path"]) if "path" in m else cfg.out / "metric.json"
        if not path.is_file():
            raise ConfigError(f"metric file not found: {path} (run train first)")
        try:
            return MetricNet.from_json(load_json(path))
        except WeightFileError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if source == "constant":
        if V is None or V.form != "quadratic":
            raise ConfigError("a constant metric needs a quadratic Lyapunov function")
        lam = float(np.linalg.eigvalsh(V.P).min())
        return constant_metric_from(V.P, min(0.1, 0.5 * lam) if mu is None else mu)
    if source == "identity":
        return constant_metric_from(np.eye(sys.n), 0.5 if mu is None else mu)
    raise ConfigError(f"unknown metric source {source!r}")


def build_task(cfg: RunConfig, sys, V, metric, rho_V=None) -> ContractionTask:
    t = cfg.section("train")
    tc = cfg.train_config()
    if V is not None and rho_V is not None:
        V = V.with_level(rho_V)
    return ContractionTask(sys, metric, V, rho_c=t.get("rho_c", tc.rho_c), eps=t.get("eps", tc.eps))


def _print(msg, quiet=False):
    if not quiet:
        print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_lyap(cfg: RunConfig, quiet=False) -> int:
    sys = build_system(cfg)
    lcfg = cfg.section("lyapunov")
    budget = cfg.budget()
    t0 = time.perf_counter()
    if lcfg.get("none"):
        # no Lyapunov function: certify the box itself
        res = verify_box_invariance(sys, sys.box, budget)
        cert = invariance_certificate(sys, None, res)
    elif "file" in lcfg:
        path = cfg.resolve(lcfg["file"])
        if not path.is_file():
            raise ConfigError(f"Lyapunov file not found: {path}")
        V = LyapunovFn.from_json(load_json(path))
        res = verify_forward_invariance(sys, V, sys.box, budget)
        cert = invariance_certificate(sys, V, res)
    else:
        try:
            V, cert = synth_quadratic_lyapunov(
                sys, sys.box, kappa=lcfg.get("kappa"), q_scale=lcfg.get("q_scale"),
                kappa_frac=lcfg.get("kappa_frac", 0.9), tol=lcfg.get("tol", 1e-3),
                rho_hi=lcfg.get("rho_hi"), budget=budget)
        except SynthesisError as exc:
            _print(f"synth-lyap failed: {exc}", quiet)
            return EXIT_FAIL
    cert["wall_time"] = time.perf_counter() - t0
    cert.update(cfg.embedded())
    save_json(_lyap_file(cfg), cert)
    level = cert["config"].get("rho_V")
    _print(f"invariance {cert['status']}: rho_V={level} ({_lyap_file(cfg)})", quiet)
    if cert["status"] == VERIFIED:
        return EXIT_OK if level is None or level > 0 else EXIT_FAIL
    return STATUS_EXIT[cert["status"]]


def cmd_train(cfg: RunConfig, quiet=False) -> int:
    sys = build_system(cfg)
    cert, V = load_invariance(cfg)
    if V is None:
        raise ConfigError("training needs a Lyapunov function")
    tc = cfg.train_config()
    out = cfg.out
    metric_path = out / "metric.json"
    header = {"rho_c": tc.rho_c, "epsilon": tc.eps, **V.header(), "train": tc.to_json()}

    def checkpoint(it, scale, worst, metric):
        save_json(metric_path, metric.to_json(header))

    try:
        metric, log = train_metric(sys, V, tc, callback=checkpoint)
    except TrainingError as exc:
        if exc.metric is not None:
            save_json(metric_path, exc.metric.to_json(header))
        _print(f"training failed: {exc}", quiet)
        return EXIT_FAIL
    save_json(metric_path, metric.to_json(header))
    log.save(out / "train_log.csv")
    worst = log.rows[-1]["max_violation"] if log.rows else float("nan")
    _print(f"trained {len(log.rows)} iterations; final max violation {worst:.6g} ({metric_path})",
           quiet)
    return EXIT_OK


def _verify_task(cfg, sys, V, cert, metric, rho_V=None):
    task = build_task(cfg, sys, V, metric, rho_V)
    return task, verify_contraction(task, cert, cfg.budget())


def cmd_verify(cfg: RunConfig, quiet=False) -> int:
    sys = build_system(cfg)
    cert, V = load_invariance(cfg)
    metric = build_metric(cfg, sys, V)
    rho_V = cfg.section("metric").get("rho_V")
    try:
        task, res = _verify_task(cfg, sys, V, cert, metric, rho_V)
    except CertificateError as exc:
        raise ConfigError(str(exc)) from None
    out = contraction_certificate(task, res)
    out.update(cfg.embedded())
    save_json(cfg.out / "contraction.json", out)
    st = res.stats
    _print(f"contraction {res.status}: boxes={st.get('boxes')} depth={st.get('max_depth')} "
           f"time={st.get('wall_time', 0.0):.2f}s", quiet)
    if res.witness is not None:
        _print(f"witness x={res.witness['x']} delta={res.witness['delta']} "
               f"G={res.witness.get('G')}", quiet)
    if res.status == UNKNOWN and len(res.undischarged_lo):
        _print(f"undischarged boxes: {len(res.undischarged_lo)}; smallest "
               f"{res.smallest_undischarged().to_json()}", quiet)
    return STATUS_EXIT[res.status]


def sublevel_area_ratio(V: LyapunovFn, box: IntervalBox, rho, rho_roa, samples=1_000_000,
                        seed=0) -> float | None:
    """Monte-Carlo ``area({V < rho} & B) / area({V < rho_roa} & B)``."""
    if rho_roa is None or rho_roa <= 0:
        return None
    rng = np.random.default_rng(seed)
    hit = hit_roa = 0
    left = samples
    while left:
        k = min(left, 200_000)
        v = V(box.sample(rng, k))
        hit += int(np.count_nonzero(v < rho))
        hit_roa += int(np.count_nonzero(v < rho_roa))
        left -= k
    return hit / hit_roa if hit_roa else None


def cmd_roa(cfg: RunConfig, quiet=False) -> int:
    sys = build_system(cfg)
    cert, V = load_invariance(cfg)
    if V is None:
        raise ConfigError("levelset search needs a Lyapunov function")
    r = cfg.section("roa")
    rho_roa = V.rho_V
    kind = r.get("metric", "trained")
    report = {"system": sys.name, "template": r["template"], "metric": kind, "rho_roa": rho_roa}
    if rho_roa <= 0:
        report.update(rho=None, ratio=None, note="empty region of attraction; ratio undefined")
        save_json(cfg.out / f"roa_{kind}.json", {**report, **cfg.embedded()})
        _print("rho_ROA = 0: ratio undefined", quiet)
        return EXIT_FAIL
    budget = cfg.budget()
    t0 = time.perf_counter()
    if r["template"] == "invariance":
        tmpl = invariance_template(sys, V, sys.box, budget)
    elif r["template"] == "contraction":
        metric = build_metric(cfg, sys, V, source=kind)
        task = build_task(cfg, sys, V, metric)
        try:
            verify_contraction(task.with_level(0.0), cert, budget)
        except CertificateError as exc:
            raise ConfigError(str(exc)) from None
        tmpl = contraction_template(task, budget)
        report.update(rho_c=task.rho_c, epsilon=task.eps, mu=metric.mu)
    else:
        raise ConfigError(f"unknown template {r['template']!r}")

    def probe(level):
        res = tmpl(level)
        _print(f"  rho={level:.6g}: {res.status} ({res.stats.get('boxes')} boxes)", quiet)
        return res

    rho, res, probes = max_levelset(probe, 0.0, rho_roa, r.get("tol_frac", 0.01) * rho_roa)
    ratio = sublevel_area_ratio(V, sys.box, rho, rho_roa, r.get("samples", 1_000_000),
                                cfg.raw["seed"])
    report.update(rho=rho, ratio=ratio, probes=[[p, s] for p, s in probes],
                  runtime=time.perf_counter() - t0,
                  stats=None if res is None else res.stats)
    save_json(cfg.out / f"roa_{kind}.json", {**report, **cfg.embedded()})
    _print(f"{sys.name} [{kind}] rho*={rho:.6g} of {rho_roa:.6g}, r={100 * ratio:.1f}%", quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid diagnostic


def stencil(eps: float) -> np.ndarray:
    """8 directions on the unit infinity sphere times 4 magnitudes up to ``eps``."""
    dirs = np.array([[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], float)
    mags = eps * np.array([0.25, 0.5, 0.75, 1.0])
    return (mags[:, None, None] * dirs[None]).reshape(-1, 2)


def grid_values(task: ContractionTask, resolution: int, pgd_steps: int = 10):
    """Cell centres of ``B`` and ``min over delta of -G(x, delta)`` per cell."""
    if task.n != 2:
        raise ConfigError("the grid diagnostic is two-dimensional")
    if resolution < 16:
        raise ConfigError("grid resolution must be at least 16")
    box = task.box
    edges = [np.linspace(box.lo[i], box.hi[i], resolution + 1) for i in range(2)]
    cen = [0.5 * (e[1:] + e[:-1]) for e in edges]
    g1, g2 = np.meshgrid(cen[0], cen[1], indexing="xy")
    xs = np.stack([g1.ravel(), g2.ravel()], axis=1)
    st = stencil(task.eps)
    graph = task.g_graph
    theta = task.metric.theta
    z = np.concatenate([np.repeat(xs, len(st), 0), np.tile(st, (len(xs), 1))], axis=1)
    g = forward(graph, z, theta)[graph.outputs[0]][:, 0].reshape(len(xs), len(st))
    worst = g.max(axis=1)
    d = st[g.argmax(axis=1)]
    step = task.eps / 8
    for _ in range(pgd_steps):
        zz = np.concatenate([xs, d], axis=1)
        vals = forward(graph, zz, theta)
        cot, _ = vjp(graph, vals, np.ones((len(xs), 1)))
        d = np.clip(d + step * np.sign(cot[:, 2:]), -task.eps, task.eps)
        zz = np.concatenate([xs, d], axis=1)
        worst = np.maximum(worst, forward(graph, zz, theta)[graph.outputs[0]][:, 0])
    return xs, -worst, (resolution, resolution)


def pgm_bytes(min_neg_g: np.ndarray, shape) -> bytes:
    """P5 raster: white where ``G <= 0`` for every sampled delta, grey elsewhere; top row is max x2."""
    h, w = shape
    img = np.where(min_neg_g.reshape(h, w) >= 0.0, 255, 128).astype(np.uint8)[::-1]
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def cmd_grid(cfg: RunConfig, quiet=False) -> int:
    sys = build_system(cfg)
    cert, V = load_invariance(cfg)
    gcfg = cfg.section("grid")
    metric = build_metric(cfg, sys, V, source=gcfg.get("metric", "trained"))
    task = build_task(cfg, sys, None, metric)
    xs, vals, shape = grid_values(task, int(gcfg.get("resolution", 64)), gcfg.get("pgd_steps", 10))
    lines = ["x1,x2,minG"] + [f"{a!r},{b!r},{v!r}" for (a, b), v in zip(xs.tolist(), vals.tolist())]
    out = cfg.out
    atomic_write_text(out / "grid.csv", "\n".join(lines) + "\n")
    atomic_write_bytes(out / "grid.pgm", pgm_bytes(vals, shape))
    level = gcfg.get("rho_V")
    if level is None:
        roa = out / f"roa_{gcfg.get('metric', 'trained')}.json"
        level = load_json(roa)["rho"] if roa.is_file() else None
    if V is not None and level:
        # boundary of the certified sublevel set, for overlaying on the raster
        ang = np.linspace(0, 2 * math.pi, 361)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        if V.form == "quadratic":
            r = np.sqrt(level / V(dirs))
            pts = dirs * r[:, None]
            text = "x1,x2\n" + "".join(f"{a!r},{b!r}\n" for a, b in pts.tolist())
            atomic_write_text(out / "grid_boundary.csv", text)
    white = float(np.mean(vals >= 0))
    _print(f"grid {shape[0]}x{shape[1]}: {100 * white:.1f}% white ({out / 'grid.pgm'})", quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _fmt(v, digits=4):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}g}"
    return str(v)


METRIC_LABELS = {"trained": "NN", "constant": "constant"}


def cmd_report(cfg: RunConfig, quiet=False) -> int:
    runs = cfg.section("report").get("runs") or []
    cfgs = [RunConfig.load(cfg.resolve(p)) for p in runs] if runs else [cfg]
    rows = ["| system | rho_ROA | metric | verified rho | r | runtime (s) |",
            "|---|---|---|---|---|---|"]
    for rc in cfgs:
        name = rc.section("system").get("name")
        found = {p.stem[4:] for p in rc.out.glob("roa_*.json")}
        for kind in ["trained", "constant"] + sorted(found - {"trained", "constant"}):
            path = rc.out / f"roa_{kind}.json"
            label = METRIC_LABELS.get(kind, kind)
            if not path.is_file():
                rows.append(f"| {name} | - | {label} | pending | pending | - |")
                continue
            rep = load_json(path)
            ratio = rep.get("ratio")
            r = "-" if ratio is None else f"{100 * ratio:.1f}%"
            rows.append(f"| {name} | {_fmt(rep.get('rho_roa'))} | {label} | {_fmt(rep.get('rho'))} "
                        f"| {r} | {_fmt(rep.get('runtime'), 3)} |")
    text = "\n".join(rows) + "\n"
    atomic_write_text(cfg.out / "report.md", text)
    _print(text.rstrip(), quiet)
    return EXIT_OK


COMMANDS = {
    "synth-lyap": cmd_synth_lyap,
    "train": cmd_train,
    "verify": cmd_verify,
    "roa": cmd_roa,
    "grid": cmd_grid,
    "report": cmd_report,
}


def run(command: str, cfg: RunConfig, quiet=False) -> int:
    try:
        return COMMANDS[command](cfg, quiet)
    except CommandFailed as exc:
        _print(f"error: {exc}", quiet)
        return EXIT_FAIL
