"""Scenario driver: runs the solution strategies and writes timing tables.

A scenario is a JSON object, for example::

    {
      "name": "fish_refine",
      "geometry": {"preset": "fish", "n_panels": 200},
      "action": {"type": "refine", "near": {"point": [1.35, 0.0], "radius": 0.2}, "m": 4},
      "strategy": "Direct-Local",
      "eps_compress": 1e-10,
      "eps_lowrank": 1e-10
    }

Boundary data always comes from point forces placed outside the fluid, so the
exact velocity is known and the error ``E`` is measured against it.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Point, box
from shapely.ops import unary_union

from .els import conditioning_report, els_build
from .geometry import (PRESETS, Component, GeometryError, ParametricCurve, PanelMesh, add_holes,
                       build_discretization, refine)
from .hbs import compress
from .krylov import GmresConfig, GmresNonConvergence, gmres
from .nystrom import StokesOperator, evaluate_solution, relative_error, stokeslet_data

log = logging.getLogger(__name__)

STRATEGIES = ("Direct-HBS", "GMRES-HBS", "Direct-Local", "GMRES-Local", "PGMRES-Local", "GMRES-indy",
              "Direct-indy")
LOCAL = ("Direct-Local", "GMRES-Local", "PGMRES-Local")
ACTIONS = ("none", "refine", "add_holes", "snapshots")
CSV_COLUMNS = ("scenario", "strategy", "N_k", "N_c", "N_p", "k", "T_comp", "T_inv", "T_Dsol", "T_Gsol",
               "T_PGsol", "n_iter", "E")
AGGREGATE_COLUMNS = ("scenario", "strategy", "T_static", "T_Osol", "T_Rsol", "n_refined", "n_unrefined",
                     "cache_hits", "E_max")

# lattice of obstacles used for the preconditioning and snapshot experiments
LATTICES = {
    "star_lattice": {"nx": 3, "ny": 3, "spacing": 1.0, "n_panels": 16,
                     "curve": {"kind": "star", "params": [5, 0.3], "scale": 0.36}},
}


class ScenarioError(RuntimeError):
    """A solver or geometry failure, tagged with the scenario that caused it."""

    def __init__(self, scenario, strategy, cause):
        super().__init__(f"scenario {scenario!r}, strategy {strategy!r}: {cause}")
        self.scenario = scenario
        self.strategy = strategy
        self.cause = cause


# ---------------------------------------------------------------------------
# scenario description


@dataclass
class Scenario:
    name: str
    geometry: dict
    strategy: object = "Direct-HBS"
    action: dict = field(default_factory=lambda: {"type": "none"})
    formulation: str | None = None
    rhs: dict = field(default_factory=dict)
    targets: object = None
    eps_compress: float = 1e-10
    eps_lowrank: float = 1e-10
    eps_forward: float = 1e-12
    gmres_tol: float = 1e-11
    gmres_maxiter: int = 600
    leaf_size: int = 64
    mu: float = 1.0
    seed: int = 0
    repeats: int = 3
    diagnostics: bool = False

    def __post_init__(self):
        self.action = dict(self.action or {"type": "none"})
        self.action.setdefault("type", "none")
        kind = self.action["type"]
        if kind not in ACTIONS:
            raise ValueError(f"unknown action {kind!r}")
        strategies = self.strategies
        for st in strategies:
            if st not in STRATEGIES:
                raise ValueError(f"unknown strategy {st!r}")
            if st in LOCAL and kind == "none":
                raise ValueError(f"strategy {st} needs a refine, add_holes or snapshots action")
            if kind == "snapshots" and st in ("Direct-HBS", "GMRES-HBS"):
                raise ValueError("snapshot batches use the -indy or -Local strategies")
        if len(strategies) > 1 and kind != "snapshots":
            raise ValueError("several strategies are only supported for snapshot batches")
        for name in ("eps_compress", "eps_lowrank", "eps_forward", "gmres_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def strategies(self):
        return [self.strategy] if isinstance(self.strategy, str) else list(self.strategy)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario fields {sorted(unknown)}")
        if "name" not in d or "geometry" not in d:
            raise ValueError("a scenario needs 'name' and 'geometry'")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def load_scenarios(path):
    """Read one scenario or a list of scenarios from a JSON file."""
    with open(path) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    return [Scenario.from_dict(d) for d in items]


# ---------------------------------------------------------------------------
# geometry and data


def _curve(spec):
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise GeometryError(f"unknown preset {spec!r}")
        return PRESETS[spec]
    return ParametricCurve.from_dict(spec)


def _place(curve, spec):
    """Apply optional ``center``/``scale`` overrides to a preset curve."""
    if "center" not in spec and "scale" not in spec:
        return curve
    return ParametricCurve(curve.kind, curve.params, tuple(spec.get("center", curve.center)),
                           float(spec.get("scale", curve.scale)), curve.orientation)


def _check_disjoint(components):
    polys = [c.curve.polygon() for c in components]
    for i, p in enumerate(polys):
        if not components[i].curve.is_simple():
            raise GeometryError(f"curve {i} is not simple")
        for j in range(i + 1, len(polys)):
            if components[i].role == "obstacle" and components[j].role == "obstacle" and p.intersects(polys[j]):
                raise GeometryError(f"obstacles {i} and {j} intersect")
    walls = [i for i, c in enumerate(components) if c.role == "wall"]
    for w in walls:
        for i, c in enumerate(components):
            if c.role == "obstacle" and not polys[w].contains(polys[i]):
                raise GeometryError(f"obstacle {i} is not inside the wall")


def lattice_components(spec):
    """Obstacles on an ``nx`` by ``ny`` grid, all copies of one curve."""
    if isinstance(spec, str):
        if spec not in LATTICES:
            raise GeometryError(f"unknown lattice {spec!r}")
        spec = LATTICES[spec]
    spec = {**LATTICES["star_lattice"], **spec}
    base = ParametricCurve.from_dict(spec["curve"])
    q = int(spec.get("q", 16))
    comps = []
    for i in range(int(spec["nx"])):
        for j in range(int(spec["ny"])):
            c = ParametricCurve(base.kind, base.params, (i * spec["spacing"], j * spec["spacing"]), base.scale)
            comps.append(Component(c, PanelMesh.uniform(int(spec["n_panels"]), q), "obstacle"))
    return comps


def build_geometry(spec):
    """Discretization from a geometry spec (preset, curve, lattice or component list)."""
    q = int(spec.get("q", 16))
    if "lattice" in spec:
        lat = spec["lattice"]
        lat = dict(LATTICES[lat]) if isinstance(lat, str) else dict(lat)
        if "n_panels" in spec:
            lat["n_panels"] = spec["n_panels"]
        comps = lattice_components(lat)
    elif "components" in spec:
        comps = []
        for c in spec["components"]:
            curve = _place(_curve(c.get("preset") or c["curve"]), c)
            comps.append(Component(curve, PanelMesh.uniform(int(c["n_panels"]), int(c.get("q", q))),
                                   c.get("role", "wall" if not comps else "obstacle")))
    elif "preset" in spec or "curve" in spec:
        curve = _place(_curve(spec.get("preset") or spec["curve"]), spec)
        comps = [Component(curve, PanelMesh.uniform(int(spec.get("n_panels", 64)), q),
                           spec.get("role", "wall"))]
    else:
        raise GeometryError("geometry needs 'preset', 'curve', 'lattice' or 'components'")
    if any(len(c.mesh) < 4 for c in comps):
        raise GeometryError("need at least 4 panels per curve")
    _check_disjoint(comps)
    return build_discretization(comps)


def infer_formulation(disc):
    roles = [c.role for c in disc.components]
    if roles == ["wall"]:
        return "interior_dl_plus_null"
    if all(r == "obstacle" for r in roles):
        return "exterior_combined"
    return "mixed"


def _polygons(disc):
    walls, obstacles = [], []
    for c in disc.components:
        (walls if c.role == "wall" else obstacles).append(c.curve.polygon(1024))
    return walls, obstacles


def fluid_region(disc, margin):
    """Shapely region at distance ``>= margin`` from every curve, inside the wall."""
    walls, obstacles = _polygons(disc)
    if walls:
        region = walls[0].buffer(-margin)
    else:
        x0, y0, x1, y1 = unary_union(obstacles).bounds
        pad = max(x1 - x0, y1 - y0)
        region = box(x0 - pad, y0 - pad, x1 + pad, y1 + pad)
    if obstacles:
        region = region.difference(unary_union([o.buffer(margin) for o in obstacles]))
    return region


def in_fluid(disc, pts):
    walls, obstacles = _polygons(disc)
    out = []
    for p in np.atleast_2d(pts):
        pt = Point(p)
        inside = all(w.contains(pt) for w in walls) and not any(o.contains(pt) for o in obstacles)
        out.append(inside)
    return np.array(out)


def default_targets(disc, n=20, seed=0, margin_panels=5.0):
    """Random points in the fluid, at least ``margin_panels`` panel lengths from the boundary.

    The margin is halved until the region is non-empty.
    """
    h = float(np.max(disc.panel_lengths()))
    rng = np.random.default_rng(seed)
    factor = margin_panels
    while factor > 0.5:
        region = fluid_region(disc, factor * h)
        if not region.is_empty and region.area > 0:
            break
        factor /= 2
    else:
        raise GeometryError("no room for target points in the fluid")
    x0, y0, x1, y1 = region.bounds
    pts = []
    while len(pts) < n:
        cand = rng.uniform((x0, y0), (x1, y1), size=(4 * n, 2))
        pts.extend(p for p in cand if region.contains(Point(p)))
    return np.array(pts[:n])


def default_sources(disc, n_outer=5):
    """Point forces outside the fluid: a ring outside the wall and one per obstacle center."""
    srcs = []
    walls = [c for c in disc.components if c.role == "wall"]
    if walls:
        nodes = disc.nodes[disc.component_of_node == disc.components.index(walls[0])]
        c = nodes.mean(axis=0)
        r = 1.5 * np.max(np.linalg.norm(nodes - c, axis=1))
        th = 2 * np.pi * np.arange(n_outer) / n_outer + 0.3
        srcs.extend(c + r * np.stack([np.cos(th), np.sin(th)], axis=-1))
    srcs.extend(np.array(c.curve.center) for c in disc.components if c.role == "obstacle")
    return np.array(srcs)


def boundary_data(disc, rhs, mu, extra_sources=None):
    rhs = rhs or {}
    sources = rhs.get("sources")
    sources = default_sources(disc, int(rhs.get("n_sources", 5))) if sources is None else np.asarray(sources,
                                                                                                    float)
    forces = rhs.get("forces")
    if extra_sources is not None and len(extra_sources):
        sources = np.vstack([sources, extra_sources])
        forces = None if forces is None else np.vstack([forces, np.tile([1.0, 0.0], (len(extra_sources), 1))])
    if np.any(in_fluid(disc, sources)):
        raise ValueError("point forces generating the boundary data must lie outside the fluid")
    return stokeslet_data(disc, sources, forces, mu)


def resolve_targets(s, disc):
    if s.targets is None or isinstance(s.targets, dict):
        n = 20 if s.targets is None else int(s.targets.get("n", 20))
        return default_targets(disc, n, s.seed)
    return np.atleast_2d(np.asarray(s.targets, dtype=float))


def _holes(spec):
    out = []
    for h in spec["holes"]:
        curve = _place(_curve(h.get("preset") or h["curve"]), h)
        out.append((curve, int(h.get("n_panels", 10)), int(h.get("q", 16))))
    return out


def apply_action(disc, action):
    """New discretization and plan for a refine or add_holes action."""
    kind = action["type"]
    if kind == "refine":
        if "panels" in action:
            panels = action["panels"]
        elif "near" in action:
            # panels within a radius of a point, or a fixed number of nearest panels
            near = action["near"]
            d = np.linalg.norm(disc.nodes - np.asarray(near["point"], float), axis=1)
            if "count" in near:
                dp = np.full(disc.n_panels, np.inf)
                np.minimum.at(dp, disc.panel_of_node, d)
                panels = sorted(np.argsort(dp)[:int(near["count"])].tolist())
            else:
                panels = sorted(set(disc.panel_of_node[d < near["radius"]].tolist()))
        else:
            raise ValueError("refine action needs 'panels' or 'near'")
        if not panels:
            raise GeometryError("refine action selects no panels")
        return refine(disc, panels, int(action.get("m", 4)), bool(action.get("graded", False)))
    if kind == "add_holes":
        return add_holes(disc, _holes(action))
    raise ValueError(f"action {kind!r} does not produce a single discretization")


def snapshot_panels(disc, body, factor=2.0):
    """Panels with a node closer to ``body`` than ``factor`` times the panel length."""
    d = np.linalg.norm(disc.nodes - np.asarray(body, float), axis=1)
    plen = disc.panel_lengths()[disc.panel_of_node]
    return sorted(set(disc.panel_of_node[d < factor * plen].tolist()))


# ---------------------------------------------------------------------------
# timing


def timed(fn, repeats=3, threshold=1.0):
    """Run ``fn``; phases under ``threshold`` seconds are repeated and the median is kept."""
    t0 = time.perf_counter()
    out = fn()
    times = [time.perf_counter() - t0]
    if times[0] < threshold:
        for _ in range(repeats - 1):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
    return out, float(np.median(times))


def min_solves(t_pre, t_sol_unprec, t_sol_prec):
    """Break-even number of solves ``ceil(T_pre / (T_unprec - T_prec))``.

    This depends on a simple cost model; ``inf`` when preconditioning does not
    save time per solve.
    """
    gain = t_sol_unprec - t_sol_prec
    if gain <= 0:
        return math.inf
    return int(math.ceil(t_pre / gain))


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    scenario: str
    strategy: str
    N_k: int = 0
    N_c: int = 0
    N_p: int = 0
    k: int = 0
    k_kc: int = 0
    k_kp: int = 0
    k_pk: int = 0
    T_comp: float | None = None
    T_inv: float | None = None
    T_Dsol: float | None = None
    T_Gsol: float | None = None
    T_PGsol: float | None = None
    T_static: float | None = None
    T_Osol: float | None = None
    T_Rsol: float | None = None
    n_iter: int = 0
    E: float = 0.0
    converged: bool = True
    cache_hit: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("T_comp", "T_inv", "T_Dsol", "T_Gsol", "T_PGsol", "T_static", "T_Osol", "T_Rsol"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} is negative")

    def row(self):
        d = asdict(self)
        return {c: ("" if d[c] is None else d[c]) for c in CSV_COLUMNS}

    def set_plan(self, plan, update=None):
        self.N_k, self.N_c, self.N_p = plan.N_k, plan.N_c, plan.N_p
        if update is not None:
            self.k, self.k_kc, self.k_kp, self.k_pk = update.k, update.k_kc, update.k_kp, update.k_pk


def write_csv(path, reports, columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in reports:
            w.writerow(r.row() if isinstance(r, RunReport) else {c: r.get(c, "") for c in columns})


# ---------------------------------------------------------------------------
# strategies


class _Problem:
    """Everything a strategy needs: both discretizations, operators and data."""

    def __init__(self, s, disc_old, disc_new=None, plan=None, extra_sources=None, op_old=None):
        self.s = s
        self.disc_old = disc_old
        self.disc_new = disc_new if disc_new is not None else disc_old
        self.plan = plan
        self.form_old = infer_formulation(disc_old)
        self.form_new = s.formulation or infer_formulation(self.disc_new)
        self.op_old = op_old or StokesOperator(disc_old, self.form_old, s.mu)
        self.op_new = self.op_old if disc_new is None else StokesOperator(self.disc_new, self.form_new, s.mu)
        self.data = boundary_data(self.disc_new, s.rhs, s.mu, extra_sources)
        self.targets = resolve_targets(s, self.disc_new)

    def error(self, tau):
        ev = evaluate_solution(self.disc_new, tau, self.targets, self.form_new, self.s.mu)
        return relative_error(ev.velocity, self.data.velocity(self.targets))


def _gmres(s, apply, b, precond=None):
    return gmres(apply, b, GmresConfig(s.gmres_tol, s.gmres_maxiter), precond=precond)


def _hbs(op, tol, s, invert):
    h, t_comp = timed(lambda: compress(op, tol, s.leaf_size), s.repeats)
    t_inv = None
    if invert:
        h, t_inv = timed(lambda: h.invert(), s.repeats)
    return h, t_comp, t_inv


def _run_hbs(pb, rep, direct):
    s = pb.s
    h, rep.T_comp, rep.T_inv = _hbs(pb.op_new, s.eps_compress, s, direct)
    if direct:
        tau, rep.T_Dsol = timed(lambda: h.solve(pb.data.g), s.repeats)
    else:
        res, rep.T_Gsol = timed(lambda: _gmres(s, h.matvec, pb.data.g), s.repeats)
        tau, rep.n_iter = res.x, res.n_iter
    rep.diagnostics["hbs_skeleton"] = h.total_skeleton
    return tau


def _els(pb, A_oo, eps, factor):
    s = pb.s
    return els_build(A_oo, pb.op_old, pb.op_new, pb.plan, eps=eps, factor=factor, seed=s.seed)


def _els_times(els):
    t = els.timings
    return t["t_lowrank"], t["t_pp"] + t["t_woodbury"]


def _run_local(pb, rep, strategy):
    s = pb.s
    if strategy == "Direct-Local":
        h, tc, ti = _hbs(pb.op_old, s.eps_compress, s, True)
        rep.T_static = tc + ti
        els = _els(pb, h, s.eps_lowrank, True)
        rep.T_comp, rep.T_inv = _els_times(els)
        tau, rep.T_Dsol = timed(lambda: els.solve(pb.data.g), s.repeats)
        pre = els
    elif strategy == "GMRES-Local":
        h, rep.T_static, _ = _hbs(pb.op_old, s.eps_compress, s, False)
        els = _els(pb, h, s.eps_lowrank, False)
        rep.T_comp, rep.T_inv = els.timings["t_lowrank"] + els.timings["t_pp"], None
        b = els.extend(pb.data.g)
        res, rep.T_Gsol = timed(lambda: _gmres(s, els.apply_ext, b), s.repeats)
        tau, rep.n_iter = els.restrict(res.x), res.n_iter
        pre = None
    else:
        h_fwd, tf, _ = _hbs(pb.op_old, s.eps_forward, s, False)
        h, tc, ti = _hbs(pb.op_old, s.eps_compress, s, True)
        rep.T_static = tf + tc + ti
        fwd = _els(pb, h_fwd, s.eps_forward, False)
        pre = _els(pb, h, s.eps_lowrank, True)
        rep.T_comp = fwd.timings["t_lowrank"] + fwd.timings["t_pp"] + pre.timings["t_lowrank"]
        rep.T_inv = pre.timings["t_pp"] + pre.timings["t_woodbury"]
        b = fwd.extend(pb.data.g)
        res, rep.T_PGsol = timed(lambda: _gmres(s, fwd.apply_ext, b, precond=pre.solve_ext), s.repeats)
        tau, rep.n_iter = fwd.restrict(res.x), res.n_iter
        els = pre
    rep.set_plan(pb.plan, els.update)
    rep.diagnostics["hbs_skeleton"] = h.total_skeleton
    rep.diagnostics["k1"] = els.update.k1
    if s.diagnostics and pre is not None:
        rep.diagnostics["conditioning"] = conditioning_report(pre).as_dict()
    return tau


def run_scenario(s):
    """Execute one scenario end to end and return its ``RunReport``."""
    if isinstance(s, dict):
        s = Scenario.from_dict(s)
    if s.action["type"] == "snapshots":
        raise ValueError("use run_snapshot_batch for snapshot scenarios")
    strategy = s.strategies[0]
    try:
        disc0 = build_geometry(s.geometry)
        if s.action["type"] == "none":
            pb = _Problem(s, disc0)
        else:
            disc1, plan = apply_action(disc0, s.action)
            pb = _Problem(s, disc0, disc1, plan)
        rep = RunReport(s.name, strategy, N_k=pb.disc_new.N)
        if pb.plan is not None and strategy not in LOCAL:
            rep.set_plan(pb.plan)
        if strategy in ("Direct-HBS", "Direct-indy"):
            tau = _run_hbs(pb, rep, True)
        elif strategy in ("GMRES-HBS", "GMRES-indy"):
            tau = _run_hbs(pb, rep, False)
        else:
            tau = _run_local(pb, rep, strategy)
        rep.E = pb.error(tau)
    except (GeometryError, GmresNonConvergence, np.linalg.LinAlgError) as e:
        raise ScenarioError(s.name, strategy, e) from e
    log.info("%s/%s: E=%.3e n_iter=%d", s.name, strategy, rep.E, rep.n_iter)
    return rep


# ---------------------------------------------------------------------------
# snapshot batches


class _StaticSolver:
    """Precomputed operators on the original discretization for one strategy."""

    def __init__(self, s, strategy, op):
        self.strategy = strategy
        self.fwd = self.inv = None
        t = 0.0
        if strategy in ("GMRES-indy", "GMRES-Local"):
            self.fwd, t, _ = _hbs(op, s.eps_compress, s, False)
        elif strategy in ("Direct-indy", "Direct-Local"):
            self.inv, tc, ti = _hbs(op, s.eps_compress, s, True)
            t = tc + ti
        else:
            self.fwd, tf, _ = _hbs(op, s.eps_forward, s, False)
            self.inv, tc, ti = _hbs(op, s.eps_compress, s, True)
            t = tf + tc + ti
        self.T_static = t

    def solve_original(self, s, g):
        """Density and iteration count on the unrefined discretization."""
        if self.strategy in ("Direct-indy", "Direct-Local"):
            return self.inv.solve(g), 0
        precond = self.inv.solve if self.inv is not None else None
        res = _gmres(s, self.fwd.matvec, g, precond)
        return res.x, res.n_iter


def _solve_refined(s, strategy, static, pb, cache):
    """Density and iteration count on a refined discretization; uses ``cache`` for ELS objects."""
    if strategy in ("Direct-indy", "GMRES-indy"):
        h = compress(pb.op_new, s.eps_compress, s.leaf_size)
        if strategy == "Direct-indy":
            return h.invert().solve(pb.data.g), 0, False
        res = _gmres(s, h.matvec, pb.data.g)
        return res.x, res.n_iter, False
    key = (tuple(pb.plan.refined_panels), pb.plan.m)
    hit = key in cache
    if not hit:
        if strategy == "Direct-Local":
            cache[key] = (_els(pb, static.inv, s.eps_lowrank, True), None)
        elif strategy == "GMRES-Local":
            cache[key] = (_els(pb, static.fwd, s.eps_lowrank, False), None)
        else:
            cache[key] = (_els(pb, static.fwd, s.eps_forward, False), _els(pb, static.inv, s.eps_lowrank, True))
    a, b = cache[key]
    if strategy == "Direct-Local":
        return a.solve(pb.data.g), 0, hit
    precond = b.solve_ext if b is not None else None
    res = _gmres(s, a.apply_ext, a.extend(pb.data.g), precond)
    return a.restrict(res.x), res.n_iter, hit


def run_snapshot_batch(s):
    """Solve one problem per body position, reusing the static precomputation.

    Each body is a point force just across the boundary from the fluid; the
    panels nearer to it than ``factor`` times their own length are refined.
    Returns ``(reports, aggregate)`` where ``aggregate`` has one row per
    strategy with ``T_static`` and the mean ``T_Osol`` and ``T_Rsol``.
    """
    if isinstance(s, dict):
        s = Scenario.from_dict(s)
    act = s.action
    if act["type"] != "snapshots":
        raise ValueError("scenario has no snapshots action")
    m = int(act.get("m", 4))
    factor = float(act.get("factor", 2.0))
    reports, aggregate = [], []
    disc0 = build_geometry(s.geometry)
    bodies = np.atleast_2d(np.asarray(act.get("bodies", []), float))
    if len(bodies) and np.any(in_fluid(disc0, bodies)):
        raise ScenarioError(s.name, s.strategies[0],
                            GeometryError("snapshot bodies must lie just outside the fluid"))
    op0 = StokesOperator(disc0, infer_formulation(disc0), s.mu)
    for strategy in s.strategies:
        try:
            static = _StaticSolver(s, strategy, op0)
            cache = {}
            rows = []
            for i, body in enumerate(bodies):
                panels = snapshot_panels(disc0, body, factor)
                rep = RunReport(f"{s.name}#{i}", strategy, N_k=disc0.N, T_static=static.T_static)
                if panels:
                    disc1, plan = refine(disc0, panels, m)
                    pb = _Problem(s, disc0, disc1, plan, extra_sources=[body], op_old=op0)
                    t0 = time.perf_counter()
                    tau, rep.n_iter, rep.cache_hit = _solve_refined(s, strategy, static, pb, cache)
                    rep.T_Rsol = time.perf_counter() - t0
                    upd = cache[(tuple(plan.refined_panels), m)][0].update if strategy in LOCAL else None
                    rep.set_plan(plan, upd)
                else:
                    pb = _Problem(s, disc0, extra_sources=[body], op_old=op0)
                    (tau, rep.n_iter), rep.T_Osol = timed(lambda: static.solve_original(s, pb.data.g), s.repeats)
                rep.E = pb.error(tau)
                rows.append(rep)
        except (GeometryError, GmresNonConvergence, np.linalg.LinAlgError) as e:
            raise ScenarioError(s.name, strategy, e) from e
        reports.extend(rows)
        osol = [r.T_Osol for r in rows if r.T_Osol is not None]
        rsol = [r.T_Rsol for r in rows if r.T_Rsol is not None]
        aggregate.append({
            "scenario": s.name, "strategy": strategy, "T_static": static.T_static,
            "T_Osol": float(np.mean(osol)) if osol else None, "T_Rsol": float(np.mean(rsol)) if rsol else None,
            "n_refined": len(rsol), "n_unrefined": len(osol), "cache_hits": sum(r.cache_hit for r in rows),
            "E_max": max((r.E for r in rows), default=0.0),
        })
    return reports, aggregate


# ---------------------------------------------------------------------------
# command line


def _set_path(d, path, value):
    keys = path.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


PARAM_ALIASES = {"N": "geometry.n_panels"}


def sweep(s, param, values):
    """Run ``s`` once per value of the dotted parameter path ``param``."""
    base = s.to_dict()
    path = PARAM_ALIASES.get(param, param)
    reports = []
    for v in values:
        d = copy.deepcopy(base)
        _set_path(d, path, v)
        d["name"] = f"{s.name}[{param}={v}]"
        reports.append(run_scenario(Scenario.from_dict(d)))
    return reports


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _threads(n):
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_outputs(args, reports, aggregate):
    write_csv(args.out, reports)
    out = Path(args.out)
    if aggregate:
        write_csv(out.with_name(out.stem + "_aggregate.csv"), aggregate, AGGREGATE_COLUMNS)
    if args.diagnostics:
        side = {"reports": [asdict(r) for r in reports], "aggregate": aggregate}
        by = {a["strategy"]: a for a in aggregate}
        if "GMRES-Local" in by and "PGMRES-Local" in by and by["GMRES-Local"]["T_Rsol"] is not None:
            side["MinSol"] = {"value": min_solves(by["PGMRES-Local"]["T_static"], by["GMRES-Local"]["T_Rsol"],
                                                  by["PGMRES-Local"]["T_Rsol"]),
                              "note": "model-dependent break-even estimate"}
        with open(out.with_name(out.stem + "_diagnostics.json"), "w") as fh:
            json.dump(side, fh, indent=2, default=float)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="bench", description="Stokes ELS benchmark driver")
    sub = parser.add_subparsers(dest="cmd", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario JSON file (object or list)")
    common.add_argument("--out", default="report.csv")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--diagnostics", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("run", parents=[common], help="run every scenario in the file")
    sw = sub.add_parser("sweep", parents=[common], help="vary one parameter of a scenario")
    sw.add_argument("--param", required=True, help="dotted path, or N for geometry.n_panels")
    sw.add_argument("--values", nargs="+", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    limiter = _threads(args.threads)
    try:
        scenarios = load_scenarios(args.scenario)
        for sc in scenarios:
            if args.seed is not None:
                sc.seed = args.seed
            sc.diagnostics = sc.diagnostics or args.diagnostics
        reports, aggregate = [], []
        if args.cmd == "run":
            for sc in scenarios:
                if sc.action["type"] == "snapshots":
                    r, a = run_snapshot_batch(sc)
                    reports += r
                    aggregate += a
                else:
                    reports.append(run_scenario(sc))
        else:
            values = [_parse_value(v) for v in args.values]
            for sc in scenarios:
                reports += sweep(sc, args.param, values)
        _write_outputs(args, reports, aggregate)
    except ScenarioError as e:
        print(f"bench: {e}", file=sys.stderr)
        if isinstance(e.cause, GmresNonConvergence):
            return 2
        if isinstance(e.cause, GeometryError):
            return 3
        return 1
    except GeometryError as e:
        print(f"bench: geometry error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


if __name__ == "__main__":
    sys.exit(main())
