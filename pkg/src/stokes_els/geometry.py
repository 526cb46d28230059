"""Parametric closed curves, Gauss panel meshes and refinement bookkeeping.

Every curve is parametrized on [0, 2*pi) counterclockwise, so the normal
``(y', -x') / |gamma'|`` points out of the region enclosed by the curve.
Unknowns on a discretization are interleaved per node: ``(u1, u2)`` of node
``i`` live at ``2*i`` and ``2*i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from shapely.geometry import LineString, Point, Polygon

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    """Raised for invalid curves, meshes or refinement directives."""


@lru_cache(maxsize=None)
def gauss_legendre(q):
    x, w = np.polynomial.legendre.leggauss(q)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@dataclass(frozen=True)
class ParametricCurve:
    """A smooth closed curve ``gamma(t)``, ``t`` in [0, 2*pi).

    kind is one of ``circle``, ``ellipse``, ``star``, ``fourier``:

    * ellipse: ``params = (a, b)`` semi-axes (before ``scale``).
    * star: ``params = (n_prongs, amplitude)``, radius ``1 + amp*cos(n t)``.
    * fourier: ``params`` is a tuple of ``(k, re, im)`` triples and
      ``gamma(t) = center + scale * sum_k c_k exp(i k t)``.
    """

    kind: str = "circle"
    params: tuple = ()
    center: tuple = (0.0, 0.0)
    scale: float = 1.0
    orientation: int = 1

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse", "star", "fourier"):
            raise GeometryError(f"unknown curve kind {self.kind!r}")
        if not self.scale > 0:
            raise GeometryError("scale must be positive")
        if self.orientation not in (1, -1):
            raise GeometryError("orientation must be +1 or -1")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        params = self.params
        if self.kind == "fourier":
            params = tuple((int(k), float(a), float(b)) for k, a, b in params)
        else:
            params = tuple(params)
        object.__setattr__(self, "params", params)

    @classmethod
    def from_dict(cls, d):
        params = d.get("params", ())
        if isinstance(params, dict):
            if d["kind"] == "star":
                params = (params["n_prongs"], params["amplitude"])
            elif d["kind"] == "ellipse":
                params = (params["a"], params["b"])
            elif d["kind"] == "fourier":
                params = params["coefficients"]
            else:
                params = ()
        return cls(kind=d["kind"], params=tuple(map(tuple, params)) if d["kind"] == "fourier" else tuple(params),
                   center=tuple(d.get("center", (0.0, 0.0))), scale=float(d.get("scale", 1.0)),
                   orientation=int(d.get("orientation", 1)))

    def to_dict(self):
        return {"kind": self.kind, "params": [list(p) for p in self.params] if self.kind == "fourier" else list(self.params),
                "center": list(self.center), "scale": self.scale, "orientation": self.orientation}

    def derivatives(self, t):
        """Return ``gamma, gamma', gamma''`` at parameters ``t``, each ``(n, 2)``."""
        t = np.asarray(t, dtype=float)
        s = self.orientation
        ts = s * t
        if self.kind == "fourier":
            z = np.zeros(ts.shape, dtype=complex)
            dz = np.zeros_like(z)
            ddz = np.zeros_like(z)
            for k, a, b in self.params:
                e = (a + 1j * b) * np.exp(1j * k * ts)
                z += e
                dz += 1j * k * e
                ddz -= k * k * e
            g = np.stack([z.real, z.imag], axis=-1)
            g1 = s * np.stack([dz.real, dz.imag], axis=-1)
            g2 = np.stack([ddz.real, ddz.imag], axis=-1)
        elif self.kind == "ellipse":
            a, b = self.params
            c, sn = np.cos(ts), np.sin(ts)
            g = np.stack([a * c, b * sn], axis=-1)
            g1 = s * np.stack([-a * sn, b * c], axis=-1)
            g2 = -g
        else:
            if self.kind == "circle":
                rho, drho, ddrho = np.ones_like(ts), np.zeros_like(ts), np.zeros_like(ts)
            else:
                n, amp = self.params
                rho = 1.0 + amp * np.cos(n * ts)
                drho = -amp * n * np.sin(n * ts)
                ddrho = -amp * n * n * np.cos(n * ts)
            e = np.stack([np.cos(ts), np.sin(ts)], axis=-1)
            ep = np.stack([-np.sin(ts), np.cos(ts)], axis=-1)
            g = rho[..., None] * e
            g1 = s * (drho[..., None] * e + rho[..., None] * ep)
            g2 = ddrho[..., None] * e + 2 * drho[..., None] * ep - rho[..., None] * e
        c = np.asarray(self.center)
        return c + self.scale * g, self.scale * g1, self.scale * g2

    def __call__(self, t):
        return self.derivatives(t)[0]

    def sample(self, n=2048):
        return self(np.linspace(0.0, TWO_PI, n, endpoint=False))

    def polygon(self, n=2048):
        return Polygon(self.sample(n))

    def is_simple(self, n=2048):
        pts = self.sample(n)
        return LineString(np.vstack([pts, pts[:1]])).is_simple

    def perimeter(self, n=2 ** 16):
        t = np.linspace(0.0, TWO_PI, n, endpoint=False)
        return TWO_PI / n * np.linalg.norm(self.derivatives(t)[1], axis=1).sum()


# Substitute geometries for the data-driven shapes of the experiments.
PRESETS = {
    "circle": ParametricCurve("circle"),
    "fish": ParametricCurve("star", (3, 0.35)),
    "channel": ParametricCurve("fourier", ((1, 2.0, 0.0), (-1, 0.6, 0.0), (3, 0.12, 0.0), (-5, 0.05, 0.0))),
    "fallopian": ParametricCurve("fourier", ((1, 1.0, 0.0), (9, 0.225, 0.0), (-7, 0.225, 0.0), (-2, 0.08, 0.0))),
}


@dataclass(frozen=True)
class Panel:
    a: float
    b: float
    level: int = 0

    @property
    def length(self):
        return self.b - self.a


@dataclass(frozen=True)
class PanelMesh:
    """Ordered panels partitioning [0, 2*pi) for one curve, ``q`` nodes each."""

    panels: tuple
    q: int = 16

    @classmethod
    def uniform(cls, n_panels, q=16):
        edges = np.linspace(0.0, TWO_PI, n_panels + 1)
        edges[-1] = TWO_PI
        return cls(tuple(Panel(float(edges[i]), float(edges[i + 1])) for i in range(n_panels)), q)

    def __len__(self):
        return len(self.panels)

    def check(self):
        a = np.array([p.a for p in self.panels])
        b = np.array([p.b for p in self.panels])
        if a[0] != 0.0 or b[-1] != TWO_PI or np.any(a[1:] != b[:-1]) or np.any(b <= a):
            raise GeometryError("panels do not partition [0, 2pi)")

    def max_neighbor_ratio(self):
        h = np.array([p.length for p in self.panels])
        r = h / np.roll(h, 1)
        return float(np.max(np.maximum(r, 1 / r)))


@dataclass(frozen=True)
class Component:
    """A curve together with its panel mesh and its role in the BIE.

    ``role`` is ``"wall"`` (fluid inside the curve) or ``"obstacle"`` (fluid
    outside the curve).
    """

    curve: ParametricCurve
    mesh: PanelMesh
    role: str = "wall"


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Discretization:
    components: tuple
    nodes: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    t: np.ndarray
    panel_of_node: np.ndarray
    component_of_node: np.ndarray
    panel_bounds: np.ndarray  # (n_panels, 2) parameter interval per global panel
    panel_component: np.ndarray
    panel_start: np.ndarray  # first node of each global panel
    panel_size: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.nodes.shape[0]

    @property
    def n_panels(self):
        return self.panel_bounds.shape[0]

    @property
    def roles(self):
        return np.array([self.components[c].role for c in self.component_of_node])

    def panel_nodes(self, p):
        s = self.panel_start[p]
        return np.arange(s, s + self.panel_size[p])

    def panel_neighbors(self, p):
        """Global ids of the previous and next panel on the same curve."""
        c = self.panel_component[p]
        ids = np.flatnonzero(self.panel_component == c)
        k = p - ids[0]
        n = len(ids)
        return ids[(k - 1) % n], ids[(k + 1) % n]

    def panel_lengths(self):
        """Approximate arc length of every panel."""
        return np.bincount(self.panel_of_node, weights=self.weights, minlength=self.n_panels)

    def perimeter(self, component=None):
        if component is None:
            return float(self.weights.sum())
        return float(self.weights[self.component_of_node == component].sum())


def build_discretization(components):
    """Place ``q`` Gauss-Legendre nodes on every panel of every component."""
    comps = tuple(components)
    blocks = []
    pb, pc, pstart, psize = [], [], [], []
    start = 0
    for ci, comp in enumerate(comps):
        comp.mesh.check()
        q = comp.mesh.q
        x, w = gauss_legendre(q)
        a = np.array([p.a for p in comp.mesh.panels])
        b = np.array([p.b for p in comp.mesh.panels])
        h = 0.5 * (b - a)
        c = 0.5 * (a + b)
        t = (c[:, None] + h[:, None] * x[None, :]).ravel()
        g, g1, g2 = comp.curve.derivatives(t)
        speed = np.hypot(g1[:, 0], g1[:, 1])
        if np.any(speed <= 0):
            raise GeometryError("curve has a stationary point")
        tan = g1 / speed[:, None]
        nrm = np.stack([tan[:, 1], -tan[:, 0]], axis=-1)
        kappa = (g1[:, 0] * g2[:, 1] - g1[:, 1] * g2[:, 0]) / speed ** 3
        wts = (h[:, None] * w[None, :]).ravel() * speed
        npan = len(comp.mesh)
        blocks.append((g, wts, nrm, tan, kappa, speed, t,
                       np.repeat(np.arange(npan) + len(pb), q), np.full(npan * q, ci)))
        pb.extend(zip(a, b))
        pc.extend([ci] * npan)
        pstart.extend(start + q * np.arange(npan))
        psize.extend([q] * npan)
        start += npan * q
    cat = [np.concatenate([blk[i] for blk in blocks]) for i in range(9)]
    arrays = cat + [np.array(pb, dtype=float).reshape(-1, 2), np.array(pc, dtype=int),
                    np.array(pstart, dtype=int), np.array(psize, dtype=int)]
    _freeze(*arrays)
    return Discretization(comps, *arrays)


def panelize(curve, n_panels, q=16, role="wall", check_simple=True):
    """Discretize one closed curve with ``n_panels`` equal-parameter panels."""
    if n_panels < 4 or q < 4:
        raise GeometryError("need at least 4 panels and 4 nodes per panel")
    if check_simple and not curve.is_simple():
        raise GeometryError("curve is not simple at sampling resolution")
    return build_discretization([Component(curve, PanelMesh.uniform(n_panels, q), role)])


@dataclass(frozen=True, eq=False)
class RefinementPlan:
    """Index bookkeeping between an original and a modified discretization.

    ``idx_k_old``/``idx_k_new`` list the kept nodes in old/new numbering (same
    order, so ``old.nodes[idx_k_old] == new.nodes[idx_k_new]``). ``idx_c_old``
    are removed nodes, ``idx_p_new`` added nodes. ``clusters`` groups the
    changed nodes into spatially separate pieces, each a pair
    ``(c_nodes_old, p_nodes_new)``; every cluster gets its own proxy circles.
    """

    idx_k_old: np.ndarray
    idx_c_old: np.ndarray
    idx_k_new: np.ndarray
    idx_p_new: np.ndarray
    m: int
    refined_panels: tuple
    clusters: tuple
    old_components: tuple
    new_components: tuple
    kind: str = "refine"

    @property
    def N_k(self):
        return len(self.idx_k_old)

    @property
    def N_c(self):
        return len(self.idx_c_old)

    @property
    def N_p(self):
        return len(self.idx_p_new)

    @property
    def N_ext(self):
        return self.N_k + self.N_c + self.N_p

    @property
    def is_identity(self):
        return self.N_c == 0 and self.N_p == 0

    @property
    def segments(self):
        """Parameter intervals of the refined panels (Gamma_r)."""
        out = []
        for p in self.refined_panels:
            ci, j = p
            pan = self.old_components[ci].mesh.panels[j]
            out.append((ci, pan.a, pan.b))
        return out

    def inverse(self):
        return RefinementPlan(self.idx_k_new, self.idx_p_new, self.idx_k_old, self.idx_c_old, self.m,
                              self.refined_panels, tuple((p, c) for c, p in self.clusters),
                              self.new_components, self.old_components,
                              "coarsen" if self.kind == "refine" else self.kind)


def _global_panel_ids(disc):
    out = []
    for ci, comp in enumerate(disc.components):
        out.extend((ci, j) for j in range(len(comp.mesh)))
    return out


def _split_components(components, selected, m):
    new = []
    for ci, comp in enumerate(components):
        panels = []
        for j, p in enumerate(comp.mesh.panels):
            if (ci, j) in selected:
                e = np.linspace(p.a, p.b, m + 1)
                e[0], e[-1] = p.a, p.b
                panels.extend(Panel(float(e[i]), float(e[i + 1]), p.level + 1) for i in range(m))
            else:
                panels.append(p)
        new.append(Component(comp.curve, PanelMesh(tuple(panels), comp.mesh.q), comp.role))
    return tuple(new)


def _grade(disc, selected, m, max_ratio=2.0):
    """Grow ``selected`` until refined neighbors differ in length by <= max_ratio."""
    selected = set(selected)
    while True:
        comps = _split_components(disc.components, selected, m)
        added = set()
        for ci, comp in enumerate(comps):
            panels = comp.mesh.panels
            n = len(panels)
            for j, p in enumerate(panels):
                for nb in (panels[(j - 1) % n], panels[(j + 1) % n]):
                    if nb.length > max_ratio * p.length * (1 + 1e-12):
                        # locate the original panel owning nb
                        for jj, op in enumerate(disc.components[ci].mesh.panels):
                            if op.a <= nb.a and nb.b <= op.b and (ci, jj) not in selected:
                                added.add((ci, jj))
        if not added:
            return selected
        selected |= added


def _clusters_from_panels(disc, selected_global, node_map_new):
    """Group selected panels into runs of adjacent panels on the same curve."""
    sel = sorted(selected_global)
    if not sel:
        return ()
    runs = []
    for g in sel:
        ci = disc.panel_component[g]
        if runs and disc.panel_component[runs[-1][-1]] == ci and (g - runs[-1][-1]) == 1:
            runs[-1].append(g)
        else:
            runs.append([g])
    # merge first and last run when they wrap around on the same curve
    if len(runs) > 1:
        first, last = runs[0], runs[-1]
        ci = disc.panel_component[first[0]]
        ids = np.flatnonzero(disc.panel_component == ci)
        if disc.panel_component[last[-1]] == ci and first[0] == ids[0] and last[-1] == ids[-1]:
            runs[0] = last + first
            runs.pop()
    out = []
    for run in runs:
        c_nodes = np.concatenate([disc.panel_nodes(g) for g in run])
        p_nodes = np.concatenate([node_map_new[g] for g in run])
        out.append((c_nodes, p_nodes))
    return tuple(out)


def refine(disc, panel_ids, m=4, graded=False):
    """Split each selected panel into ``m`` equal parameter sub-panels.

    ``panel_ids`` are global panel indices of ``disc``. With ``graded=True``
    additional panels are split until neighboring panels differ in length by
    at most a factor 2. Returns ``(new_disc, plan)``.
    """
    panel_ids = [int(p) for p in panel_ids]
    if any(p < 0 or p >= disc.n_panels for p in panel_ids):
        raise GeometryError("panel id out of range")
    if m < 2 and panel_ids:
        raise GeometryError("split factor must be >= 2")
    gids = _global_panel_ids(disc)
    selected = {gids[p] for p in panel_ids}
    if graded and selected:
        selected = _grade(disc, selected, m)
    new_components = _split_components(disc.components, selected, m)
    new = build_discretization(new_components)

    # old global panel -> new node indices it maps onto
    k_old, k_new, c_old, p_new = [], [], [], []
    node_map_new = {}
    g_new = 0
    for g, key in enumerate(gids):
        old_nodes = disc.panel_nodes(g)
        if key in selected:
            nn = np.concatenate([new.panel_nodes(g_new + i) for i in range(m)])
            g_new += m
            c_old.append(old_nodes)
            p_new.append(nn)
            node_map_new[g] = nn
        else:
            nn = new.panel_nodes(g_new)
            g_new += 1
            k_old.append(old_nodes)
            k_new.append(nn)
    cat = lambda L: np.concatenate(L) if L else np.zeros(0, dtype=int)
    sel_global = [g for g, key in enumerate(gids) if key in selected]
    plan = RefinementPlan(cat(k_old), cat(c_old), cat(k_new), cat(p_new), m,
                          tuple(sorted(selected)), _clusters_from_panels(disc, sel_global, node_map_new),
                          disc.components, new_components)
    return new, plan


def coarsen(disc_new, plan):
    """Undo ``refine``: rebuild the original discretization and inverse plan."""
    if len(disc_new.components) != len(plan.new_components):
        raise GeometryError("plan does not match discretization")
    old = build_discretization(plan.old_components)
    return old, plan.inverse()


def panels_near(disc, point, radius):
    """Global ids of panels having a node within ``radius`` of ``point``."""
    d = np.linalg.norm(disc.nodes - np.asarray(point, dtype=float), axis=1)
    return sorted(set(disc.panel_of_node[d < radius].tolist()))


def add_holes(disc, holes, check=True):
    """Append obstacle curves inside the first (wall) curve.

    ``holes`` is a list of ``(curve, n_panels)`` or ``(curve, n_panels, q)``.
    No nodes are removed, so the plan has ``I_c`` empty.
    """
    holes = list(holes)
    comps = list(disc.components)
    if check and holes:
        outer = comps[0].curve.polygon()
        polys = []
        for h in holes:
            curve = h[0]
            if not curve.is_simple():
                raise GeometryError("hole curve is not simple")
            poly = curve.polygon()
            if not outer.contains(poly) or outer.exterior.distance(poly) <= 0:
                raise GeometryError("hole is not strictly inside the wall")
            for other in comps[1:]:
                if other.curve.polygon().intersects(poly):
                    raise GeometryError("hole intersects an existing curve")
            for p in polys:
                if p.intersects(poly):
                    raise GeometryError("holes intersect each other")
            polys.append(poly)
    for h in holes:
        curve, npan = h[0], h[1]
        q = h[2] if len(h) > 2 else 16
        comps.append(Component(curve, PanelMesh.uniform(npan, q), "obstacle"))
    new = build_discretization(comps)
    N = disc.N
    clusters = []
    start = N
    for ci in range(len(disc.components), len(comps)):
        n = len(comps[ci].mesh) * comps[ci].mesh.q
        clusters.append((np.zeros(0, dtype=int), np.arange(start, start + n)))
        start += n
    idx = np.arange(N)
    plan = RefinementPlan(idx, np.zeros(0, dtype=int), idx.copy(), np.arange(N, new.N), 1, (), tuple(clusters),
                          disc.components, tuple(comps), "holes")
    return new, plan


def contains(disc, points, component=0):
    """Boolean mask of points strictly inside curve ``component``."""
    poly = disc.components[component].curve.polygon(4096)
    return np.array([poly.contains(Point(p)) for p in np.atleast_2d(points)])
