"""Nystrom discretization of the Stokes boundary integral equations.

Three formulations are supported:

``interior_dl_plus_null``
    ``(-1/2 I + D + N) tau = g`` on a single wall curve.
``exterior_combined``
    ``(1/2 I + D + S) tau = g`` on one or more obstacle curves.
``mixed``
    double layer plus ``N`` on the first (wall) curve, combined field on the
    remaining obstacle curves inside it.

Off-panel entries use the plain Gauss rule. The log-singular part of the
single layer on a target's own panel and on the two adjacent panels is
integrated with product-integration weights computed from Legendre moments
of ``log|u - u0|``.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import Discretization, gauss_legendre
from .kernels import layer_blocks, pressure_blocks, stokeslet_pressure, stokeslet_velocity

FORMULATIONS = ("interior_dl_plus_null", "exterior_combined", "mixed")


def unknowns(nodes):
    """Interleaved unknown indices ``[2i, 2i+1, ...]`` of node indices."""
    nodes = np.asarray(nodes, dtype=int)
    return np.stack([2 * nodes, 2 * nodes + 1], axis=-1).ravel()


# ---------------------------------------------------------------------------
# log-singular product integration


def _graded_offsets(d, ratio=0.15, levels=24):
    """Breakpoints of [0, d] refined geometrically toward 0."""
    return np.concatenate([[0.0], d * ratio ** np.arange(levels, 0, -1), [d]])


@lru_cache(maxsize=4096)
def log_moments(u0, q):
    """``M_k = int_{-1}^{1} log|u - u0| P_k(u) du`` for ``k < q``."""
    s = min(max(u0, -1.0), 1.0)
    x, w = gauss_legendre(24)
    M = np.zeros(q)
    # integrate in the offset v = |u - s| so that u - u0 never cancels
    for d, sign in ((s + 1.0, -1.0), (1.0 - s, 1.0)):
        if d <= 0:
            continue
        e = _graded_offsets(d)
        lo, hi = e[:-1, None], e[1:, None]
        v = (0.5 * (hi + lo) + 0.5 * (hi - lo) * x).ravel()
        wv = (0.5 * (hi - lo) * w).ravel()
        f = np.log(np.abs((s - u0) + sign * v)) * wv
        M += np.polynomial.legendre.legvander(s + sign * v, q - 1).T @ f
    return M


@lru_cache(maxsize=4096)
def log_weights(u0, q):
    """Weights ``W`` with ``sum_j W_j f(u_j) ~ int log|u - u0| f(u) du``."""
    u, w = gauss_legendre(q)
    V = np.polynomial.legendre.legvander(u, q - 1)
    k = np.arange(q)
    W = w * (V @ ((2 * k + 1) / 2.0 * log_moments(float(u0), q)))
    W.setflags(write=False)
    return W


def _single_layer_correction(disc, single_mask, mu):
    """Sparse (2N x 2N) difference between corrected and plain single layer."""
    rows, cols, vals = [], [], []
    c0 = 1.0 / (4 * np.pi * mu)
    for P in range(disc.n_panels):
        src = disc.panel_nodes(P)
        if not single_mask[src[0]]:
            continue
        a, b = disc.panel_bounds[P]
        cP, hP = 0.5 * (a + b), 0.5 * (b - a)
        q = len(src)
        ug, wg = gauss_legendre(q)
        prev, nxt = disc.panel_neighbors(P)
        targets = np.unique(np.concatenate([disc.panel_nodes(prev), src, disc.panel_nodes(nxt)]))
        ys = disc.nodes[src]
        sp_j = disc.speed[src]
        warc = wg * sp_j * hP
        for i in targets:
            ti = disc.t[i]
            ti = ti + 2 * np.pi * np.round((cP - ti) / (2 * np.pi))
            u0 = (ti - cP) / hP
            self_panel = disc.panel_of_node[i] == P
            if self_panel:
                u0 = float(ug[i - src[0]])
            W = log_weights(round(float(u0), 14), q)
            r = disc.nodes[i] - ys
            rn = np.hypot(r[:, 0], r[:, 1])
            du = np.abs(ug - u0)
            if self_panel:
                j = i - src[0]
                du[j] = 1.0
                rn[j] = 1.0
                ratio = rn / du
                ratio[j] = disc.speed[i] * hP
            else:
                ratio = rn / du
            logpart = -W * sp_j * hP - warc * np.log(ratio)
            corr = c0 * (logpart + warc * np.log(rn))
            blocks = np.zeros((q, 2, 2))
            blocks[:, 0, 0] = corr
            blocks[:, 1, 1] = corr
            if self_panel:
                j = i - src[0]
                tt = np.outer(disc.tangents[i], disc.tangents[i])
                blocks[j] = c0 * (logpart[j] * np.eye(2) + warc[j] * tt)
            for a_ in range(2):
                for b_ in range(2):
                    rows.append(np.full(q, 2 * i + a_))
                    cols.append(2 * src + b_)
                    vals.append(blocks[:, a_, b_])
    n = 2 * disc.N
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


# ---------------------------------------------------------------------------
# matrix entry oracle


class StokesOperator:
    """On-demand entries of the Nystrom matrix for one discretization."""

    def __init__(self, disc: Discretization, formulation="interior_dl_plus_null", mu=1.0, null_term=True):
        if formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {formulation!r}")
        roles = [c.role for c in disc.components]
        if formulation == "interior_dl_plus_null" and (len(roles) != 1 or roles[0] != "wall"):
            raise ValueError("interior formulation needs exactly one wall curve")
        if formulation == "exterior_combined" and any(r != "obstacle" for r in roles):
            raise ValueError("exterior formulation needs obstacle curves only")
        if formulation == "mixed" and (roles[0] != "wall" or any(r != "obstacle" for r in roles[1:])):
            raise ValueError("mixed formulation needs one wall followed by obstacles")
        self.disc = disc
        self.formulation = formulation
        self.mu = float(mu)
        role = np.array(roles)[disc.component_of_node]
        self.wall = role == "wall"
        # rows and columns carrying the rank-one nullspace term; dropping it
        # leaves the singular -1/2 I + D of the pure interior problem
        self.null = self.wall & bool(null_term)
        self.single = role == "obstacle"
        self.double = np.ones(disc.N, dtype=bool)
        self.jump = np.where(self.wall, -0.5, 0.5)
        tt = disc.tangents[:, :, None] * disc.tangents[:, None, :]
        self.self_blocks = (-(disc.curvature * disc.weights) / (2 * np.pi))[:, None, None] * tt
        self.self_blocks += self.jump[:, None, None] * np.eye(2)
        self.wn = disc.weights[:, None] * disc.normals
        self.correction = _single_layer_correction(disc, self.single, self.mu)
        self.has_correction = self.correction.nnz > 0
        self.shape = (2 * disc.N, 2 * disc.N)
        self.norm_estimate = None

    @property
    def n(self):
        return 2 * self.disc.N

    def block(self, rows, cols):
        """Dense submatrix ``A[rows, cols]`` (unknown indices)."""
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        if len(rows) == 0 or len(cols) == 0:
            return np.zeros((len(rows), len(cols)))
        if len(rows) * len(cols) > 4_000_000 and len(rows) > 1:
            step = max(1, 4_000_000 // len(cols))
            return np.vstack([self.block(rows[s:s + step], cols) for s in range(0, len(rows), step)])
        d = self.disc
        rn, cn = rows // 2, cols // 2
        ur, ir = np.unique(rn, return_inverse=True)
        uc, ic = np.unique(cn, return_inverse=True)
        K = layer_blocks(d.nodes[ur], d.nodes[uc], d.normals[uc], d.weights[uc], self.mu,
                         single=self.single[uc], double=self.double[uc])
        K = K[(2 * ir + rows % 2)[:, None], (2 * ic + cols % 2)[None, :]]
        same = rn[:, None] == cn[None, :]
        if np.any(same):
            ii, jj = np.nonzero(same)
            K[ii, jj] += self.self_blocks[rn[ii], rows[ii] % 2, cols[jj] % 2]
        wr, wc = self.null[rn], self.null[cn]
        if np.any(wr) and np.any(wc):
            nr = np.where(wr, self.disc.normals[rn, rows % 2], 0.0)
            nc = np.where(wc, self.wn[cn, cols % 2], 0.0)
            K += nr[:, None] * nc[None, :]
        if self.has_correction:
            K += self.correction[rows][:, cols].toarray()
        return K

    def dense(self):
        idx = np.arange(self.n)
        return self.block(idx, idx)

    def matvec(self, v, chunk=2048):
        """Dense-free product ``A v`` computed in row chunks."""
        v = np.asarray(v, dtype=float)
        out = np.empty((self.n,) + v.shape[1:])
        cols = np.arange(self.n)
        for s in range(0, self.n, chunk):
            rows = np.arange(s, min(s + chunk, self.n))
            out[rows] = self.block(rows, cols) @ v
        return out

    # proxy bases: interactions with sample points on circles, used by the
    # compression routines in place of far-field blocks

    def proxy_columns(self, rows, pts, nrm, wts, n_scale=None):
        """Basis for ``A[rows, far]`` with far sources outside the proxy circle.

        Wall rows get an extra column along the normals for the rank-one term,
        scaled like the largest proxy column unless ``n_scale`` fixes the factor
        (needed when the rows are evaluated in several chunks).
        """
        rows = np.asarray(rows, dtype=int)
        rn = rows // 2
        ur, ir = np.unique(rn, return_inverse=True)
        sel = (2 * ir + rows % 2)
        m = len(pts)
        S = layer_blocks(self.disc.nodes[ur], pts, nrm, wts, self.mu,
                         single=np.ones(m, bool), double=np.zeros(m, bool))[sel]
        D = layer_blocks(self.disc.nodes[ur], pts, nrm, wts, self.mu)[sel]
        cols = [S, D]
        if np.any(self.null[rn]):
            # normal direction of the rank-one term, scaled like the largest proxy column
            ncol = np.where(self.null[rn], self.disc.normals[rn, rows % 2], 0.0)
            if n_scale is None:
                scale = np.sqrt(max(np.sum(S ** 2, axis=0).max(initial=0), np.sum(D ** 2, axis=0).max(initial=0)))
                n_scale = scale / max(np.linalg.norm(ncol), 1e-300)
            cols.append((ncol * n_scale)[:, None])
        return np.hstack(cols)

    def proxy_n_scale(self, rows, pts, nrm, wts):
        """The factor ``proxy_columns`` applies to the normal column for these rows."""
        rows = np.asarray(rows, dtype=int)
        rn = rows // 2
        if not np.any(self.null[rn]):
            return None
        B = self.proxy_columns(rows, pts, nrm, wts)
        ncol = np.where(self.null[rn], self.disc.normals[rn, rows % 2], 0.0)
        return float(np.linalg.norm(B[:, -1]) / max(np.linalg.norm(ncol), 1e-300))

    def proxy_rows(self, cols, pts, nrm, wts):
        """Basis (as rows) for ``A[far, cols]`` with far targets outside the circle."""
        cols = np.asarray(cols, dtype=int)
        cn = cols // 2
        uc, ic = np.unique(cn, return_inverse=True)
        sel = (2 * ic + cols % 2)
        d = self.disc
        R1 = layer_blocks(pts, d.nodes[uc], d.normals[uc], d.weights[uc], self.mu)[:, sel]
        R2 = layer_blocks(pts, d.nodes[uc], d.normals[uc], d.weights[uc], self.mu,
                          single=np.ones(len(uc), bool), double=np.zeros(len(uc), bool))[:, sel]
        wn = np.where(self.null[cn], self.wn[cn, cols % 2], 0.0)[None, :]
        scale = np.sqrt(max(np.sum(R1 ** 2, axis=1).max(initial=0), np.sum(R2 ** 2, axis=1).max(initial=0)))
        wn = wn / max(np.linalg.norm(wn), 1e-300) * scale
        return np.vstack([R1, R2, wn])


# ---------------------------------------------------------------------------
# systems, data, evaluation


@dataclass(eq=False)
class BieSystem:
    formulation: str
    disc: Discretization
    op: StokesOperator
    mu: float = 1.0
    _matrix: np.ndarray = field(default=None, repr=False)

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = self.op.dense()
            self._matrix.setflags(write=False)
        return self._matrix

    @property
    def n(self):
        return self.op.n


def assemble(disc, formulation="interior_dl_plus_null", mu=1.0, dense=True, null_term=True):
    """Build the Nystrom system; the dense matrix is formed when ``dense``."""
    op = StokesOperator(disc, formulation, mu, null_term)
    sysm = BieSystem(formulation, disc, op, mu)
    if dense:
        sysm.matrix
    return sysm


def default_forces(n_sources):
    th = 2 * np.pi * np.arange(n_sources) / max(n_sources, 1) + 0.5
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    g: np.ndarray
    sources: np.ndarray
    forces: np.ndarray
    mu: float = 1.0

    def velocity(self, x):
        """Exact generating field at points ``x``."""
        x = np.atleast_2d(x)
        u = np.zeros_like(x, dtype=float)
        for y0, f in zip(self.sources, self.forces):
            u += stokeslet_velocity(x, y0, f, self.mu)
        return u

    def pressure(self, x):
        x = np.atleast_2d(x)
        p = np.zeros(len(x))
        for y0, f in zip(self.sources, self.forces):
            p += stokeslet_pressure(x, y0, f)
        return p


def stokeslet_data(disc, sources, forces=None, mu=1.0):
    """Boundary velocity generated by point forces at ``sources``."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    forces = default_forces(len(sources)) if forces is None else np.atleast_2d(np.asarray(forces, dtype=float))
    bd = BoundaryData(np.zeros(0), sources, forces, mu)
    g = bd.velocity(disc.nodes).ravel()
    g.setflags(write=False)
    return BoundaryData(g, sources, forces, mu)


def flux(disc, g, component=None):
    """Discrete ``int g . n ds`` (over one curve when ``component`` given)."""
    v = np.einsum("ij,ij->i", np.asarray(g).reshape(-1, 2), disc.normals) * disc.weights
    if component is not None:
        v = v[disc.component_of_node == component]
    return float(v.sum())


@dataclass(frozen=True)
class Evaluation:
    velocity: np.ndarray
    pressure: np.ndarray
    too_close: np.ndarray


def evaluate_solution(disc, tau, targets, formulation="interior_dl_plus_null", mu=1.0, pressure=False,
                      min_panel_distance=5.0):
    """Velocity (and pressure) of the layer potential with density ``tau``.

    Targets closer than ``min_panel_distance`` panel lengths to the boundary
    are flagged in ``too_close``; their values are still computed with the
    plain rule.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    op_single = np.array([c.role for c in disc.components])[disc.component_of_node] == "obstacle"
    if formulation == "interior_dl_plus_null":
        op_single = np.zeros(disc.N, bool)
    K = layer_blocks(targets, disc.nodes, disc.normals, disc.weights, mu, single=op_single)
    u = (K @ np.asarray(tau, dtype=float)).reshape(-1, 2)
    p = None
    if pressure:
        p = pressure_blocks(targets, disc.nodes, disc.normals, disc.weights, mu, single=op_single) @ tau
    d = np.linalg.norm(targets[:, None, :] - disc.nodes[None, :, :], axis=-1)
    j = np.argmin(d, axis=1)
    plen = disc.panel_lengths()[disc.panel_of_node[j]]
    close = d[np.arange(len(targets)), j] < min_panel_distance * plen
    if np.any(close):
        warnings.warn(f"{int(close.sum())} target(s) closer than {min_panel_distance} panel lengths; "
                      "accuracy not guaranteed", stacklevel=2)
    return Evaluation(u, p, close)


def relative_error(u, u_exact):
    """Mean over targets of ``|u - u_exact| / |u_exact|``."""
    return float(np.mean(np.linalg.norm(u - u_exact, axis=1) / np.linalg.norm(u_exact, axis=1)))


def assemble_blocks(disc_old, disc_new, plan, formulation="interior_dl_plus_null", mu=1.0,
                    op_old=None, op_new=None, names=None):
    """Dense blocks ``A_kk, A_kc, A_ck, A_cc, A_kp, A_pk, A_pp`` of the two systems.

    ``names`` restricts the output to a subset of the blocks.
    """
    if (disc_old.N != plan.N_k + plan.N_c) or (disc_new.N != plan.N_k + plan.N_p):
        raise ValueError("plan is inconsistent with the discretizations")
    op_old = op_old or StokesOperator(disc_old, formulation, mu)
    op_new = op_new or StokesOperator(disc_new, formulation, mu)
    k_o, c_o = unknowns(plan.idx_k_old), unknowns(plan.idx_c_old)
    k_n, p_n = unknowns(plan.idx_k_new), unknowns(plan.idx_p_new)
    spec = {
        "A_kk": (op_old, k_o, k_o), "A_kc": (op_old, k_o, c_o), "A_ck": (op_old, c_o, k_o),
        "A_cc": (op_old, c_o, c_o), "A_kp": (op_new, k_n, p_n), "A_pk": (op_new, p_n, k_n),
        "A_pp": (op_new, p_n, p_n),
    }
    names = spec if names is None else names
    return {n: spec[n][0].block(spec[n][1], spec[n][2]) for n in names}


def dump_matrix(path, A):
    """Row-major float64 dump preceded by two little-endian uint32 dimensions."""
    A = np.ascontiguousarray(A, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *A.shape))
        fh.write(A.tobytes())


def load_matrix(path):
    with open(path, "rb") as fh:
        m, n = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(), dtype="<f8").reshape(m, n).copy()
