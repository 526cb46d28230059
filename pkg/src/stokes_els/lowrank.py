"""Interpolative decompositions and compression of the ELS update matrix.

The update ``Q`` of the extended system has three nonzero blocks,
``-A_kc``, ``A_kp`` (rows: kept nodes) and ``A_pk`` (rows: added nodes).
Each is compressed with a row ID whose ``R`` factor consists of true rows of
the kernel block. Rows far from the modified segment are compressed through
their interaction with a proxy circle, so the far field costs O(N_k).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .nystrom import unknowns

log = logging.getLogger(__name__)


class ProxyViolationError(ValueError):
    """A node assumed to be far lies inside the dividing proxy circle."""


# ---------------------------------------------------------------------------
# interpolative decomposition


@dataclass(frozen=True, eq=False)
class IdResult:
    """Row ID ``W ~ P @ W[J[:k]]`` with ``P[J[:k]] = I``."""

    J: np.ndarray
    P: np.ndarray
    k: int
    eps: float

    @property
    def skel(self):
        return self.J[: self.k]

    @property
    def m(self):
        return len(self.J)


def row_id(W, eps=1e-10, max_rank=None):
    """Row interpolative decomposition by column-pivoted QR of ``W.T``.

    The rank is the first ``k`` with ``|R_kk| <= eps * |R_00|``; for the
    pivoted factorization this tracks the singular value decay closely.
    """
    W = np.asarray(W, dtype=float)
    m, n = W.shape
    if m == 0 or n == 0 or not np.any(W):
        return IdResult(np.arange(m), np.zeros((m, 0)), 0, eps)
    R, piv = sla.qr(W.T, mode="r", pivoting=True, check_finite=False)
    R = R[: min(m, n)]
    d = np.abs(np.diag(R))
    small = np.append(d <= eps * d[0], True)
    k = int(np.argmax(small))
    if max_rank is not None:
        k = min(k, max_rank)
    k = max(k, 1)
    P = np.zeros((m, k))
    P[piv[:k]] = np.eye(k)
    if k < m:
        T = sla.solve_triangular(R[:k, :k], R[:k, k:], check_finite=False)
        P[piv[k:]] = T.T
    return IdResult(piv, P, k, eps)


def id_error(W, res):
    """Relative spectral error ``||W - P W[J]|| / ||W||``."""
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        return 0.0
    nW = np.linalg.norm(W, 2)
    if nW == 0:
        return 0.0
    E = W - res.P @ W[res.skel]
    return float(np.linalg.norm(E, 2) / nW)


def svd_truncate(A, eps):
    """``A ~ U @ (s[:, None] * Vt)`` keeping ``s > eps * s[0]``."""
    if A.size == 0:
        return np.zeros((A.shape[0], 0)), np.zeros(0), np.zeros((0, A.shape[1]))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    k = int(np.sum(s > eps * s[0])) if s[0] > 0 else 0
    return U[:, :k], s[:k], Vt[:k]


# ---------------------------------------------------------------------------
# proxy circles and partitions


def circle_points(center, radius, n):
    th = 2 * np.pi * np.arange(n) / n
    nrm = np.stack([np.cos(th), np.sin(th)], axis=-1)
    return np.asarray(center) + radius * nrm, nrm, np.full(n, 2 * np.pi * radius / n)


@dataclass(frozen=True, eq=False)
class ProxyGeometry:
    """Concentric basis (``P^bas``) and dividing (``P^div``) circles per cluster."""

    centers: np.ndarray
    r0: np.ndarray
    bas_factor: float = 1.5
    div_factor: float = 3.0
    n_proxy: int = 64

    def __post_init__(self):
        if not 1.0 < self.bas_factor < self.div_factor:
            raise ValueError("need 1 < bas_factor < div_factor")

    @classmethod
    def around(cls, point_sets, **kw):
        """Bounding circle of each point set about its centroid."""
        centers, r0 = [], []
        for pts in point_sets:
            pts = np.atleast_2d(pts)
            c = pts.mean(axis=0)
            centers.append(c)
            r0.append(max(np.max(np.linalg.norm(pts - c, axis=1)), 1e-12))
        return cls(np.array(centers).reshape(-1, 2), np.array(r0), **kw)

    @property
    def r_bas(self):
        return self.bas_factor * self.r0

    @property
    def r_div(self):
        return self.div_factor * self.r0

    def circle(self, which="bas", index=None):
        """Points, normals and weights on one circle or on the union of all."""
        radii = self.r_bas if which == "bas" else self.r_div
        ids = range(len(self.r0)) if index is None else [index]
        parts = [circle_points(self.centers[i], radii[i], self.n_proxy) for i in ids]
        return tuple(np.concatenate(a) for a in zip(*parts))

    def inside(self, pts, which="div", index=None):
        pts = np.atleast_2d(pts)
        radii = self.r_bas if which == "bas" else self.r_div
        ids = range(len(self.r0)) if index is None else [index]
        out = np.zeros(len(pts), dtype=bool)
        for i in ids:
            out |= np.linalg.norm(pts - self.centers[i], axis=1) < radii[i]
        return out


@dataclass(frozen=True, eq=False)
class PartitionTree:
    """Binary merge tree over a set of node indices.

    ``levels[0]`` holds the leaves; each later level merges neighbors of the
    previous one pairwise. Leaves are consecutive runs in ``order``.
    """

    kind: str
    order: np.ndarray
    levels: tuple

    @property
    def depth(self):
        return len(self.levels)

    @property
    def leaves(self):
        return self.levels[0]

    @classmethod
    def build(cls, nodes, points, center=None, r_min=None, kind="dyadic_by_distance", leaf_size=128):
        """``dyadic_by_distance`` groups by bands ``[2^j r_min, 2^(j+1) r_min)``."""
        nodes = np.asarray(nodes, dtype=int)
        if kind == "dyadic_by_distance":
            dist = np.linalg.norm(np.atleast_2d(points)[nodes] - center, axis=1)
            band = np.floor(np.log2(np.maximum(dist / r_min, 1.0))).astype(int)
            order = nodes[np.lexsort((nodes, band))]
            band = np.sort(band)
            leaves = []
            for b in np.unique(band):
                run = order[band == b]
                nl = max(1, int(np.ceil(len(run) / leaf_size)))
                leaves.extend(np.array_split(run, nl))
        elif kind == "binary_by_index":
            order = np.sort(nodes)
            nl = max(1, int(np.ceil(len(order) / leaf_size)))
            leaves = np.array_split(order, nl)
        else:
            raise ValueError(f"unknown partition kind {kind!r}")
        levels = [tuple(leaves)]
        while len(levels[-1]) > 1:
            prev = levels[-1]
            levels.append(tuple(np.concatenate(prev[i:i + 2]) for i in range(0, len(prev), 2)))
        return cls(kind, order, tuple(levels))


def hierarchical_row_id(rows_fn, groups, eps):
    """Row ID of a tall matrix built leaf by leaf and merged up a binary tree.

    ``rows_fn(idx)`` returns the matrix rows ``idx``; ``groups`` lists leaf row
    index arrays in merge order. Returns an ``IdResult`` over the
    concatenation of ``groups``.
    """
    groups = [np.asarray(g, dtype=int) for g in groups if len(g)]
    if not groups:
        return IdResult(np.zeros(0, int), np.zeros((0, 0)), 0, eps), np.zeros(0, int)
    nodes = []
    for g in groups:
        r = row_id(rows_fn(g), eps)
        nodes.append((g, g[r.skel], r.P))
    while len(nodes) > 1:
        merged = []
        for i in range(0, len(nodes), 2):
            if i + 1 == len(nodes):
                merged.append(nodes[i])
                continue
            (ga, sa, Pa), (gb, sb, Pb) = nodes[i], nodes[i + 1]
            cand = np.concatenate([sa, sb])
            r = row_id(rows_fn(cand), eps)
            ka = Pa.shape[1]
            P = np.vstack([Pa @ r.P[:ka], Pb @ r.P[ka:]])
            merged.append((np.concatenate([ga, gb]), cand[r.skel], P))
        nodes = merged
    rows, skel, P = nodes[0]
    pos = {v: i for i, v in enumerate(rows)}
    sk = np.array([pos[v] for v in skel], dtype=int)
    rest = np.setdiff1d(np.arange(len(rows)), sk)
    P[sk] = np.eye(len(sk))
    return IdResult(np.concatenate([sk, rest]), P, len(sk), eps), rows


def compress_block_far(op, nodes, proxy, eps=1e-10, circle="bas", tree_kind="dyadic_by_distance",
                       leaf_size=128):
    """Row ID of the interaction between ``nodes`` of ``op`` and proxy samples.

    With ``circle="bas"`` the nodes are far-field nodes, which must lie
    outside the dividing circles, and the columns are the basis-circle
    samples. With ``circle="div"`` the nodes are added nodes and the columns
    are the dividing-circle samples. The ID is built leaf by leaf over a
    partition tree and merged upwards. Returns ``(IdResult, rows)`` where
    ``rows`` are the unknown indices in the order the ID refers to.
    """
    nodes = np.asarray(nodes, dtype=int)
    pts = op.disc.nodes
    if not len(nodes):
        return IdResult(np.zeros(0, int), np.zeros((0, 0)), 0, eps), np.zeros(0, int)
    if circle == "bas" and np.any(proxy.inside(pts[nodes], "div")):
        raise ProxyViolationError("far node inside dividing circle")
    tree = PartitionTree.build(nodes, pts, center=proxy.centers[0], r_min=proxy.r_div.max(), kind=tree_kind,
                               leaf_size=leaf_size)
    groups = [unknowns(g) for g in tree.leaves]
    samples = proxy.circle(circle)
    return hierarchical_row_id(lambda r: op.proxy_columns(r, *samples), groups, eps)


# ---------------------------------------------------------------------------
# update compression


@dataclass(eq=False)
class LowRankUpdate:
    """``Q ~ L @ R`` in the extended ordering ``(k, c, p)``."""

    L: np.ndarray
    R: np.ndarray
    k_kc: int
    k_kp: int
    k_pk: int
    mode: str
    eps: float
    sizes: tuple
    L1: np.ndarray = field(default=None, repr=False)
    R1: np.ndarray = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.L.shape[1]

    @property
    def k1(self):
        return self.k_kc + self.k_kp + self.k_pk

    def apply(self, v):
        return self.L @ (self.R @ v)


def dense_update(blocks, sizes):
    """Form ``Q`` densely from ``assemble_blocks`` output (test scale only)."""
    nk, nc, npp = (2 * s for s in sizes)
    Q = np.zeros((nk + nc + npp,) * 2)
    if nc:
        Q[:nk, nk:nk + nc] = -blocks["A_kc"]
    if npp:
        Q[:nk, nk + nc:] = blocks["A_kp"]
        Q[nk + nc:, :nk] = blocks["A_pk"]
    return Q


def _near_set(disc, proxy, k_nodes, changed_nodes):
    """Kept nodes inside any dividing circle or on panels touching the change."""
    near = proxy.inside(disc.nodes[k_nodes], "div")
    panels = set(disc.panel_of_node[changed_nodes].tolist())
    touch = set()
    for p in panels:
        touch.update(disc.panel_neighbors(p))
    near |= np.isin(disc.panel_of_node[k_nodes], list(touch))
    return near


def _chunked_id(block_fn, rows, eps, budget):
    """ID of ``block_fn(rows)``; large row sets use a binary tree of IDs."""
    n_cols = block_fn(rows[:1]).shape[1]
    if len(rows) * n_cols <= budget:
        r = row_id(block_fn(rows), eps)
        return r, rows
    log.info("near block %d x %d exceeds budget, using partition tree", len(rows), n_cols)
    leaf = max(2, budget // max(n_cols, 1))
    groups = np.array_split(np.arange(len(rows)), int(np.ceil(len(rows) / leaf)))
    res, order = hierarchical_row_id(lambda i: block_fn(rows[i]), groups, eps)
    return res, rows[order]


def _far_id(rows_fn, groups, eps, seed, n_sketch=128, margin=24, chunk=4096):
    """Hierarchical row ID of the far rows against a column sketch of the proxy block.

    The proxy block is much wider than its rank, so its rows are compressed
    through ``n_sketch`` Gaussian combinations of the columns, with the
    tolerance tightened tenfold to absorb the sketching error. If the rank
    comes within ``margin`` of the sketch size the unsketched block is used.
    """
    n_cols = rows_fn(groups[0][:1]).shape[1]
    if n_cols > n_sketch + margin:
        G = np.random.default_rng(seed).standard_normal((n_cols, n_sketch))
        # sketch every far row once; merges then only gather rows
        rows = np.concatenate(groups)
        lookup = np.empty(rows.max() + 1, dtype=int)
        lookup[rows] = np.arange(len(rows))
        Y = np.vstack([rows_fn(rows[i:i + chunk]) @ G for i in range(0, len(rows), chunk)])
        res, rows = hierarchical_row_id(lambda r: Y[lookup[r]], groups, 0.1 * eps)
        if res.k <= n_sketch - margin:
            return res, rows
        log.info("far rank %d close to sketch size %d, redoing unsketched", res.k, n_sketch)
    return hierarchical_row_id(rows_fn, groups, eps)


def _scatter(res, rows_pos, n_rows):
    """Embed an ID over ``rows_pos`` into an ``(n_rows, k)`` interpolation matrix."""
    L = np.zeros((n_rows, res.k))
    L[rows_pos] = res.P
    return L, rows_pos[res.skel]


def compress_update(op_old, op_new, plan, eps=1e-10, mode="two_step", proxy=None, n_proxy=64,
                    tree_kind="dyadic_by_distance", leaf_size=128, seed=0, near_budget=4_000_000,
                    keep_intermediate=True):
    """Low-rank factors of the ELS update for a refinement or hole plan.

    ``mode="two_step"`` gives per-block row IDs followed by a randomized row ID
    of the stacked ``L1``. ``mode="svd_optimal"`` forms the blocks densely and
    uses truncated SVDs (small problems only).
    """
    sizes = (plan.N_k, plan.N_c, plan.N_p)
    n_ext = 2 * plan.N_ext
    if plan.is_identity:
        return LowRankUpdate(np.zeros((n_ext, 0)), np.zeros((0, n_ext)), 0, 0, 0, mode, eps, sizes)
    if mode == "svd_optimal":
        return _compress_svd(op_old, op_new, plan, eps, sizes)
    if mode != "two_step":
        raise ValueError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    dn, do = op_new.disc, op_old.disc
    if proxy is None:
        pts = [np.vstack([do.nodes[c], dn.nodes[p]]) for c, p in plan.clusters]
        proxy = ProxyGeometry.around(pts, n_proxy=n_proxy)
    k_new = plan.idx_k_new
    k_old = plan.idx_k_old
    changed_new = plan.idx_p_new
    near = _near_set(dn, proxy, k_new, changed_new)
    if plan.N_c:
        near |= _near_set(do, proxy, k_old, plan.idx_c_old)
    far_pos = np.flatnonzero(~near)
    near_pos = np.flatnonzero(near)
    if np.any(proxy.inside(dn.nodes[k_new[far_pos]], "div")):
        raise ProxyViolationError("far node inside dividing circle")

    uk_new, uk_old = unknowns(k_new), unknowns(k_old)
    uc_old, up_new = unknowns(plan.idx_c_old), unknowns(plan.idx_p_new)
    nk = len(uk_new)

    # far rows: shared ID through the basis circles
    bas = proxy.circle("bas")
    if len(far_pos):
        tree = PartitionTree.build(far_pos, dn.nodes[k_new], center=proxy.centers[0], r_min=proxy.r_div.max(),
                                   kind=tree_kind, leaf_size=leaf_size)
        groups = [unknowns(g) for g in tree.leaves]
        n_scale = op_new.proxy_n_scale(uk_new[groups[0]], *bas)
        res_far, far_rows = _far_id(lambda r: op_new.proxy_columns(uk_new[r], *bas, n_scale=n_scale), groups,
                                    eps, seed)
    else:
        res_far, far_rows = IdResult(np.zeros(0, int), np.zeros((0, 0)), 0, eps), np.zeros(0, int)
    t_far = time.perf_counter() - t0

    near_rows = unknowns(near_pos)

    Lf, Jf = _scatter(res_far, far_rows, nk) if res_far.k else (np.zeros((nk, 0)), np.zeros(0, int))

    def kblock(cols_fn, rows_pos):
        if len(rows_pos) and cols_fn(rows_pos[:1]).shape[1]:
            rn, order = _chunked_id(cols_fn, rows_pos, eps, near_budget)
            Ln, Jn = _scatter(rn, order, nk)
        else:
            Ln, Jn = np.zeros((nk, 0)), np.zeros(0, int)
        return np.hstack([Lf, Ln]), np.concatenate([Jf, Jn])

    ranks = []
    if plan.N_c:
        L_kc, J_kc = kblock(lambda r: op_old.block(uk_old[r], uc_old), near_rows)
        R_kc = op_old.block(uk_old[J_kc], uc_old)
        ranks.append(len(J_kc))
    else:
        L_kc, J_kc, R_kc = np.zeros((nk, 0)), np.zeros(0, int), np.zeros((0, 0))
        ranks.append(0)
    L_kp, J_kp = kblock(lambda r: op_new.block(uk_new[r], up_new), near_rows)
    R_kp = op_new.block(uk_new[J_kp], up_new)
    ranks.append(len(J_kp))

    # added rows: one ID per cluster against the dividing circle and near columns
    L_pk_parts, J_pk = [], []
    npu = len(up_new)
    pos_of = {v: i for i, v in enumerate(plan.idx_p_new)}
    for ci, (_, p_nodes) in enumerate(plan.clusters):
        if not len(p_nodes):
            continue
        rows_pos = unknowns([pos_of[v] for v in p_nodes])
        div = proxy.circle("div", ci)
        near_k = np.flatnonzero(proxy.inside(dn.nodes[k_new], "div", ci)
                                | _near_set(dn, proxy, k_new, p_nodes))
        W = np.hstack([op_new.proxy_columns(up_new[rows_pos], *div),
                       op_new.block(up_new[rows_pos], uk_new[unknowns(near_k)])])
        r = row_id(W, eps)
        Lp = np.zeros((npu, r.k))
        Lp[rows_pos] = r.P
        L_pk_parts.append(Lp)
        J_pk.append(rows_pos[r.skel])
    L_pk = np.hstack(L_pk_parts) if L_pk_parts else np.zeros((npu, 0))
    J_pk = np.concatenate(J_pk) if J_pk else np.zeros(0, int)
    R_pk = op_new.block(up_new[J_pk], uk_new)
    ranks.append(len(J_pk))
    t_blocks = time.perf_counter() - t0

    k_kc, k_kp, k_pk = ranks
    nc, npp = 2 * plan.N_c, 2 * plan.N_p
    k1 = k_kc + k_kp + k_pk
    L1 = np.zeros((n_ext, k1))
    R1 = np.zeros((k1, n_ext))
    L1[:nk, :k_kc] = L_kc
    L1[:nk, k_kc:k_kc + k_kp] = L_kp
    L1[nk + nc:, k_kc + k_kp:] = L_pk
    if k_kc:
        R1[:k_kc, nk:nk + nc] = -R_kc
    R1[k_kc:k_kc + k_kp, nk + nc:] = R_kp
    R1[k_kc + k_kp:, :nk] = R_pk

    # recompression: randomized row ID of L1 T^T, where R1^T = Q_R T is a thin
    # QR. Since Q_R has orthonormal columns this is a row ID of L1 R1 itself,
    # so directions of L1 that R1 annihilates are dropped. T is block diagonal
    # because the blocks of R1 have disjoint column supports. Far rows of L1
    # are the rows Lf @ L1[Jf], so the ID is taken over the far skeleton, near
    # and added rows only and extended to the far rows through Lf.
    T = sla.block_diag(*[np.linalg.qr(Rb.T, mode="r").T if Rb.shape[0] else np.zeros((0, 0))
                         for Rb in (R_kc if k_kc else np.zeros((0, 0)), R_kp, R_pk)])
    kf = len(Jf)
    cand = np.concatenate([Jf, near_rows, nk + nc + np.arange(npp)]).astype(int)
    Yc = L1[cand] @ T
    # ||L1 R1|| from the k1 x k1 Gram matrix; the far rows enter through Lf^T Lf
    GLf = Lf.T @ Lf
    A = Yc[:kf]
    nQ = np.sqrt(max(np.linalg.eigvalsh(A.T @ GLf @ A + Yc[kf:].T @ Yc[kf:])[-1], 0.0))
    nE = np.sqrt(np.linalg.eigvalsh(GLf)[-1]) if kf else 1.0
    nY = np.linalg.norm(Yc, 2) if Yc.size else 0.0
    eps_rec = eps * nQ / max(nY * max(nE, 1.0), 1e-300)
    rng = np.random.default_rng(seed)
    # k1 + 10 samples already span the row space; a power iteration would
    # only square its condition number
    rec = row_id(Yc @ rng.standard_normal((Yc.shape[1], Yc.shape[1] + 10)), eps_rec)
    L = np.zeros((n_ext, rec.k))
    L[:nk] = Lf @ rec.P[:kf]
    L[cand[kf:]] = rec.P[kf:]
    skel = cand[rec.skel[:rec.k]]
    R = L1[skel] @ R1
    info = {"t_far": t_far, "t_blocks": t_blocks, "t_total": time.perf_counter() - t0,
            "far_rank": res_far.k, "n_far": len(far_pos), "n_near": len(near_pos), "proxy": proxy,
            "skel": skel, "eps_rec": eps_rec}
    return LowRankUpdate(L, R, k_kc, k_kp, k_pk, "two_step", eps, sizes,
                         L1 if keep_intermediate else None, R1 if keep_intermediate else None, info)


def _compress_svd(op_old, op_new, plan, eps, sizes):
    """Per-block truncated SVDs, then an SVD of the block-diagonal left factor."""
    from .nystrom import assemble_blocks

    b = assemble_blocks(op_old.disc, op_new.disc, plan, op_old.formulation, op_old.mu, op_old, op_new)
    nk, nc, npp = (2 * s for s in sizes)
    n_ext = nk + nc + npp
    pieces = []
    if nc:
        U, s, Vt = svd_truncate(-b["A_kc"], eps)
        pieces.append((U, s[:, None] * Vt, slice(0, nk), slice(nk, nk + nc)))
    else:
        pieces.append((np.zeros((nk, 0)), np.zeros((0, nc)), slice(0, nk), slice(nk, nk + nc)))
    U, s, Vt = svd_truncate(b["A_kp"], eps)
    pieces.append((U, s[:, None] * Vt, slice(0, nk), slice(nk + nc, n_ext)))
    U, s, Vt = svd_truncate(b["A_pk"], eps)
    pieces.append((U, s[:, None] * Vt, slice(nk + nc, n_ext), slice(0, nk)))
    ranks = [p[0].shape[1] for p in pieces]
    k1 = sum(ranks)
    L1 = np.zeros((n_ext, k1))
    R1 = np.zeros((k1, n_ext))
    o = 0
    for (U, SV, rs, cs), r in zip(pieces, ranks):
        L1[rs, o:o + r] = U
        R1[o:o + r, cs] = SV
        o += r
    U, s, Vt = svd_truncate(L1, eps)
    L = U
    R = (s[:, None] * Vt) @ R1
    return LowRankUpdate(L, R, ranks[0], ranks[1], ranks[2], "svd_optimal", eps, sizes, L1, R1, {})
