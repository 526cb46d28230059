"""Hierarchically block separable (HBS) compression and inversion.

The matrix is compressed on a binary tree of contiguous node ranges. Every
non-root box gets a joint row/column ID (``U = V = P``) computed from its
near-field entries and its interactions with a proxy circle, so the full
matrix is never formed. The inverse is built by the usual telescoping
factorization: each box stores ``E``, ``F``, ``G`` and passes a reduced
block ``D_hat`` to its parent.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .lowrank import circle_points, row_id
from .nystrom import unknowns

log = logging.getLogger(__name__)

MAGIC = b"HBS1"
VERSION = 1


class HbsSingularityError(np.linalg.LinAlgError):
    """A block met during inversion is numerically singular."""

    def __init__(self, box, cond):
        super().__init__(f"singular block at tree node {box} (condition number {cond:.3e})")
        self.box = box
        self.cond = cond


@dataclass(eq=False)
class Box:
    index: int
    lo: int
    hi: int
    level: int
    parent: int = -1
    children: tuple = ()
    # compression
    active: np.ndarray = None
    skel: np.ndarray = None
    P: np.ndarray = None
    D: np.ndarray = None
    B12: np.ndarray = None
    B21: np.ndarray = None
    # inverse
    E: np.ndarray = None
    F: np.ndarray = None
    G: np.ndarray = None
    Dhat: np.ndarray = None

    @property
    def is_leaf(self):
        return not self.children

    @property
    def is_root(self):
        return self.parent < 0

    @property
    def k(self):
        return 0 if self.skel is None else len(self.skel)


def build_tree(disc, leaf_size=64):
    """Bisect the node range, cutting at curve boundaries when present."""
    comp_cuts = np.flatnonzero(np.diff(disc.component_of_node)) + 1
    panel_cuts = np.asarray(disc.panel_start, dtype=int)
    boxes = []

    def split(lo, hi, level, parent):
        b = Box(len(boxes), lo, hi, level, parent)
        boxes.append(b)
        if hi - lo > leaf_size:
            mid = (lo + hi) / 2
            inner = comp_cuts[(comp_cuts > lo) & (comp_cuts < hi)]
            if len(inner) == 0:
                inner = panel_cuts[(panel_cuts > lo) & (panel_cuts < hi)]
            if len(inner) == 0:
                inner = np.array([int(mid)])
            cut = int(inner[np.argmin(np.abs(inner - mid))])
            c1 = split(lo, cut, level + 1, b.index)
            c2 = split(cut, hi, level + 1, b.index)
            b.children = (c1, c2)
        return b.index

    split(0, disc.N, 0, -1)
    return boxes


def default_max_cond(tol):
    return min(1.0 / np.finfo(float).eps, max(1e8, 1e-2 / tol))


class HbsOperator:
    """Compressed representation of a Nystrom matrix, with optional inverse."""

    def __init__(self, boxes, n, tol, info=None):
        self.boxes = boxes
        self.n = n
        self.tol = tol
        self.info = info or {}
        self.inverted = False
        self.shape = (n, n)
        self._post = self._postorder()

    def _postorder(self):
        order = []
        stack = [(0, False)]
        while stack:
            i, seen = stack.pop()
            if seen or self.boxes[i].is_leaf:
                order.append(i)
            else:
                stack.append((i, True))
                for c in reversed(self.boxes[i].children):
                    stack.append((c, False))
        return order

    @property
    def ranks(self):
        return [b.k for b in self.boxes if not b.is_root]

    @property
    def total_skeleton(self):
        return int(sum(self.ranks))

    # -- products --------------------------------------------------------

    def _leaf_slice(self, b):
        return slice(2 * b.lo, 2 * b.hi)

    def matvec(self, x, transpose=False):
        """``A @ x`` (or ``A.T @ x``) in O(N) at fixed ranks; ``x`` may have several columns."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {x.shape[0]}")
        T = (lambda M: M.T) if transpose else (lambda M: M)
        root = self.boxes[0]
        if root.is_leaf:
            return T(root.D) @ x
        xhat = {}
        for i in self._post:
            b = self.boxes[i]
            if b.is_root:
                continue
            if b.is_leaf:
                xhat[i] = b.P.T @ x[self._leaf_slice(b)]
            else:
                xhat[i] = b.P.T @ np.concatenate([xhat[c] for c in b.children])
        y = np.zeros_like(x)
        yhat = {}
        for i in reversed(self._post):
            b = self.boxes[i]
            if b.is_leaf:
                yb = T(b.D) @ x[self._leaf_slice(b)]
                if not b.is_root:
                    yb = yb + b.P @ yhat[i]
                y[self._leaf_slice(b)] = yb
                continue
            c1, c2 = b.children
            B12, B21 = (b.B21.T, b.B12.T) if transpose else (b.B12, b.B21)
            z1 = B12 @ xhat[c2]
            z2 = B21 @ xhat[c1]
            if not b.is_root:
                up = b.P @ yhat[i]
                k1 = self.boxes[c1].k
                z1 = z1 + up[:k1]
                z2 = z2 + up[k1:]
            yhat[c1], yhat[c2] = z1, z2
        return y

    apply = matvec

    def solve(self, b_vec, transpose=False):
        """Apply the compressed inverse (or its transpose); requires ``invert``."""
        if not self.inverted:
            raise RuntimeError("call invert() before solve()")
        b_vec = np.asarray(b_vec, dtype=float)
        if b_vec.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {b_vec.shape[0]}")
        root = self.boxes[0]
        if root.is_leaf:
            return (root.G.T if transpose else root.G) @ b_vec
        bloc, bhat = {}, {}
        for i in self._post:
            bx = self.boxes[i]
            v = b_vec[self._leaf_slice(bx)] if bx.is_leaf else np.concatenate([bhat[c] for c in bx.children])
            bloc[i] = v
            if not bx.is_root:
                bhat[i] = (bx.E.T if transpose else bx.F) @ v
        x = np.zeros_like(b_vec)
        xhat = {}
        for i in reversed(self._post):
            bx = self.boxes[i]
            xb = (bx.G.T if transpose else bx.G) @ bloc[i]
            if not bx.is_root:
                xb = xb + (bx.F.T if transpose else bx.E) @ xhat[i]
            if bx.is_leaf:
                x[self._leaf_slice(bx)] = xb
            else:
                k1 = self.boxes[bx.children[0]].k
                xhat[bx.children[0]], xhat[bx.children[1]] = xb[:k1], xb[k1:]
        return x

    # -- inversion -------------------------------------------------------

    def invert(self, max_cond=None):
        """Build the telescoping inverse factors."""
        t0 = time.perf_counter()
        max_cond = default_max_cond(self.tol) if max_cond is None else max_cond
        for i in self._post:
            b = self.boxes[i]
            if b.is_leaf:
                Dt = b.D
            else:
                c1, c2 = (self.boxes[c] for c in b.children)
                Dt = np.block([[c1.Dhat, b.B12], [b.B21, c2.Dhat]])
            Dinv = _checked_inverse(Dt, b.index, max_cond)
            if b.is_root:
                b.G = Dinv
                continue
            DP = Dinv @ b.P
            b.Dhat = _checked_inverse(b.P.T @ DP, b.index, max_cond)
            b.E = DP @ b.Dhat
            b.F = b.Dhat @ (b.P.T @ Dinv)
            b.G = Dinv - b.E @ (b.P.T @ Dinv)
        self.inverted = True
        self.info["t_inv"] = time.perf_counter() - t0
        return self

    # -- serialization ---------------------------------------------------

    _ARRAYS = ("active", "skel", "P", "D", "B12", "B21", "E", "F", "G", "Dhat")

    def save(self, path):
        meta = {"n": self.n, "tol": self.tol, "inverted": self.inverted,
                "boxes": [[b.index, b.lo, b.hi, b.level, b.parent, list(b.children)] for b in self.boxes]}
        with open(path, "wb") as fh:
            mb = json.dumps(meta).encode()
            fh.write(MAGIC + struct.pack("<II", VERSION, len(mb)) + mb)
            for b in self.boxes:
                for name in self._ARRAYS:
                    _write_array(fh, getattr(b, name))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError("not an HBS file")
            version, ml = struct.unpack("<II", fh.read(8))
            if version != VERSION:
                raise ValueError(f"unsupported HBS file version {version}")
            meta = json.loads(fh.read(ml))
            boxes = []
            for idx, lo, hi, level, parent, children in meta["boxes"]:
                b = Box(idx, lo, hi, level, parent, tuple(children))
                for name in cls._ARRAYS:
                    setattr(b, name, _read_array(fh))
                boxes.append(b)
        op = cls(boxes, meta["n"], meta["tol"])
        op.inverted = meta["inverted"]
        return op


def _checked_inverse(M, box, max_cond):
    if M.size == 0:
        return np.zeros_like(M)
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > max_cond:
        raise HbsSingularityError(box, c)
    return np.linalg.inv(M)


def _write_array(fh, a):
    if a is None:
        fh.write(struct.pack("<B", 0))
        return
    a = np.asarray(a)
    code = 1 if a.dtype.kind == "f" else 2
    a = np.ascontiguousarray(a, dtype="<f8" if code == 1 else "<i8")
    fh.write(struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes())


def _read_array(fh):
    (code,) = struct.unpack("<B", fh.read(1))
    if code == 0:
        return None
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    dt = "<f8" if code == 1 else "<i8"
    n = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(fh.read(8 * n), dtype=dt).reshape(shape).copy()


# ---------------------------------------------------------------------------
# compression


def _coupled(op):
    """Node-level sparsity pattern of the near-singular corrections."""
    C = op.correction
    if C.nnz == 0:
        return None
    return C.tocsr(), C.tocsc()


def compress(op, tol=1e-10, leaf_size=64, n_proxy=64, proxy_factor=1.5):
    """HBS compression of the operator ``op`` (a ``StokesOperator``)."""
    t0 = time.perf_counter()
    disc = op.disc
    boxes = build_tree(disc, leaf_size)
    for b in boxes:
        b.active = unknowns(np.arange(b.lo, b.hi))
    nodes = disc.nodes
    coupled = _coupled(op)
    depth = max(b.level for b in boxes)
    dense_blocks = 0
    for level in range(depth, 0, -1):
        # frontier: boxes on this level plus shallower leaves
        front = [b for b in boxes if b.level == level or (b.is_leaf and b.level < level)]
        for b in boxes:
            if b.level == level and not b.is_leaf:
                b.active = np.concatenate([boxes[c].skel for c in b.children])
        f_idx = np.concatenate([b.active for b in front])
        f_owner = np.concatenate([np.full(len(b.active), b.index) for b in front])
        f_pts = nodes[f_idx // 2]
        for b in (bb for bb in boxes if bb.level == level):
            I = b.active
            pts = nodes[b.lo:b.hi]
            c = pts.mean(axis=0)
            r = proxy_factor * max(np.max(np.linalg.norm(pts - c, axis=1)), 1e-14)
            near = f_idx[(f_owner != b.index) & (np.linalg.norm(f_pts - c, axis=1) < r)]
            if coupled is not None:
                near = np.union1d(near, _coupled_outside(coupled, b))
            ppts, pn, pw = circle_points(c, r, n_proxy)
            parts = [op.proxy_columns(I, ppts, pn, pw), op.proxy_rows(I, ppts, pn, pw).T]
            if len(near):
                parts += [op.block(I, near), op.block(near, I).T]
            res = row_id(np.hstack(parts), tol)
            if res.k == len(I):
                dense_blocks += 1
                log.info("box %d: rank equals block size %d", b.index, len(I))
            b.skel = I[res.skel]
            b.P = res.P
            if b.is_leaf:
                b.D = op.block(I, I)
    for b in boxes:
        if b.is_leaf and b.D is None:
            b.D = op.block(b.active, b.active)
        if not b.is_leaf:
            c1, c2 = (boxes[c] for c in b.children)
            b.B12 = op.block(c1.skel, c2.skel)
            b.B21 = op.block(c2.skel, c1.skel)
    info = {"t_comp": time.perf_counter() - t0, "leaf_size": leaf_size, "n_proxy": n_proxy,
            "full_rank_boxes": dense_blocks}
    return HbsOperator(boxes, op.n, tol, info)


def _coupled_outside(coupled, b):
    """Unknowns outside box ``b`` tied to it by near-singular corrections."""
    csr, csc = coupled
    lo, hi = 2 * b.lo, 2 * b.hi
    cols = csr[lo:hi].indices
    rows = csc[:, lo:hi].indices
    idx = np.unique(np.concatenate([cols, rows]))
    return idx[(idx < lo) | (idx >= hi)]


def build_solver(op, tol=1e-10, leaf_size=64, n_proxy=64, max_cond=None):
    """Compress and invert; returns the ready ``HbsOperator``."""
    return compress(op, tol, leaf_size, n_proxy).invert(max_cond)


class SubOperator:
    """Restriction of an operator to a subset of its nodes (for example ``A_pp``)."""

    def __init__(self, op, node_idx):
        node_idx = np.asarray(node_idx, dtype=int)
        d = op.disc
        self.parent = op
        self.node_idx = node_idx
        self.uidx = unknowns(node_idx)
        pan = d.panel_of_node[node_idx]
        starts = np.flatnonzero(np.r_[True, pan[1:] != pan[:-1]])
        self.disc = SimpleNamespace(N=len(node_idx), nodes=d.nodes[node_idx],
                                    component_of_node=d.component_of_node[node_idx], panel_start=starts)
        self.n = len(self.uidx)
        self.correction = op.correction[self.uidx][:, self.uidx]

    def block(self, rows, cols):
        return self.parent.block(self.uidx[np.asarray(rows, dtype=int)], self.uidx[np.asarray(cols, dtype=int)])

    def proxy_columns(self, rows, *proxy):
        return self.parent.proxy_columns(self.uidx[np.asarray(rows, dtype=int)], *proxy)

    def proxy_rows(self, cols, *proxy):
        return self.parent.proxy_rows(self.uidx[np.asarray(cols, dtype=int)], *proxy)
