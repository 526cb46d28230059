"""Extended linear system solver for locally modified discretizations.

After a refinement the new system ``A_nn`` is embedded in an extended system
over the kept, cut and added unknowns,

    A_ext = [[A_kk, 0,    A_kp],        ~A = diag(A_oo, A_pp)
             [A_ck, A_cc, 0   ],        A_ext = ~A + Q
             [A_pk, 0,    A_pp]],

whose inverse restricted to ``(k, p)`` solves the new problem. The original
matrix ``A_oo`` appears as a block, so its precomputed inverse is reused and
the update ``Q = L R`` is handled with the Woodbury formula. Added holes are
the special case with no cut unknowns.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, svds

from .hbs import SubOperator, build_solver, compress
from .nystrom import unknowns

log = logging.getLogger(__name__)

DENSE_APP_LIMIT = 2048


class WoodburySingularityError(np.linalg.LinAlgError):
    """The small Woodbury matrix ``I + R A~^-1 L`` is numerically singular."""


class DenseSolver:
    """LU-factored dense block with the same interface as ``HbsOperator``."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.n = self.A.shape[0]
        self.lu = sla.lu_factor(self.A, check_finite=False) if self.n else None
        self.inverted = True

    def matvec(self, x, transpose=False):
        return (self.A.T if transpose else self.A) @ x

    def solve(self, b, transpose=False):
        if self.n == 0:
            return np.zeros_like(b)
        return sla.lu_solve(self.lu, b, trans=1 if transpose else 0, check_finite=False)


class ElsSolver:
    """Woodbury solver for the extended system of a refinement or hole plan.

    ``A_oo_solver`` acts in the original node numbering (an ``HbsOperator``
    with inverse, or a ``DenseSolver``); ``A_pp_solver`` acts on the added
    unknowns in the order of ``plan.idx_p_new``. With ``factor=False`` only
    the forward apply is available and ``A_oo_solver`` need not be inverted.
    """

    def __init__(self, A_oo_solver, A_pp_solver, plan, update, timings=None, factor=True):
        self.oo = A_oo_solver
        self.pp = A_pp_solver
        self.plan = plan
        self.update = update
        self.nk, self.nc, self.np_ = 2 * plan.N_k, 2 * plan.N_c, 2 * plan.N_p
        self.n_ext = self.nk + self.nc + self.np_
        self.n_new = self.nk + self.np_
        # extended (k, c) block in the original numbering
        self.perm_o = np.concatenate([unknowns(plan.idx_k_old), unknowns(plan.idx_c_old)])
        self.uk_new = unknowns(plan.idx_k_new)
        self.up_new = unknowns(plan.idx_p_new)
        self.timings = dict(timings or {})
        t0 = time.perf_counter()
        L, R = update.L, update.R
        self.k = L.shape[1]
        self.factored = factor
        if self.k and factor:
            self.X = self.tilde_solve(L)
            self.W = np.eye(self.k) + R @ self.X
            self.cond_W = np.linalg.cond(self.W)
            if not np.isfinite(self.cond_W) or self.cond_W > np.finfo(float).eps ** -0.5:
                raise WoodburySingularityError(
                    f"Woodbury matrix condition number {self.cond_W:.3e}; try mode='svd_optimal'")
            self.W_lu = sla.lu_factor(self.W, check_finite=False)
        else:
            self.X = np.zeros((self.n_ext, 0))
            self.W = np.eye(0)
            self.cond_W = 1.0
            self.W_lu = None
        self.timings["t_woodbury"] = time.perf_counter() - t0

    # -- block diagonal part ---------------------------------------------

    def tilde_solve(self, v, transpose=False):
        """``~A^-1 v`` (or ``~A^-T v``) in the extended ordering."""
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        no = self.nk + self.nc
        x = np.zeros((self.oo.n,) + v.shape[1:])
        x[self.perm_o] = v[:no]
        out[:no] = self.oo.solve(x, transpose)[self.perm_o]
        if self.np_:
            out[no:] = self.pp.solve(v[no:], transpose)
        return out

    def tilde_apply(self, v, transpose=False):
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        no = self.nk + self.nc
        x = np.zeros((self.oo.n,) + v.shape[1:])
        x[self.perm_o] = v[:no]
        out[:no] = self.oo.matvec(x, transpose)[self.perm_o]
        if self.np_:
            out[no:] = self.pp.matvec(v[no:], transpose)
        return out

    # -- extended system -------------------------------------------------

    def solve_ext(self, g_ext, transpose=False):
        """Woodbury solve with ``~A + L R`` (or its transpose)."""
        if not self.factored:
            raise RuntimeError("solver was built for forward applies only")
        g_ext = np.asarray(g_ext, dtype=float)
        if g_ext.shape[0] != self.n_ext:
            raise ValueError(f"expected {self.n_ext} rows, got {g_ext.shape[0]}")
        if self.k == 0:
            return self.tilde_solve(g_ext, transpose)
        R = self.update.R
        if not transpose:
            y = self.tilde_solve(g_ext)
            return y - self.X @ sla.lu_solve(self.W_lu, R @ y, check_finite=False)
        z = g_ext - R.T @ sla.lu_solve(self.W_lu, self.X.T @ g_ext, trans=1, check_finite=False)
        return self.tilde_solve(z, transpose=True)

    def apply_ext(self, v, transpose=False):
        """``(~A + L R) v`` using the fast applies of the diagonal blocks."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n_ext:
            raise ValueError(f"expected {self.n_ext} rows, got {v.shape[0]}")
        L, R = self.update.L, self.update.R
        low = (R.T @ (L.T @ v)) if transpose else (L @ (R @ v))
        return self.tilde_apply(v, transpose) + low

    def extend(self, g_new):
        """``(g_k, 0, g_p)`` from a vector in the new numbering."""
        g_new = np.asarray(g_new, dtype=float)
        if g_new.shape[0] != self.n_new:
            raise ValueError(f"expected {self.n_new} rows, got {g_new.shape[0]}")
        g = np.zeros((self.n_ext,) + g_new.shape[1:])
        g[:self.nk] = g_new[self.uk_new]
        g[self.nk + self.nc:] = g_new[self.up_new]
        return g

    def restrict(self, v_ext):
        out = np.empty((self.n_new,) + v_ext.shape[1:])
        out[self.uk_new] = v_ext[:self.nk]
        out[self.up_new] = v_ext[self.nk + self.nc:]
        return out

    def solve(self, g_new, return_ext=False):
        """Density on the new discretization; the dummy block is discarded."""
        t = self.solve_ext(self.extend(g_new))
        return (self.restrict(t), t) if return_ext else self.restrict(t)

    def apply(self, v_new):
        """Approximate ``A_nn v`` from the block-diagonal-plus-low-rank form."""
        return self.restrict(self.apply_ext(self.extend(v_new)))

    def dummy_density(self, t_ext):
        return t_ext[self.nk:self.nk + self.nc]

    def as_operator(self, kind="solve"):
        """``LinearOperator`` for the new-system solve or apply."""
        f = self.solve if kind == "solve" else self.apply
        return LinearOperator((self.n_new, self.n_new), matvec=f, matmat=f, dtype=float)


def pp_solver(op_new, plan, tol=1e-10, dense_limit=DENSE_APP_LIMIT, invert=True):
    """Dense LU of ``A_pp`` when small, otherwise an HBS solver of the sub-block."""
    up = unknowns(plan.idx_p_new)
    if len(up) <= dense_limit:
        return DenseSolver(op_new.block(up, up))
    sub = SubOperator(op_new, plan.idx_p_new)
    if invert:
        return build_solver(sub, tol)
    return compress(sub, tol)


def els_build(A_oo_solver, op_old, op_new, plan, update=None, eps=1e-10, mode="two_step", A_pp_solver=None,
              factor=True, **compress_kw):
    """Assemble the Woodbury solver; the cost of ``A_oo_solver`` is not included.

    ``timings`` holds ``t_lowrank`` and ``t_pp`` (compression phase) and
    ``t_woodbury`` (inversion phase).
    """
    from .lowrank import compress_update

    timings = {}
    t0 = time.perf_counter()
    if update is None:
        update = compress_update(op_old, op_new, plan, eps, mode, **compress_kw)
    timings["t_lowrank"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if A_pp_solver is None:
        A_pp_solver = pp_solver(op_new, plan, eps, invert=factor)
    timings["t_pp"] = time.perf_counter() - t0
    return ElsSolver(A_oo_solver, A_pp_solver, plan, update, timings, factor=factor)


def els_build_holes(A_kk_solver, op_old, op_new, plan, update=None, eps=1e-10, **kw):
    """Variant for added holes: only ``A_kp`` and ``A_pk`` are compressed."""
    if plan.N_c:
        raise ValueError("hole plans have no cut nodes")
    return els_build(A_kk_solver, op_old, op_new, plan, update, eps, **kw)


def els_solve(solver, g_new):
    return solver.solve(g_new)


def els_apply_forward(solver, v_ext):
    return solver.apply_ext(v_ext)


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class ConditioningReport:
    kappa_W: float
    kappa_L: float
    kappa_R: float
    kappa_ext: float
    kappa_tilde: float
    k: int

    @property
    def bound(self):
        return min(self.kappa_L ** 2, self.kappa_R ** 2) * self.kappa_ext * self.kappa_tilde

    @property
    def satisfied(self):
        return self.kappa_W <= self.bound

    def as_dict(self):
        return {"kappa_W": self.kappa_W, "kappa_L": self.kappa_L, "kappa_R": self.kappa_R,
                "kappa_ext": self.kappa_ext, "kappa_tilde": self.kappa_tilde, "bound": self.bound, "k": self.k}


def _factor_cond(M):
    if M.size == 0:
        return 1.0
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[0] / s[-1])


def _op_cond(n, matvec, rmatvec, solve, rsolve, dense=None):
    """Condition number from the largest singular values of ``M`` and ``M^-1``."""
    if dense is not None:
        return _factor_cond(dense)
    A = LinearOperator((n, n), matvec=matvec, rmatvec=rmatvec, dtype=float)
    Ai = LinearOperator((n, n), matvec=solve, rmatvec=rsolve, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(n)
    smax = svds(A, k=1, return_singular_vectors=False, tol=1e-6, v0=v0)[0]
    imax = svds(Ai, k=1, return_singular_vectors=False, tol=1e-6, v0=v0)[0]
    return float(smax * imax)


def conditioning_report(solver, dense_oracles_allowed=None, dense_limit=3000):
    """Condition numbers entering the Woodbury bound.

    With dense oracles the extended and block-diagonal matrices are formed
    from the solver's own fast applies; otherwise the extreme singular values
    are estimated with Lanczos on the applies and the Woodbury/HBS solves.
    """
    n = solver.n_ext
    if dense_oracles_allowed is None:
        dense_oracles_allowed = n <= dense_limit
    if solver.k == 0:
        kW, kL, kR = 1.0, 1.0, 1.0
    else:
        kW = float(np.linalg.cond(solver.W))
        kL = _factor_cond(solver.update.L)
        kR = _factor_cond(solver.update.R)
    if dense_oracles_allowed:
        I = np.eye(n)
        At = solver.tilde_apply(I)
        Aext = At + solver.update.L @ solver.update.R
        k_ext, k_t = _factor_cond(Aext), _factor_cond(At)
    else:
        k_ext = _op_cond(n, solver.apply_ext, lambda v: solver.apply_ext(v, True),
                         solver.solve_ext, lambda v: solver.solve_ext(v, True))
        k_t = _op_cond(n, solver.tilde_apply, lambda v: solver.tilde_apply(v, True),
                       solver.tilde_solve, lambda v: solver.tilde_solve(v, True))
    return ConditioningReport(kW, kL, kR, k_ext, k_t, solver.k)
