"""GMRES with optional left preconditioning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GmresConfig:
    tol: float = 1e-11
    maxiter: int = 600
    restart: int | None = None
    stagnation: int = 50

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.maxiter < 1:
            raise ValueError("maxiter must be >= 1")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart must be >= 1")


@dataclass
class GmresResult:
    x: np.ndarray
    n_iter: int
    history: list = field(default_factory=list)
    converged: bool = True


class GmresNonConvergence(RuntimeError):
    """Raised on stagnation or when the iteration limit is hit; keeps the best iterate."""

    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


def _as_callable(A):
    if A is None:
        return None
    if callable(A) and not hasattr(A, "matvec"):
        return A
    if hasattr(A, "matvec"):
        return A.matvec
    return lambda v: A @ v


def gmres(apply, b, cfg=None, precond=None, x0=None, raise_on_failure=True):
    """Solve ``M A x = M b`` with ``M`` the preconditioner (identity if None).

    Convergence is declared when ``||M(b - A x)|| <= tol * ||M b||``.
    Arnoldi uses modified Gram-Schmidt with one reorthogonalization pass.
    """
    cfg = cfg or GmresConfig()
    A = _as_callable(apply)
    M = _as_callable(precond) or (lambda v: v)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side is not finite")
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    Mb = M(b)
    nb = np.linalg.norm(Mb)
    if nb == 0:
        return GmresResult(np.zeros(n), 0, [0.0])
    history = []
    total = 0
    m_max = cfg.restart or cfg.maxiter
    r = M(b - A(x)) if np.any(x) else Mb.copy()
    beta = np.linalg.norm(r)
    history.append(beta / nb)
    while True:
        if history[-1] <= cfg.tol:
            return GmresResult(x, total, history)
        m = min(m_max, cfg.maxiter - total)
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_done = 0
        for j in range(m):
            # copy: the operators may hand back their input array
            w = np.array(M(A(V[j])), dtype=float)
            for _ in range(2):
                for i in range(j + 1):
                    h = V[i] @ w
                    H[i, j] += h
                    w -= h * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            breakdown = H[j + 1, j] <= 1e-14 * np.linalg.norm(H[: j + 2, j])
            if not breakdown:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            d = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if d == 0 else (H[j, j] / d, H[j + 1, j] / d)
            H[j, j] = d
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j_done = j + 1
            history.append(abs(g[j + 1]) / nb)
            if history[-1] <= cfg.tol or breakdown:
                break
            s = cfg.stagnation
            if len(history) > s and history[-1] >= history[-1 - s] * (1 - 1e-8):
                break
        y = np.linalg.solve(np.triu(H[:j_done, :j_done]), g[:j_done]) if j_done else np.zeros(0)
        x = x + V[:j_done].T @ y
        if history[-1] <= cfg.tol:
            return GmresResult(x, total, history)
        s = cfg.stagnation
        stalled = len(history) > s and history[-1] >= history[-1 - s] * (1 - 1e-8)
        if stalled or total >= cfg.maxiter or (j_done and abs(H[j_done - 1, j_done - 1]) == 0):
            why = "stagnated" if stalled else "reached the iteration limit"
            res = GmresResult(x, total, history, converged=False)
            if raise_on_failure:
                raise GmresNonConvergence(f"GMRES {why} after {total} iterations "
                                          f"(relative residual {history[-1]:.3e})", res)
            return res
        r = M(b - A(x))
        beta = np.linalg.norm(r)
        history.append(beta / nb)
