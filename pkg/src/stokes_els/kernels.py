"""Pointwise 2D Stokes kernels.

Array conventions: points are ``(..., 2)`` arrays; kernel functions broadcast
over the leading axes and return ``(..., 2, 2)`` tensors (or ``(..., 2)`` for
pressure kernels).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("single_layer", "double_layer", "combined_field", "pressure_from_single",
         "pressure_from_double", "nullspace_correction")


class SingularEvaluationError(ValueError):
    """Kernel evaluated with coincident target and source."""


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "double_layer"
    mu: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.mu > 0:
            raise ValueError("viscosity must be positive")


def _separation(x, y):
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = np.einsum("...i,...i->...", r, r)
    if np.any(r2 == 0):
        raise SingularEvaluationError("target coincides with source")
    return r, r2


def stokeslet(x, y, mu=1.0):
    """Stokeslet ``(1/4 pi mu)(delta log(1/r) + r r^T / r^2)``."""
    r, r2 = _separation(x, y)
    rr = r[..., :, None] * r[..., None, :] / r2[..., None, None]
    return (rr - 0.5 * np.log(r2)[..., None, None] * np.eye(2)) / (4 * np.pi * mu)


def double_layer(x, y, n_y):
    """Double layer ``(1/pi)(r r^T / r^2)(r . n_y / r^2)``."""
    r, r2 = _separation(x, y)
    rn = np.einsum("...i,...i->...", r, np.asarray(n_y, dtype=float))
    return r[..., :, None] * r[..., None, :] * (rn / (np.pi * r2 * r2))[..., None, None]


def pressure_kernel(x, y, n_y=None, mu=1.0, source="single"):
    """Pressure kernel matching the single (``Q``) or double (``P``) layer."""
    r, r2 = _separation(x, y)
    if source == "single":
        return r / (2 * np.pi * r2[..., None])
    if source != "double":
        raise ValueError("source must be 'single' or 'double'")
    n = np.asarray(n_y, dtype=float)
    rn = np.einsum("...i,...i->...", r, n)
    return (mu / np.pi) * (-n / r2[..., None] + 2 * r * (rn / (r2 * r2))[..., None])


def stokeslet_velocity(x, y0, f, mu=1.0):
    """Velocity at ``x`` (``(n, 2)``) induced by point forces ``f`` at ``y0``."""
    return np.einsum("...ij,...j->...i", stokeslet(x, y0, mu), f)


def stokeslet_pressure(x, y0, f):
    return np.einsum("...j,...j->...", pressure_kernel(x, y0, source="single"), f)


def interleave(K):
    """``(nt, ns, 2, 2)`` block tensor -> ``(2 nt, 2 ns)`` matrix."""
    nt, ns = K.shape[:2]
    return K.transpose(0, 2, 1, 3).reshape(2 * nt, 2 * ns)


def layer_blocks(tx, sx, sn, sw, mu=1.0, single=None, double=None):
    """Weighted kernel matrix from sources ``sx`` to targets ``tx``.

    ``single``/``double`` are boolean masks over sources choosing which
    layers each source carries (default: double layer everywhere). Coincident
    pairs are set to zero; callers patch them. Returns ``(2 nt, 2 ns)``.
    """
    tx = np.asarray(tx, dtype=float).reshape(-1, 2)
    sx = np.asarray(sx, dtype=float).reshape(-1, 2)
    nt, ns = len(tx), len(sx)
    if nt == 0 or ns == 0:
        return np.zeros((2 * nt, 2 * ns))
    if double is None:
        double = np.ones(ns, dtype=bool)
    if single is None:
        single = np.zeros(ns, dtype=bool)
    r = tx[:, None, :] - sx[None, :, :]
    r2 = r[..., 0] ** 2 + r[..., 1] ** 2
    zero = r2 == 0
    r2 = np.where(zero, 1.0, r2)
    inv = 1.0 / r2
    r0, r1 = r[..., 0], r[..., 1]
    a00, a01, a11 = r0 * r0 * inv, r0 * r1 * inv, r1 * r1 * inv
    coef = np.zeros_like(r2)
    diag = np.zeros_like(r2)
    if np.any(double):
        rn = r0 * sn[None, :, 0] + r1 * sn[None, :, 1]
        coef += np.where(double[None, :], rn * inv / np.pi, 0.0)
    if np.any(single):
        s = np.where(single[None, :], 1.0 / (4 * np.pi * mu), 0.0)
        coef += s
        diag -= 0.5 * np.log(r2) * s
    w = np.asarray(sw, dtype=float)[None, :]
    coef = np.where(zero, 0.0, coef * w)
    diag = np.where(zero, 0.0, diag * w)
    out = np.empty((nt, 2, ns, 2))
    out[:, 0, :, 0] = a00 * coef + diag
    out[:, 0, :, 1] = a01 * coef
    out[:, 1, :, 0] = a01 * coef
    out[:, 1, :, 1] = a11 * coef + diag
    return out.reshape(2 * nt, 2 * ns)


def pressure_blocks(tx, sx, sn, sw, mu=1.0, single=None, double=None):
    """Weighted pressure matrix ``(nt, 2 ns)`` matching ``layer_blocks``."""
    tx = np.asarray(tx, dtype=float).reshape(-1, 2)
    sx = np.asarray(sx, dtype=float).reshape(-1, 2)
    ns = len(sx)
    if double is None:
        double = np.ones(ns, dtype=bool)
    if single is None:
        single = np.zeros(ns, dtype=bool)
    r = tx[:, None, :] - sx[None, :, :]
    r2 = np.einsum("tsi,tsi->ts", r, r)
    out = np.zeros(r.shape)
    if np.any(single):
        out += np.where(single[None, :, None], r / (2 * np.pi * r2[..., None]), 0.0)
    if np.any(double):
        rn = np.einsum("tsi,si->ts", r, sn)
        P = (mu / np.pi) * (-sn[None, :, :] / r2[..., None] + 2 * r * (rn / r2 ** 2)[..., None])
        out += np.where(double[None, :, None], P, 0.0)
    out *= np.asarray(sw, dtype=float)[None, :, None]
    return out.reshape(len(tx), 2 * ns)


def nullspace_term(disc, tau, mask=None):
    """Discrete ``n_x * sum_j w_j tau_j . n_j`` at every node.

    ``mask`` restricts both the integral and the output to a subset of nodes
    (the wall curves); defaults to all nodes.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (2 * disc.N,):
        raise ValueError(f"density must have {2 * disc.N} entries, got {tau.shape}")
    t = tau.reshape(-1, 2)
    if mask is None:
        mask = np.ones(disc.N, dtype=bool)
    flux = np.sum(disc.weights[mask] * np.einsum("ij,ij->i", t[mask], disc.normals[mask]))
    out = np.zeros((disc.N, 2))
    out[mask] = flux * disc.normals[mask]
    return out.ravel()
