"""Hencky hyperelasticity under plane stress.

All functions broadcast over leading axes: a stack of ``n`` tensors is an
array of shape ``(n, 2, 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvertedStateError

LOEWNER_EPS = 1e-12


@dataclass
class LameParams:
    lam: float
    mu: float

    def __post_init__(self):
        if not np.all(np.asarray(self.mu) > 0):
            raise ValueError("mu must be positive")
        if not np.all(np.asarray(self.lam) >= 0):
            raise ValueError("lambda must be non-negative")

    @classmethod
    def from_young(cls, E, nu):
        return cls(lam=E * nu / ((1 + nu) * (1 - 2 * nu)), mu=E / (2 * (1 + nu)))


@dataclass
class StressState:
    tau: np.ndarray
    sigma: np.ndarray
    J: np.ndarray
    hencky: np.ndarray
    eps_zz: np.ndarray


def plane_stress_lambda(lam, mu):
    """Effective in-plane Lame constant after eliminating eps_zz."""
    return 2.0 * lam * mu / (lam + 2.0 * mu)


def _first_bad(mask):
    flat = np.flatnonzero(np.asarray(mask).reshape(-1))
    return int(flat[0]) if flat.size else None


def sym_eig_2x2(B):
    """Closed-form eigenpairs of symmetric positive definite 2x2 tensors.

    Eigenvalues come out in descending order and the first eigenvector is
    oriented so that ``Q[..., 0, 0] >= 0``; repeated eigenvalues give Q = I.
    """
    B = np.asarray(B, dtype=float)
    a, c = B[..., 0, 0], B[..., 1, 1]
    b = 0.5 * (B[..., 0, 1] + B[..., 1, 0])
    m = 0.5 * (a + c)
    d = 0.5 * (a - c)
    r = np.hypot(d, b)
    l1 = m + r
    det = a * c - b * b
    bad = ~(l1 > 0) | ~(det > 0)
    if np.any(bad):
        i = _first_bad(bad)
        raise InvertedStateError(i, float(np.reshape(det, -1)[i]))
    l2 = det / l1
    theta = 0.5 * np.arctan2(b, d)
    cs, sn = np.cos(theta), np.sin(theta)
    Q = np.empty(B.shape)
    Q[..., 0, 0] = cs
    Q[..., 1, 0] = sn
    Q[..., 0, 1] = -sn
    Q[..., 1, 1] = cs
    return np.stack([l1, l2], axis=-1), Q


def _from_eigen(Q, vals):
    return (Q * vals[..., None, :]) @ np.swapaxes(Q, -1, -2)


def _congruence(Q, X):
    """``Q^T X Q`` applied to each trailing pair ``(k, l)`` of ``X[..., a, b, k, l]``."""
    Xm = np.moveaxis(X, (-2, -1), (-4, -3))          # (..., k, l, a, b)
    Qb = Q[..., None, None, :, :]
    out = np.swapaxes(Qb, -1, -2) @ Xm @ Qb
    return np.moveaxis(out, (-4, -3), (-2, -1))


def matrix_log_spd(B):
    lam, Q = sym_eig_2x2(B)
    return _from_eigen(Q, np.log(lam))


def loewner_log(lam):
    """Divided differences of ``log`` over eigenvalue pairs, shape (..., 2, 2)."""
    l1, l2 = lam[..., 0], lam[..., 1]
    d = l1 - l2
    close = np.abs(d) < LOEWNER_EPS
    safe_d = np.where(close, 1.0, d)
    off = np.where(close, 1.0 / l1, np.log1p(d / l2) / safe_d)
    L = np.empty(lam.shape[:-1] + (2, 2))
    L[..., 0, 0] = 1.0 / l1
    L[..., 1, 1] = 1.0 / l2
    L[..., 0, 1] = off
    L[..., 1, 0] = off
    return L


def frechet_log(B, E):
    """Directional derivative of ``log(B)`` along the symmetric direction ``E``."""
    lam, Q = sym_eig_2x2(B)
    L = loewner_log(lam)
    M = np.einsum("...ki,...kl,...lj->...ij", Q, E, Q)
    return np.einsum("...ik,...kl,...jl->...ij", Q, L * M, Q)


def hencky_stress(F, lam, mu) -> StressState:
    F = np.asarray(F, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(~(J > 0)):
        i = _first_bad(~(J > 0))
        raise InvertedStateError(i, float(np.reshape(J, -1)[i]))
    B = np.einsum("...ik,...jk->...ij", F, F)
    ev, Q = sym_eig_2x2(B)
    logs = 0.5 * np.log(ev)
    eps = _from_eigen(Q, logs)
    tr2 = logs[..., 0] + logs[..., 1]
    eps_zz = -lam * tr2 / (lam + 2.0 * mu)
    tau = 2.0 * mu[..., None, None] * eps
    tau[..., 0, 0] += lam * (tr2 + eps_zz)
    tau[..., 1, 1] += lam * (tr2 + eps_zz)
    return StressState(tau=tau, sigma=tau / J[..., None, None], J=J,
                       hencky=eps, eps_zz=eps_zz)


def hencky_energy(F, lam, mu):
    """Stored energy per unit reference volume, ``mu |eps|^2 + lam_ps tr(eps)^2 / 2``."""
    F = np.asarray(F, dtype=float)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(~(J > 0)):
        i = _first_bad(~(J > 0))
        raise InvertedStateError(i, float(np.reshape(J, -1)[i]))
    ev, _ = sym_eig_2x2(np.einsum("...ik,...jk->...ij", F, F))
    logs = 0.5 * np.log(ev)
    tr = logs[..., 0] + logs[..., 1]
    return (mu * (logs[..., 0] ** 2 + logs[..., 1] ** 2)
            + 0.5 * plane_stress_lambda(lam, mu) * tr * tr)


def kirchhoff_tangent(F, lam, mu):
    """Kirchhoff stress and ``T[..., i, j, k, l] = d tau_ij / d F_kl``.

    Also returns the Hencky strain, which the design sensitivities need.
    """
    F = np.asarray(F, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(~(J > 0)):
        i = _first_bad(~(J > 0))
        raise InvertedStateError(i, float(np.reshape(J, -1)[i]))
    B = F @ np.swapaxes(F, -1, -2)
    ev, Q = sym_eig_2x2(B)
    logs = 0.5 * np.log(ev)
    eps = _from_eigen(Q, logs)
    lam_ps = plane_stress_lambda(lam, mu)
    tr = logs[..., 0] + logs[..., 1]
    eye = np.eye(2)
    tau = 2.0 * mu[..., None, None] * eps + (lam_ps * tr)[..., None, None] * eye
    L = loewner_log(ev)
    # dB_ij / dF_kl = d_ik F_jl + F_il d_jk
    dB = np.zeros(F.shape[:-2] + (2, 2, 2, 2))
    for i in range(2):
        dB[..., i, :, i, :] += F
        dB[..., :, i, i, :] += F
    M = _congruence(Q, dB)
    M *= L[..., None, None]
    deps = 0.5 * _congruence(np.swapaxes(Q, -1, -2), M)
    dtr = deps[..., 0, 0, :, :] + deps[..., 1, 1, :, :]
    T = 2.0 * mu[..., None, None, None, None] * deps
    for i in range(2):
        T[..., i, i, :, :] += lam_ps[..., None, None] * dtr
    return tau, T, eps


def stress_param_derivatives(eps, lam, mu):
    """``d tau / d lambda`` and ``d tau / d mu`` at fixed Hencky strain."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tr = eps[..., 0, 0] + eps[..., 1, 1]
    s = (lam + 2.0 * mu) ** 2
    eye = np.eye(2)
    dlam = (4.0 * mu * mu / s * tr)[..., None, None] * eye
    dmu = (2.0 * lam * lam / s * tr)[..., None, None] * eye + 2.0 * eps
    return dlam, dmu


def right_stretch_diagonal(F):
    """Diagonal of ``U`` in the polar split ``F = R U`` (closed form in 2D)."""
    C = np.einsum("...ki,...kj->...ij", F, F)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    s = np.sqrt(C[..., 0, 0] + C[..., 1, 1] + 2.0 * J)
    return np.stack([(C[..., 0, 0] + J) / s, (C[..., 1, 1] + J) / s], axis=-1)


def right_stretch_diagonal_grad(F):
    """``out[..., a, k, l] = d U_aa / d F_kl``."""
    F = np.asarray(F, dtype=float)
    C = np.einsum("...ki,...kj->...ij", F, F)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    s = np.sqrt(C[..., 0, 0] + C[..., 1, 1] + 2.0 * J)
    cof = np.empty(F.shape)
    cof[..., 0, 0] = F[..., 1, 1]
    cof[..., 0, 1] = -F[..., 1, 0]
    cof[..., 1, 0] = -F[..., 0, 1]
    cof[..., 1, 1] = F[..., 0, 0]
    ds = (F + cof) / s[..., None, None]
    out = np.empty(F.shape[:-2] + (2, 2, 2))
    for a in range(2):
        dCaa = np.zeros(F.shape)
        dCaa[..., :, a] = 2.0 * F[..., :, a]
        num = C[..., a, a] + J
        out[..., a, :, :] = ((dCaa + cof) / s[..., None, None]
                             - (num / s ** 2)[..., None, None] * ds)
    return out
