"""Vectorised NumPy implementation of the particle assembly kernel."""
import numpy as np

from ..constitutive import hencky_stress, kirchhoff_tangent

NAME = "numpy"

_OFFSETS = {}


def stencil_offsets(width):
    """(M, M) table of stencil slots for slot pairs of a width-W window."""
    if width not in _OFFSETS:
        D = 2 * width - 1
        a = np.arange(width * width) % width
        b = np.arange(width * width) // width
        _OFFSETS[width] = ((a[None, :] - a[:, None] + width - 1)
                           + (b[None, :] - b[:, None] + width - 1) * D)
    return _OFFSETS[width]


def _inv_det(A):
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    inv = np.empty_like(A)
    inv[:, 0, 0] = A[:, 1, 1]
    inv[:, 1, 1] = A[:, 0, 0]
    inv[:, 0, 1] = -A[:, 0, 1]
    inv[:, 1, 0] = -A[:, 1, 0]
    return inv / det[:, None, None], det


def piola_tangent(A, Fn, V0, lam, mu):
    """``P = V0 tau(A Fn) A^-T`` and ``C[p, i, j, k, l] = dP_ij / dA_kl``."""
    F = A @ Fn
    tau, T, _ = kirchhoff_tangent(F, lam, mu)
    P, C = piola_from_kirchhoff(A, Fn, V0, tau, T)
    return P, C, F, tau


def piola_from_kirchhoff(A, Fn, V0, tau, T):
    """Piola force and its ``A`` derivative given ``tau`` and ``d tau / d F``."""
    Ainv, _ = _inv_det(A)
    AinvT = Ainv.transpose(0, 2, 1)
    tA = tau @ AinvT
    # d tau / d A_kl = sum_n T_ijkn Fn_ln
    Tk = T @ Fn.transpose(0, 2, 1)[:, None, None]
    C = np.moveaxis(np.moveaxis(Tk, 2, -1) @ AinvT[:, None, None], -1, 2)
    C -= tA[:, :, None, None, :] * Ainv[:, None, :, :, None]
    C *= V0[:, None, None, None, None]
    return V0[:, None, None] * tA, C


def assemble(u_nodes, nodes, G, Fn, V0, lam, mu, width, nx1, n_nodes, with_tangent):
    """Internal nodal forces and (optionally) the stencil-packed tangent.

    Returns ``(fint, Kst, F, tau, bad)``. ``Kst[n, s, i, k]`` couples dof
    ``(n, i)`` with dof ``(n + offset(s), k)``. ``bad`` is the index of the
    first particle with a non-positive Jacobian, or -1.
    """
    P, M = nodes.shape
    valid = nodes >= 0
    idx = np.where(valid, nodes, 0)
    us = u_nodes[idx]
    us[~valid] = 0.0
    A = np.einsum("pmi,pmj->pij", us, G)
    A[:, 0, 0] += 1.0
    A[:, 1, 1] += 1.0
    detA = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    if np.any(~(detA > 0)):
        return None, None, None, None, int(np.flatnonzero(~(detA > 0))[0])
    F = A @ Fn
    detF = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(~(detF > 0)):
        return None, None, None, None, int(np.flatnonzero(~(detF > 0))[0])
    Kst = None
    if with_tangent:
        Pst, C, F, tau = piola_tangent(A, Fn, V0, lam, mu)
    else:
        tau = hencky_stress(F, lam, mu).tau
        Ainv, _ = _inv_det(A)
        Pst = V0[:, None, None] * (tau @ Ainv.transpose(0, 2, 1))
    fs = np.einsum("pij,pmj->pmi", Pst, G)
    fv = fs[valid]
    vi = nodes[valid]
    fint = np.stack([np.bincount(vi, weights=fv[:, 0], minlength=n_nodes),
                     np.bincount(vi, weights=fv[:, 1], minlength=n_nodes)], axis=1)
    if with_tangent:
        D2 = (2 * width - 1) ** 2
        H = np.einsum("pijkl,pnl->pnikj", C, G)          # (P, M, i, k, j)
        Ke = np.einsum("pmj,pnikj->pmnik", G, H)          # (P, M, M, 2, 2)
        off = stencil_offsets(width)
        pair = valid[:, :, None] & valid[:, None, :]
        flat = (nodes[:, :, None] * D2 + off[None])[pair]
        Kv = Ke[pair].reshape(-1, 4)
        Kst = np.empty((n_nodes * D2, 4))
        for c in range(4):
            Kst[:, c] = np.bincount(flat, weights=Kv[:, c], minlength=n_nodes * D2)
        Kst = Kst.reshape(n_nodes, D2, 2, 2)
    return fint, Kst, F, tau, -1
