# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled particle assembly kernel.

Same contract as ``_numpy_backend.assemble``: one pass over the particles
computes the trial deformation gradient, the plane-stress Hencky stress,
the effective Piola stress ``V0 tau A^-T`` and its tangent, and scatters
nodal forces and stencil-packed stiffness blocks in particle order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, log1p, atan2, cos, sin, fabs, hypot

cnp.import_array()

NAME = "cython"

cdef double LOEWNER_EPS = 1e-12


cdef inline void _stress(double[2][2] F, double lam, double mu,
                         double[2][2] tau, double[2][2] Q, double[2] ev,
                         double[2][2] L, double* lam_ps) noexcept nogil:
    cdef double a, b, c, m, d, r, l1, l2, det, th, cs, sn, g1, g2, tr, dd
    a = F[0][0] * F[0][0] + F[0][1] * F[0][1]
    b = F[0][0] * F[1][0] + F[0][1] * F[1][1]
    c = F[1][0] * F[1][0] + F[1][1] * F[1][1]
    m = 0.5 * (a + c)
    d = 0.5 * (a - c)
    r = hypot(d, b)
    l1 = m + r
    det = a * c - b * b
    l2 = det / l1
    th = 0.5 * atan2(b, d)
    cs = cos(th)
    sn = sin(th)
    Q[0][0] = cs
    Q[1][0] = sn
    Q[0][1] = -sn
    Q[1][1] = cs
    ev[0] = l1
    ev[1] = l2
    g1 = 0.5 * log(l1)
    g2 = 0.5 * log(l2)
    lam_ps[0] = 2.0 * lam * mu / (lam + 2.0 * mu)
    tr = g1 + g2
    # tau = 2 mu eps + lam_ps tr(eps) I, eps = Q diag(g) Q^T
    tau[0][0] = 2.0 * mu * (cs * cs * g1 + sn * sn * g2) + lam_ps[0] * tr
    tau[1][1] = 2.0 * mu * (sn * sn * g1 + cs * cs * g2) + lam_ps[0] * tr
    tau[0][1] = 2.0 * mu * cs * sn * (g1 - g2)
    tau[1][0] = tau[0][1]
    L[0][0] = 1.0 / l1
    L[1][1] = 1.0 / l2
    dd = l1 - l2
    if fabs(dd) < LOEWNER_EPS:
        L[0][1] = 1.0 / l1
    else:
        L[0][1] = log1p(dd / l2) / dd
    L[1][0] = L[0][1]


def assemble(double[:, ::1] u_nodes, long[:, ::1] nodes, double[:, :, ::1] G,
             double[:, :, ::1] Fn, double[::1] V0, double[::1] lam, double[::1] mu,
             int width, long nx1, long n_nodes, bint with_tangent):
    cdef Py_ssize_t P = nodes.shape[0]
    cdef Py_ssize_t M = nodes.shape[1]
    cdef int D = 2 * width - 1
    cdef int D2 = D * D
    cdef Py_ssize_t p, m, n, i, j, k, l, r, s, q
    cdef long nd, nd2
    cdef int a1, b1, a2, b2, off
    cdef double[2][2] A, F, Ainv, AinvT, tau, tA, Pst, Q, L, dB, Mt, deps, dtau, dF
    cdef double[2] ev
    cdef double lam_ps, detA, detF, v0, tr, acc
    cdef double C[2][2][2][2]
    cdef double H[64][2][2][2]
    cdef Py_ssize_t bad = -1

    fint_arr = np.zeros((n_nodes, 2))
    F_arr = np.empty((P, 2, 2))
    tau_arr = np.empty((P, 2, 2))
    cdef double[:, ::1] fint = fint_arr
    cdef double[:, :, ::1] Fo = F_arr
    cdef double[:, :, ::1] to = tau_arr
    cdef double[:, :, :, ::1] K
    if with_tangent:
        K_arr = np.zeros((n_nodes, D2, 2, 2))
        K = K_arr
    else:
        K_arr = None
    if M > 64:
        raise ValueError("particle window wider than 8x8 nodes")

    with nogil:
        for p in range(P):
            A[0][0] = 1.0
            A[0][1] = 0.0
            A[1][0] = 0.0
            A[1][1] = 1.0
            for m in range(M):
                nd = nodes[p, m]
                if nd < 0:
                    continue
                for i in range(2):
                    for j in range(2):
                        A[i][j] += u_nodes[nd, i] * G[p, m, j]
            detA = A[0][0] * A[1][1] - A[0][1] * A[1][0]
            if not detA > 0:
                bad = p
                break
            for i in range(2):
                for j in range(2):
                    F[i][j] = A[i][0] * Fn[p, 0, j] + A[i][1] * Fn[p, 1, j]
            detF = F[0][0] * F[1][1] - F[0][1] * F[1][0]
            if not detF > 0:
                bad = p
                break
            _stress(F, lam[p], mu[p], tau, Q, ev, L, &lam_ps)
            Ainv[0][0] = A[1][1] / detA
            Ainv[1][1] = A[0][0] / detA
            Ainv[0][1] = -A[0][1] / detA
            Ainv[1][0] = -A[1][0] / detA
            v0 = V0[p]
            for i in range(2):
                for j in range(2):
                    AinvT[i][j] = Ainv[j][i]
                    Fo[p, i, j] = F[i][j]
                    to[p, i, j] = tau[i][j]
            for i in range(2):
                for j in range(2):
                    tA[i][j] = tau[i][0] * AinvT[0][j] + tau[i][1] * AinvT[1][j]
                    Pst[i][j] = v0 * tA[i][j]
            for m in range(M):
                nd = nodes[p, m]
                if nd < 0:
                    continue
                fint[nd, 0] += Pst[0][0] * G[p, m, 0] + Pst[0][1] * G[p, m, 1]
                fint[nd, 1] += Pst[1][0] * G[p, m, 0] + Pst[1][1] * G[p, m, 1]
            if not with_tangent:
                continue
            for k in range(2):
                for l in range(2):
                    # dF = e_k (x) e_l . Fn
                    for i in range(2):
                        for j in range(2):
                            dF[i][j] = Fn[p, l, j] if i == k else 0.0
                    for i in range(2):
                        for j in range(2):
                            dB[i][j] = (dF[i][0] * F[j][0] + dF[i][1] * F[j][1]
                                        + F[i][0] * dF[j][0] + F[i][1] * dF[j][1])
                    for i in range(2):
                        for j in range(2):
                            acc = 0.0
                            for r in range(2):
                                for s in range(2):
                                    acc += Q[r][i] * dB[r][s] * Q[s][j]
                            Mt[i][j] = L[i][j] * acc
                    for i in range(2):
                        for j in range(2):
                            acc = 0.0
                            for r in range(2):
                                for s in range(2):
                                    acc += Q[i][r] * Mt[r][s] * Q[j][s]
                            deps[i][j] = 0.5 * acc
                    tr = deps[0][0] + deps[1][1]
                    for i in range(2):
                        for j in range(2):
                            dtau[i][j] = 2.0 * mu[p] * deps[i][j]
                        dtau[i][i] += lam_ps * tr
                    for i in range(2):
                        for j in range(2):
                            C[i][j][k][l] = v0 * (dtau[i][0] * AinvT[0][j]
                                                  + dtau[i][1] * AinvT[1][j]
                                                  - tA[i][l] * AinvT[k][j])
            # H[n, i, k, j] = sum_l C_ijkl G_nl
            for n in range(M):
                if nodes[p, n] < 0:
                    continue
                for i in range(2):
                    for k in range(2):
                        for j in range(2):
                            H[n][i][k][j] = C[i][j][k][0] * G[p, n, 0] + C[i][j][k][1] * G[p, n, 1]
            for m in range(M):
                nd = nodes[p, m]
                if nd < 0:
                    continue
                a1 = m % width
                b1 = m // width
                for n in range(M):
                    if nodes[p, n] < 0:
                        continue
                    a2 = n % width
                    b2 = n // width
                    off = (a2 - a1 + width - 1) + (b2 - b1 + width - 1) * D
                    for i in range(2):
                        for k in range(2):
                            K[nd, off, i, k] += G[p, m, 0] * H[n][i][k][0] + G[p, m, 1] * H[n][i][k][1]
    if bad >= 0:
        return None, None, None, None, int(bad)
    return fint_arr, K_arr, F_arr, tau_arr, -1
