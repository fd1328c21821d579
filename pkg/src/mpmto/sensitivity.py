"""Reverse-mode design sensitivities through the load-step sequence.

Each load step is a map ``s_k = Phi(s_{k-1}, u_k)`` on the particle state
``s = (x, F, l)`` with the increment ``u_k`` defined implicitly by
``R(u_k; s_{k-1}, theta) = 0``. The sweep runs backwards over the steps;
at every step one transposed tangent solve ``K^T lam = u_bar`` replaces
the derivative of the Newton iterations, and ``lam`` turns the partial
derivatives of ``R`` into cotangents of the step-start state and of the
particle parameters ``theta = (lambda, mu, rho)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constitutive import (kirchhoff_tangent, right_stretch_diagonal_grad,
                           stress_param_derivatives)
from .errors import AdjointError, DeterminismError, LinearSolveError, MPMError
from .solver import (LoadSchedule, MaterialParams, MPMModel, StepContext,
                     factorize, run_forward, update_particles)

log = logging.getLogger(__name__)

REPLAY_TOL = 1e-10


@dataclass
class SolveCounters:
    forward_steps: int = 0
    replay_steps: int = 0
    adjoint_solves: int = 0


@dataclass
class CheckpointStore:
    """End-of-step particle states and increments at selected steps."""

    stride: int
    n_steps: int
    snapshots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @staticmethod
    def default_stride(n_steps):
        return max(1, math.ceil(math.sqrt(n_steps)))

    def wants(self, k):
        return k == 0 or k % self.stride == 0 or k == self.n_steps

    def nearest_before(self, k):
        return max(j for j in self.snapshots if j < k)

    def memory_report(self):
        n = len(self.snapshots)
        nbytes = sum(st.x.nbytes + st.F.nbytes + st.l.nbytes
                     + (0 if u is None else u.nbytes)
                     for st, u in self.snapshots.values())
        return {"snapshots": n, "bytes": nbytes,
                "bound": math.ceil(self.n_steps / self.stride) + 1}


def checkpoint_forward(model: MPMModel, params: MaterialParams, schedule: LoadSchedule,
                       f_ext=None, stride=None, counters: SolveCounters = None):
    """Forward solve keeping only the checkpointed states and increments."""
    stride = stride or CheckpointStore.default_stride(schedule.n_steps)
    store = CheckpointStore(stride, schedule.n_steps)
    rec = run_forward(model, params, schedule, f_ext=f_ext, keep=store.wants)
    store.snapshots[0] = (rec.initial, None)
    for res in rec.steps:
        if store.wants(res.k):
            store.snapshots[res.k] = (res.state, res.u_nodes)
        else:
            res.u_nodes = None
    if counters is not None:
        counters.forward_steps += schedule.n_steps
    return rec, store


def _replay(model, params, schedule, f_ext, store, k0, k1, counters):
    """States and increments of steps ``k0+1..k1`` replayed from checkpoint ``k0``."""
    states, incs = {k0: store.snapshots[k0][0]}, {}
    if k1 > k0:
        rec = run_forward(model, params, schedule, f_ext=f_ext,
                          start=store.snapshots[k0][0], first_step=k0 + 1, last_step=k1)
        for res in rec.steps:
            states[res.k] = res.state
            incs[res.k] = res.u_nodes
        if counters is not None:
            counters.replay_steps += k1 - k0
    return states, incs


# batched contractions written as matmuls; einsum is several times slower
# for these shapes

def _tmat(a, b):
    """``sum_m a[p,m,i] b[p,m,j]``."""
    return a.transpose(0, 2, 1) @ b


def _mvec(a, v):
    """``sum_i a[p,m,i] v[p,i]``."""
    return (a @ v[:, :, None])[..., 0]


def _vmat(a, b):
    """Contract all but the last axis of ``b`` with ``a`` per particle."""
    P = a.shape[0]
    return (a.reshape(P, 1, -1) @ b.reshape(P, a[0].size, -1))[:, 0]


def _contract4(X, T):
    """``sum_ij X[p,i,j] T[p,i,j,k,l]``."""
    P = X.shape[0]
    return (X.reshape(P, 1, 4) @ T.reshape(P, 4, 4)).reshape(P, 2, 2)


def step_adjoint(ctx: StepContext, u_nodes, x_bar, F_bar, l_bar, l0,
                 counters: SolveCounters = None):
    """Pull end-of-step cotangents back through one load step.

    Returns cotangents of the step-start ``(x, F, l)`` and of the particle
    parameters ``(lambda, mu, rho)``.
    """
    conn, st, par = ctx.conn, ctx.state, ctx.params
    V0 = ctx.V0
    S, G = conn.S, conn.G
    us = conn.gather(u_nodes)
    A = _tmat(us, G)
    A[:, 0, 0] += 1.0
    A[:, 1, 1] += 1.0
    Fn = st.F
    F = A @ Fn

    # particle update: F = A Fn, x += sum S u, l = l0 diag(U(F))
    F_tot = F_bar + np.einsum("pa,pakl->pkl", l_bar * l0, right_stretch_diagonal_grad(F))
    A_bar = F_tot @ Fn.transpose(0, 2, 1)
    Fn_bar = A.transpose(0, 2, 1) @ F_tot
    u_slot = G @ A_bar.transpose(0, 2, 1) + S[:, :, None] * x_bar[:, None, :]
    g_bar = us @ A_bar
    S_bar = _mvec(us, x_bar)

    # implicit increment: K^T lam = u_bar on the free dofs
    u_bar = ctx.reduce(ctx.conn.scatter(u_slot, ctx.n_nodes))
    u_free = ctx.restrict(u_nodes)
    _, K = ctx.residual_and_tangent(u_free)
    try:
        lam_free = factorize(K).solve(u_bar, trans="T")
    except LinearSolveError as exc:
        raise AdjointError(str(exc)) from exc
    if counters is not None:
        counters.adjoint_solves += 1
    if not np.all(np.isfinite(lam_free)):
        raise AdjointError("non-finite adjoint solution")
    lam_nodes = ctx.expand(lam_free)
    ls = conn.gather(lam_nodes.reshape(-1, 2))

    # L = lam . R = sum_p P_p : Lam_p - scale sum_pm S_pm lam_m . f_p
    Lam = _tmat(ls, G)
    tau, T, eps = kirchhoff_tangent(F, par.lam, par.mu)
    P, C = kernels.piola_from_kirchhoff(A, Fn, V0, tau, T)
    Ainv = np.linalg.inv(A)
    W = Lam @ Ainv
    M = _contract4(Lam, C)
    g_bar -= ls @ P + us @ M
    lam_dot_f = _mvec(ls, ctx.f_particle)
    S_bar += ctx.scale * lam_dot_f
    Fn_bar -= A.transpose(0, 2, 1) @ (V0[:, None, None] * _contract4(W, T))
    dlam, dmu = stress_param_derivatives(eps, par.lam, par.mu)
    lam_bar = -V0 * np.sum(dlam * W, axis=(1, 2))
    mu_bar = -V0 * np.sum(dmu * W, axis=(1, 2))
    body = ctx.model.points.body_force
    rho_bar = ctx.scale * V0 * np.sum(S * _mvec(ls, body), axis=1)

    # basis weights and gradients depend on the step-start x and l
    x_prev = x_bar + _vmat(S_bar, G) + _vmat(g_bar, conn.dG_dx)
    l_prev = _vmat(S_bar, conn.dS_dl) + _vmat(g_bar, conn.dG_dl)
    return x_prev, Fn_bar, l_prev, lam_bar, mu_bar, rho_bar


@dataclass
class ParamCotangent:
    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray

    def __iadd__(self, other):
        self.lam = self.lam + other.lam
        self.mu = self.mu + other.mu
        self.rho = self.rho + other.rho
        return self


def adjoint_sweep(model: MPMModel, params: MaterialParams, schedule: LoadSchedule,
                  store: CheckpointStore, seed_x, f_ext=None, counters=None,
                  verify=True) -> ParamCotangent:
    """Cotangent of ``theta`` for the objective seeded by ``seed_x`` on the final positions."""
    if f_ext is None:
        f_ext = model.points.f_ext
    n = len(model.points)
    x_bar = np.asarray(seed_x, dtype=float).copy()
    F_bar = np.zeros((n, 2, 2))
    l_bar = np.zeros((n, 2))
    out = ParamCotangent(np.zeros(n), np.zeros(n), np.zeros(n))
    l0 = model.points.l0
    top = schedule.n_steps
    while top >= 1:
        # segment (c, top]: replay c+1..top-1 once, then sweep top..c+1
        c = store.nearest_before(top)
        states, incs = _replay(model, params, schedule, f_ext, store, c, top - 1, counters)
        for j in range(top, c, -1):
            ctx = StepContext(model, states[j - 1], params, f_ext, schedule.scale(j),
                              schedule.scale(j - 1), second_order=True)
            if j == top:
                u_nodes = store.snapshots[top][1]
                if verify:
                    _check_replay(ctx, u_nodes, store.snapshots[top][0], l0, j)
            else:
                u_nodes = incs[j]
            try:
                x_bar, F_bar, l_bar, lb, mb, rb = step_adjoint(
                    ctx, u_nodes, x_bar, F_bar, l_bar, l0, counters)
            except AdjointError as exc:
                raise AdjointError(f"step {j}: {exc}") from exc
            out += ParamCotangent(lb, mb, rb)
        top = c
    return out


def _check_replay(ctx, u_nodes, stored, l0, k):
    new = update_particles(ctx.state, ctx.conn, u_nodes, l0)
    err = max(np.max(np.abs(new.x - stored.x)), np.max(np.abs(new.F - stored.F)))
    scale = max(1.0, float(np.max(np.abs(stored.x))))
    if err > REPLAY_TOL * scale:
        raise DeterminismError(f"checkpoint replay of step {k} deviates by {err:.3e}")


@dataclass
class GradientReport:
    J: float
    dJ: np.ndarray
    g: dict
    dg: dict
    counters: SolveCounters
    fd: list = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.dJ)):
            raise AdjointError("non-finite objective gradient")

    def verification_text(self):
        lines = ["component,adjoint,fd,rel_error"]
        for comp, adj, fd, rel in self.fd or ():
            lines.append(f"{comp},{adj:.12e},{fd:.12e},{rel:.3e}")
        return "\n".join(lines) + "\n"


def finite_difference_oracle(fun, theta, components, h_fd=1e-6):
    """Central differences of ``fun`` with step ``h_fd (1 + |theta_i|)``.

    Entries whose perturbed solve fails are reported as ``nan``.
    """
    theta = np.asarray(theta, dtype=float)
    out = np.full(len(components), np.nan)
    for n, i in enumerate(components):
        h = h_fd * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        try:
            out[n] = (fun(tp) - fun(tm)) / (2.0 * h)
        except MPMError as exc:
            log.warning("finite difference for component %d failed: %s", i, exc)
    return out
