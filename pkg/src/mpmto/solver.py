"""Quasi-static implicit MPM: assembly, Newton-Raphson and particle update.

Each load step freezes the particle-grid connectivity and the basis
gradients at the step-start configuration. The unknown is the nodal
displacement increment ``u`` of the step; the trial deformation gradient of
particle ``p`` is ``F = (I + sum_v u_v (x) dS_v/dX) F_prev`` and the internal
force at node ``v`` is ``V_p sigma_p grad_x S_v = V0_p tau_p A^-T dS_v/dX``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .constitutive import hencky_energy, hencky_stress, right_stretch_diagonal
from .errors import ConvergenceError, InvertedStateError, LinearSolveError, MPMError
from .grid import (BackgroundGrid, Connectivity, MaterialPointSet, build_connectivity,
                   dof_layout, reference_node_weights)

log = logging.getLogger(__name__)


@dataclass
class NewtonSettings:
    tol: float = 1e-7
    max_iter: int = 50
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 2.0 ** -10
    # merit for the backtracking test: "residual" (1/2 |R|^2) or "energy"
    merit: str = "energy"
    # identity shift of an indefinite tangent, relative to its mean diagonal
    shift: bool = True
    shift_min: float = 1e-6

    def __post_init__(self):
        if self.merit not in ("residual", "energy"):
            raise ValueError(f"unknown line-search merit {self.merit!r}")


@dataclass(frozen=True)
class LoadSchedule:
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def scale(self, k):
        return k / self.n_steps


@dataclass
class MaterialParams:
    """Per-particle Lame constants and mass density."""

    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.lam = np.ascontiguousarray(self.lam, dtype=float)
        self.mu = np.ascontiguousarray(self.mu, dtype=float)
        self.rho = np.ascontiguousarray(self.rho, dtype=float)

    @classmethod
    def uniform(cls, n, lam, mu, rho=0.0):
        return cls(np.full(n, lam), np.full(n, mu), np.full(n, rho))


@dataclass
class ParticleState:
    x: np.ndarray
    F: np.ndarray
    l: np.ndarray
    sigma: np.ndarray = None

    def copy(self):
        return ParticleState(self.x.copy(), self.F.copy(), self.l.copy(),
                             None if self.sigma is None else self.sigma.copy())

    @classmethod
    def reference(cls, points: MaterialPointSet):
        n = len(points)
        return cls(points.X0.copy(), np.tile(np.eye(2), (n, 1, 1)),
                   points.l0.copy(), np.zeros((n, 2, 2)))


@dataclass
class MPMModel:
    """Everything a forward solve needs apart from the design."""

    grid: BackgroundGrid
    points: MaterialPointSet
    newton: NewtonSettings = field(default_factory=NewtonSettings)
    backend: str = None
    # nodes carrying less than this many cell volumes of particles follow a
    # neighbour; with "stiffness" the volumes are weighted by shear modulus
    # over the stiffest, with "volume" the split ignores the design and with
    # "reference" it is also frozen at the undeformed configuration
    min_node_weight: float = 1e-3
    node_weight: str = "stiffness"
    _reference: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def reference_weights(self):
        if self._reference is None:
            self._reference = reference_node_weights(self.points, self.grid)
        return self._reference

    @property
    def kernel(self):
        return kernels.get_backend(self.backend)


class StepContext:
    """Frozen connectivity, loads and sparsity pattern of one load step."""

    def __init__(self, model: MPMModel, state: ParticleState, params: MaterialParams,
                 f_ext, scale, prev_scale=0.0, second_order=False):
        grid = model.grid
        self.model = model
        self.grid = grid
        self.state = state
        self.params = params
        self.scale = scale
        self.kernel = model.kernel
        self.V0 = np.ascontiguousarray(model.points.V0)
        self.conn = build_connectivity(state.x, state.l, grid, second_order=second_order)
        conn = self.conn
        self.n_nodes = grid.n_nodes
        # connectivity is given, so only volumes and thickness are read
        mu = params.mu
        rel = None
        if model.node_weight == "stiffness" and mu.size and mu.max() > 0:
            rel = mu / mu.max()
        ref = model.reference_weights() if model.node_weight == "reference" else None
        self.layout = dof_layout(model.points, grid, conn, model.min_node_weight, rel, ref)
        self.free = self.layout.free
        self.dofmap = np.full(2 * self.n_nodes, -1, dtype=np.int64)
        self.dofmap[self.free] = np.arange(self.free.size)
        # loads transferred with the step-start weights
        self.f_particle = (np.asarray(f_ext, dtype=float)
                           + (params.rho * self.V0)[:, None] * model.points.body_force)
        slot = conn.S[:, :, None] * self.f_particle[:, None, :]
        self.f_ext_nodes = scale * conn.scatter(slot, self.n_nodes)
        self.u_presc = np.where(grid.dirichlet,
                                (scale - prev_scale) * grid.prescribed_disp, 0.0)
        sl, ms = self.layout.slaves, self.layout.masters
        self.dofmap[sl] = self.dofmap[ms]
        presc = self.u_presc.reshape(-1)
        presc[sl] = presc[ms]
        self._mapped = np.flatnonzero(self.dofmap >= 0)
        self._mapped_to = self.dofmap[self._mapped]
        self._build_pattern()

    def _build_pattern(self):
        conn, grid = self.conn, self.grid
        W = conn.width
        D = 2 * W - 1
        D2 = D * D
        nx1, ny1 = grid.nodes_per_axis
        off = kernels.stencil_offsets(W)
        valid = conn.nodes >= 0
        pair = valid[:, :, None] & valid[:, None, :]
        used = np.zeros(self.n_nodes * D2, dtype=bool)
        used[(conn.nodes[:, :, None] * D2 + off[None])[pair]] = True
        cell = np.flatnonzero(used)
        n1, s = np.divmod(cell, D2)
        da = s % D - (W - 1)
        db = s // D - (W - 1)
        n2 = n1 + da + db * nx1
        i = np.repeat(np.arange(2), 2)
        k = np.tile(np.arange(2), 2)
        rows = self.dofmap[(2 * n1)[:, None] + i]
        cols = self.dofmap[(2 * n2)[:, None] + k]
        flat = (cell * 4)[:, None] + (2 * i + k)
        keep = (rows >= 0) & (cols >= 0)
        rows, cols, flat = rows[keep], cols[keep], flat[keep]
        n = self.free.size
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        self._pat_src = flat[order]
        # slave dofs fold several stencil entries onto one matrix entry
        first = np.ones(rows.size, dtype=bool)
        first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        self._pat_sum = None if first.all() else np.cumsum(first) - 1
        self._pat_rows = rows[first]
        self._pat_cols = cols[first]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(self._pat_rows, minlength=n))])

    # ------------------------------------------------------------------
    def full_u(self, u_free):
        u = self.u_presc.reshape(-1).copy()
        u[self._mapped] = np.asarray(u_free)[self._mapped_to]
        return u.reshape(self.n_nodes, 2)

    def reduce(self, full):
        """Transpose of :meth:`expand`: sums slave entries onto their masters."""
        full = np.asarray(full).reshape(-1)
        return np.bincount(self._mapped_to, weights=full[self._mapped],
                           minlength=self.free.size)

    def expand(self, v_free):
        """Nodal vector of the reduced ``v_free`` (zero on fixed dofs)."""
        out = np.zeros(2 * self.n_nodes)
        out[self._mapped] = np.asarray(v_free)[self._mapped_to]
        return out

    def restrict(self, full):
        """Reduced values of a nodal vector that already honours the slave map."""
        return np.asarray(full).reshape(-1)[self.free]

    def _assemble(self, u_free, with_tangent):
        st, p, conn = self.state, self.params, self.conn
        out = self.kernel.assemble(
            np.ascontiguousarray(self.full_u(u_free)), conn.nodes, conn.G,
            np.ascontiguousarray(st.F), self.V0, p.lam, p.mu, conn.width,
            self.grid.nodes_per_axis[0], self.n_nodes, with_tangent)
        fint, Kst, F, tau, bad = out
        if bad >= 0:
            detF = np.linalg.det(self._trial_F(u_free, bad))
            raise InvertedStateError(bad, float(detF))
        return fint, Kst, F, tau

    def _trial_F(self, u_free, p):
        u = self.full_u(u_free)
        nodes = self.conn.nodes[p]
        ok = nodes >= 0
        A = np.eye(2) + np.einsum("mi,mj->ij", u[nodes[ok]], self.conn.G[p][ok])
        return A @ self.state.F[p]

    def residual_full(self, u_free):
        fint, _, _, _ = self._assemble(u_free, False)
        return fint - self.f_ext_nodes

    def energy(self, u_free):
        """Potential energy of the step: stored energy minus external work."""
        _, _, F, _ = self._assemble(u_free, False)
        psi = hencky_energy(F, self.params.lam, self.params.mu)
        return float(self.V0 @ psi - np.sum(self.f_ext_nodes * self.full_u(u_free)))

    def residual(self, u_free):
        return self.reduce(self.residual_full(u_free))

    def tangent_matrix(self, Kst):
        n = self.free.size
        data = Kst.reshape(-1)[self._pat_src]
        if self._pat_sum is not None:
            data = np.bincount(self._pat_sum, weights=data, minlength=self._pat_cols.size)
        return sp.csr_matrix((data, self._pat_cols, self._indptr), shape=(n, n))

    def residual_and_tangent(self, u_free):
        fint, Kst, F, tau = self._assemble(u_free, True)
        return self.reduce(fint - self.f_ext_nodes), self.tangent_matrix(Kst)

    def tangent(self, u_free):
        return self.residual_and_tangent(u_free)[1]


def factorize(K):
    try:
        # the tangent is symmetric: a symmetric ordering with weak diagonal
        # pivoting is markedly cheaper than the unsymmetric default
        return spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                         options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise LinearSolveError(f"tangent factorisation failed: {exc}") from exc


def _shifted(K, beta):
    if beta == 0.0:
        return K
    scale = float(np.mean(np.abs(K.diagonal())))
    return K + sp.identity(K.shape[0], format="csr") * (beta * scale)


def newton_solve(ctx: StepContext, settings: NewtonSettings = None, step=None, u0=None):
    """Solve ``R(u) = 0`` for the step increment.

    Returns ``(u_free, iterations, history)`` where ``history`` lists the
    residual norm before each iteration and the final one.

    With the energy merit the tangent is shifted by a multiple of the
    identity whenever it does not give a descent direction (soft,
    buckling regions make it indefinite); the shift decays again once full
    steps are accepted, so converged states are those of plain Newton.
    """
    s = settings or ctx.model.newton
    u = np.zeros(ctx.free.size) if u0 is None else np.array(u0, dtype=float)
    history = []
    beta = 0.0
    for it in range(s.max_iter + 1):
        R, K = ctx.residual_and_tangent(u)
        norm = float(np.linalg.norm(R))
        history.append(norm)
        if norm < s.tol:
            return u, it, history
        if it == s.max_iter:
            break
        energy_merit = s.merit == "energy" and s.shift
        for _ in range(12):
            du = factorize(_shifted(K, beta)).solve(-R)
            if not np.all(np.isfinite(du)):
                raise LinearSolveError("non-finite Newton correction")
            # energy slope along the Newton direction; the residual merit
            # 1/2 |R|^2 has slope -|R|^2 there
            slope = float(R @ du)
            if not energy_merit or slope < 0:
                break
            beta = max(10.0 * beta, s.shift_min)
        use_energy = s.merit == "energy" and slope < 0
        res0 = 0.5 * norm * norm
        e0 = ctx.energy(u) if use_energy else 0.0
        alpha, cuts = 1.0, 0
        while True:
            try:
                ut = u + alpha * du
                Rt = ctx.residual(ut)
                phi = 0.5 * float(Rt @ Rt)
                ok = phi <= res0 * (1.0 - 2.0 * s.armijo_c * alpha) and beta == 0.0
                # energy differences drown in rounding close to the
                # solution, so either test may accept the step
                if use_energy and not ok:
                    ok = ctx.energy(ut) <= e0 + s.armijo_c * alpha * slope
            except InvertedStateError:
                phi, ok = np.inf, False
            if ok:
                break
            if alpha * s.backtrack < s.min_step:
                if np.isfinite(phi):
                    break
                raise ConvergenceError(f"line search failed at iteration {it}",
                                       history, step)
            alpha *= s.backtrack
            cuts += 1
        u = u + alpha * du
        if energy_merit:
            if cuts >= 3:
                beta = max(10.0 * beta, s.shift_min)
            elif cuts == 0:
                beta = 0.0 if beta <= s.shift_min else 0.1 * beta
        log.debug("step=%s iter=%d resid=%.6e alpha=%.4g cuts=%d shift=%.1e",
                  step, it, norm, alpha, cuts, beta)
    raise ConvergenceError(f"Newton did not converge in {s.max_iter} iterations "
                           f"(|R| = {history[-1]:.3e})", history, step)


def update_particles(state: ParticleState, conn: Connectivity, u_nodes, l0,
                     params: MaterialParams = None) -> ParticleState:
    """Map the converged increment back to the particles."""
    us = conn.gather(u_nodes)
    du = (conn.S[:, None, :] @ us)[:, 0]
    A = us.transpose(0, 2, 1) @ conn.G
    A[:, 0, 0] += 1.0
    A[:, 1, 1] += 1.0
    detA = np.linalg.det(A)
    if np.any(~(detA > 0)):
        p = int(np.flatnonzero(~(detA > 0))[0])
        raise InvertedStateError(p, float(detA[p]))
    F = A @ state.F
    x = state.x + du
    l = l0 * right_stretch_diagonal(F)
    sigma = None
    if params is not None:
        sigma = hencky_stress(F, params.lam, params.mu).sigma
    return ParticleState(x, F, l, sigma)


@dataclass
class StepResult:
    k: int
    scale: float
    u_nodes: np.ndarray
    free_dofs: np.ndarray
    iterations: int
    residual_norm: float
    history: list
    state: ParticleState = None


@dataclass
class SolveRecord:
    initial: ParticleState
    steps: list
    final: ParticleState
    f_ext: np.ndarray

    @property
    def n_steps(self):
        return len(self.steps)

    def particle_displacement(self):
        return self.final.x - self.initial.x


def solve_step(model, state, params, f_ext, schedule, k):
    ctx = StepContext(model, state, params, f_ext, schedule.scale(k),
                      schedule.scale(k - 1))
    u, its, hist = newton_solve(ctx, step=k)
    u_nodes = ctx.full_u(u)
    new = update_particles(state, ctx.conn, u_nodes, model.points.l0, params)
    log.info("step=%d iterations=%d resid=%.3e", k, its, hist[-1])
    return StepResult(k, schedule.scale(k), u_nodes, ctx.free, its, hist[-1], hist), new


def run_forward(model: MPMModel, params: MaterialParams, schedule: LoadSchedule,
                f_ext=None, keep=None, start=None, first_step=1, last_step=None,
                ) -> SolveRecord:
    """Run load steps ``first_step..last_step`` from ``start`` (default: reference).

    ``keep(k)`` decides whether the end-of-step particle state of step ``k``
    is retained in the record; by default every step is kept.
    """
    if f_ext is None:
        f_ext = model.points.f_ext
    state = start if start is not None else ParticleState.reference(model.points)
    initial = state
    last = schedule.n_steps if last_step is None else last_step
    steps = []
    for k in range(first_step, last + 1):
        try:
            res, state = solve_step(model, state, params, f_ext, schedule, k)
        except MPMError as exc:
            exc.step = k
            raise
        if keep is None or keep(k) or k == last:
            res.state = state
        steps.append(res)
    return SolveRecord(initial=initial, steps=steps, final=state, f_ext=np.asarray(f_ext))
