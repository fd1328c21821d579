"""Design problems: the solve, objective, constraint and gradient glued together."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .design import DesignEvaluation, MaterialCatalog, design_vjp, evaluate_design
from .errors import ConfigError
from .objectives import (ConstraintSpec, ObjectiveSpec, compliance, compliance_seed,
                         mass_constraint, mass_constraint_grad_rho, mechanism_objective,
                         mechanism_seeds, volume_constraint, volume_constraint_grad)
from .sensitivity import (GradientReport, SolveCounters, adjoint_sweep,
                          checkpoint_forward, finite_difference_oracle)
from .solver import LoadSchedule, MaterialParams, MPMModel


@dataclass
class OptimizationProblem:
    """Everything but the design: model, loads, objective, constraint, materials.

    ``passive`` is ``(indices, value)``: particles outside the design region
    held at a fixed pseudodensity or material index.
    """

    model: MPMModel
    catalog: MaterialCatalog
    objective: ObjectiveSpec
    constraint: ConstraintSpec
    schedule: LoadSchedule
    passive: tuple = None
    stride: int = None

    def __post_init__(self):
        n = len(self.model.points)
        for name, f in (("f_in", self.objective.f_in), ("f_out", self.objective.f_out)):
            if f is not None and f.shape != (n, 2):
                raise ConfigError(f"objective.{name}", f"expected shape ({n}, 2), got {f.shape}")

    def with_steps(self, n_steps):
        return replace(self, schedule=LoadSchedule(n_steps))


@dataclass
class Evaluation:
    J: float
    g: float
    design_eval: DesignEvaluation
    records: dict
    report: GradientReport = None
    timings: dict = field(default_factory=dict)


def _params(ev: DesignEvaluation):
    return MaterialParams(ev.lam, ev.mu, ev.rho)


def constraint_value(problem: OptimizationProblem, design, ev: DesignEvaluation):
    """Constraint value and its cotangents on ``(values, rho)``."""
    V0 = problem.model.points.V0
    con = problem.constraint
    if con.kind == "volume":
        if design.kind != "density":
            raise ConfigError("constraint.kind", "a volume constraint needs a pseudodensity design")
        return volume_constraint(ev.values, V0, con.limit), volume_constraint_grad(V0, con.limit), None
    return mass_constraint(ev.rho, V0, con.limit), None, mass_constraint_grad_rho(V0, con.limit)


def solve_objective(problem: OptimizationProblem, params: MaterialParams,
                    counters: SolveCounters = None, keep_all=False):
    """Forward solves and objective value; returns ``(J, {name: (record, store)})``."""
    model, sch, obj = problem.model, problem.schedule, problem.objective
    stride = 1 if keep_all else problem.stride
    runs = {"u": checkpoint_forward(model, params, sch, obj.f_in, stride, counters)}
    if obj.kind == "compliance":
        J = compliance(runs["u"][0], obj.f_in)
    else:
        runs["v"] = checkpoint_forward(model, params, sch, obj.f_out, stride, counters)
        J = mechanism_objective(runs["u"][0], runs["v"][0], obj)
    return J, runs


def evaluate_problem(problem: OptimizationProblem, design, q, gradient=True,
                     counters: SolveCounters = None) -> Evaluation:
    """Objective, constraint and, if asked, their design gradients."""
    counters = counters if counters is not None else SolveCounters()
    t0 = time.perf_counter()
    ev = evaluate_design(design, problem.model.points, problem.catalog, q, problem.passive)
    params = _params(ev)
    J, runs = solve_objective(problem, params, counters)
    t1 = time.perf_counter()
    g, value_bar_g, rho_bar_g = constraint_value(problem, design, ev)
    out = Evaluation(J, g, ev, {k: r for k, (r, _) in runs.items()},
                     timings={"forward": t1 - t0})
    if not gradient:
        return out
    obj, model, sch = problem.objective, problem.model, problem.schedule
    if obj.kind == "compliance":
        seeds = {"u": compliance_seed(runs["u"][0], obj.f_in)}
        loads = {"u": obj.f_in}
    else:
        su, sv = mechanism_seeds(runs["u"][0], runs["v"][0], obj)
        seeds, loads = {"u": su, "v": sv}, {"u": obj.f_in, "v": obj.f_out}
    n = len(model.points)
    lam_bar, mu_bar, rho_bar = np.zeros(n), np.zeros(n), np.zeros(n)
    for key, seed in seeds.items():
        ct = adjoint_sweep(model, params, sch, runs[key][1], seed, loads[key], counters)
        lam_bar += ct.lam
        mu_bar += ct.mu
        rho_bar += ct.rho
    dJ = design_vjp(design, ev, problem.catalog, lam_bar, mu_bar, rho_bar, problem.passive)
    zeros = np.zeros(n)
    dg = design_vjp(design, ev, problem.catalog, zeros, zeros,
                    zeros if rho_bar_g is None else rho_bar_g, problem.passive,
                    value_bar=value_bar_g)
    out.report = GradientReport(J, dJ, {problem.constraint.kind: g},
                                {problem.constraint.kind: dg}, counters)
    out.timings["adjoint"] = time.perf_counter() - t1
    return out


def adjoint_gradient(problem: OptimizationProblem, design, q,
                     counters: SolveCounters = None) -> GradientReport:
    return evaluate_problem(problem, design, q, True, counters).report


def objective_function(problem: OptimizationProblem, design, q):
    """``theta -> J`` on a copy of ``design``, for finite differences."""
    work = design.copy()

    def fun(theta):
        work.set_params(theta)
        ev = evaluate_design(work, problem.model.points, problem.catalog, q, problem.passive)
        return solve_objective(problem, _params(ev))[0]
    return fun


def gradient_check(problem: OptimizationProblem, design, q, components=None,
                   h_fd=1e-6, n_components=None, seed=0):
    """Adjoint gradient compared with central differences on selected components."""
    report = adjoint_gradient(problem, design, q)
    theta = design.get_params()
    if components is None:
        components = np.arange(theta.size)
        if n_components is not None and n_components < theta.size:
            rng = np.random.default_rng(seed)
            components = np.sort(rng.choice(theta.size, n_components, replace=False))
    fd = finite_difference_oracle(objective_function(problem, design, q), theta,
                                  list(components), h_fd)
    adj = report.dJ[components]
    # symmetric relative error; exact zeros on both sides count as agreement
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(adj)), np.finfo(float).tiny)
    rel = np.abs(adj - fd) / scale
    report.fd = [(int(c), float(a), float(f), float(r))
                 for c, a, f, r in zip(components, adj, fd, rel)]
    return report

