"""Outer design loop: MMA on pseudodensities, Adam with a log barrier on networks."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import save_design
from .errors import (AdjointError, ConfigError, ConvergenceError, InvertedStateError,
                     LinearSolveError, MPMError)
from .objectives import log_barrier, log_barrier_grad
from .problem import OptimizationProblem, evaluate_problem

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# continuation

@dataclass(frozen=True)
class ContinuationSchedule:
    q0: float = 1.0
    dq: float = 0.05
    q_max: float = 5.0

    def __post_init__(self):
        if self.q0 < 1 or self.dq < 0 or self.q_max < self.q0:
            raise ConfigError("optimizer.continuation", "need 1 <= q0 <= q_max and dq >= 0")

    def q(self, k):
        return min(self.q0 + self.dq * k, self.q_max)

    def saturated(self, k):
        return self.q(k) >= self.q_max


# --------------------------------------------------------------------------
# MMA

@dataclass
class MmaState:
    """Moving-asymptote state for one inequality constraint."""

    n: int
    move: float = 1e-2
    xmin: float = 0.0
    xmax: float = 1.0
    asyinit: float = 0.5
    asydecr: float = 0.7
    asyincr: float = 1.2
    albefa: float = 0.1
    raa0: float = 1e-5
    low: np.ndarray = None
    upp: np.ndarray = None
    xold1: np.ndarray = None
    xold2: np.ndarray = None
    iteration: int = 0

    def arrays(self):
        return {k: getattr(self, k) for k in ("low", "upp", "xold1", "xold2")
                if getattr(self, k) is not None}


def _mma_asymptotes(x, st: MmaState):
    span = st.xmax - st.xmin
    if st.iteration <= 2 or st.low is None:
        low = x - st.asyinit * span
        upp = x + st.asyinit * span
    else:
        osc = (x - st.xold1) * (st.xold1 - st.xold2)
        factor = np.ones_like(x)
        factor[osc > 0] = st.asyincr
        factor[osc < 0] = st.asydecr
        low = x - factor * (st.xold1 - st.low)
        upp = x + factor * (st.upp - st.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    return low, upp


def _mma_terms(df, x, low, upp, raa0, span):
    p = np.maximum(df, 0.0)
    q = np.maximum(-df, 0.0)
    pq = 0.001 * (p + q) + raa0 / max(span, 1e-5)
    return (p + pq) * (upp - x) ** 2, (q + pq) * (x - low) ** 2


def mma_update(gamma, dJ, g, dg, state: MmaState):
    """One MMA step for ``min J`` subject to ``g <= 0`` with ``gamma`` in the box.

    The separable subproblem is solved through its one-dimensional dual by
    bisection on the multiplier.
    """
    x = np.asarray(gamma, dtype=float)
    dJ = np.asarray(dJ, dtype=float)
    dg = np.asarray(dg, dtype=float)
    if not (np.all(np.isfinite(dJ)) and np.all(np.isfinite(dg)) and math.isfinite(g)):
        raise AdjointError("non-finite gradient passed to the MMA update")
    st = state
    st.iteration += 1
    span = st.xmax - st.xmin
    low, upp = _mma_asymptotes(x, st)
    alpha = np.maximum.reduce([low + st.albefa * (x - low), x - st.move * span,
                               np.full_like(x, st.xmin)])
    beta = np.minimum.reduce([upp - st.albefa * (upp - x), x + st.move * span,
                              np.full_like(x, st.xmax)])
    p0, q0 = _mma_terms(dJ, x, low, upp, st.raa0, span)
    p1, q1 = _mma_terms(dg, x, low, upp, st.raa0, span)
    c1 = g - np.sum(p1 / (upp - x) + q1 / (x - low))

    def primal(lam):
        sp = np.sqrt(p0 + lam * p1)
        sq = np.sqrt(q0 + lam * q1)
        return np.clip((sp * low + sq * upp) / (sp + sq), alpha, beta)

    def con(xn):
        return c1 + np.sum(p1 / (upp - xn) + q1 / (xn - low))

    xn = primal(0.0)
    if con(xn) > 0:
        hi = 1.0
        for _ in range(200):
            if con(primal(hi)) <= 0:
                break
            hi *= 2.0
        else:
            hi = None
        if hi is None:
            log.warning("MMA subproblem infeasible; taking a projected gradient step")
            xn = np.clip(x - st.move * span * dg / max(np.max(np.abs(dg)), 1e-300), alpha, beta)
        else:
            lo = 0.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if con(primal(mid)) > 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-14 * max(1.0, hi):
                    break
            xn = primal(hi)
    st.xold2 = st.xold1
    st.xold1 = x.copy()
    st.low, st.upp = low, upp
    return xn


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    n: int
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)

    def arrays(self):
        return {"m": self.m, "v": self.v}


def adam_update(w, grad, state: AdamState):
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise AdjointError(f"non-finite gradient in {bad.size} entries (first {bad[0]})")
    if grad.shape != state.m.shape:
        raise ValueError("gradient size does not match the optimizer state")
    st = state
    st.t += 1
    st.m = st.beta1 * st.m + (1 - st.beta1) * grad
    st.v = st.beta2 * st.v + (1 - st.beta2) * grad * grad
    mhat = st.m / (1 - st.beta1 ** st.t)
    vhat = st.v / (1 - st.beta2 ** st.t)
    return np.asarray(w, dtype=float) - st.lr * mhat / (np.sqrt(vhat) + st.eps)


# --------------------------------------------------------------------------
# outer loop

@dataclass
class OptimizerSettings:
    max_iter: int = 300
    tol: float = 1e-4
    move: float = 1e-2
    lr: float = 1e-2
    tau0: float = 3.0
    tau_growth: float = 1.02
    continuation: ContinuationSchedule = field(default_factory=ContinuationSchedule)
    retry_failed_solve: bool = True
    snapshot_every: int = 10
    out_dir: str = None

    def __post_init__(self):
        if self.max_iter < 0:
            raise ConfigError("optimizer.max_iter", "must be >= 0")
        if not self.tol > 0:
            raise ConfigError("optimizer.tol", "must be positive")


HISTORY_FIELDS = ("iteration", "J", "g", "q", "tau", "loss", "newton_iterations")
TIMING_FIELDS = ("iteration", "wall_time")


@dataclass
class OptimizationResult:
    design: object
    history: list
    status: str
    message: str = ""

    @property
    def converged(self):
        return self.status == "converged"


class _History:
    """Append-only history, written as text after every iteration.

    Wall times go to a file of their own so ``history.csv`` is reproducible.
    """

    def __init__(self, out_dir):
        self.rows = []
        self.files = []
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            self.files = [(out / "history.csv", HISTORY_FIELDS),
                          (out / "wall_time.csv", TIMING_FIELDS)]
            for path, names in self.files:
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(names)

    def append(self, row):
        self.rows.append(row)
        for path, names in self.files:
            with open(path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in names])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _evaluate(problem, design, q, settings):
    try:
        return evaluate_problem(problem, design, q), problem
    except (ConvergenceError, LinearSolveError, InvertedStateError) as exc:
        # a grid escape or a bad config would only fail again
        if not settings.retry_failed_solve:
            raise
        n = 2 * problem.schedule.n_steps
        log.warning("solve failed (%s); retrying with %d load steps", exc, n)
        retry = problem.with_steps(n)
        return evaluate_problem(retry, design, q), retry


def run_optimization(problem: OptimizationProblem, design, settings: OptimizerSettings = None,
                     callback=None) -> OptimizationResult:
    """Iterate design updates until the relative objective change drops below ``tol``.

    The convergence test is only armed once the penalty exponent has reached
    its final value.
    """
    s = settings or OptimizerSettings()
    design = design.copy()
    out = None if s.out_dir is None else Path(s.out_dir)
    hist = _History(out)
    theta = design.get_params()
    if design.kind == "density":
        opt = MmaState(theta.size, move=s.move)
    else:
        opt = AdamState(theta.size, lr=s.lr)
    tau, J_ref, J_prev = s.tau0, None, None
    status, message = "max_iter", ""
    t_start = time.perf_counter()
    good = design.copy()
    for k in range(s.max_iter):
        q = s.continuation.q(k)
        try:
            ev, problem = _evaluate(problem, design, q, s)
        except MPMError as exc:
            status, message = "failed", f"iteration {k}: {exc}"
            log.error("optimization halted at %s", message)
            design = good
            break
        good = design.copy()
        rep = ev.report
        dg = next(iter(rep.dg.values()))
        if J_ref is None:
            J_ref = abs(ev.J) if ev.J != 0 else 1.0
        if design.kind == "density":
            loss = ev.J
        else:
            loss = ev.J / J_ref + log_barrier(ev.g, tau)
        hist.append({"iteration": k, "J": ev.J, "g": ev.g, "q": q, "tau": tau, "loss": loss,
                     "wall_time": time.perf_counter() - t_start,
                     "newton_iterations": sum(st.iterations for r in ev.records.values()
                                              for st in r.steps)})
        log.info("iter=%d J=%.6e g=%.4e q=%.2f", k, ev.J, ev.g, q)
        if callback is not None:
            callback(k, design, ev)
        if (J_prev is not None and s.continuation.saturated(k)
                and abs(ev.J - J_prev) < s.tol * abs(ev.J)):
            status = "converged"
            break
        J_prev = ev.J
        if design.kind == "density":
            theta = mma_update(theta, rep.dJ, ev.g, dg, opt)
        else:
            grad = rep.dJ / J_ref + log_barrier_grad(ev.g, tau) * dg
            theta = adam_update(theta, grad, opt)
            tau *= s.tau_growth
        design.set_params(theta)
        if out is not None:
            save_design(design, out / "design_latest.mpd")
            if s.snapshot_every and (k + 1) % s.snapshot_every == 0:
                save_design(design, out / f"design_{k + 1:04d}.mpd")
    if out is not None:
        save_design(design, out / "design_final.mpd")
    return OptimizationResult(design, hist.rows, status, message)


def settings_from_dict(d: dict) -> OptimizerSettings:
    d = dict(d)
    cont = d.pop("continuation", None)
    known = {f.name for f in dataclasses.fields(OptimizerSettings)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"optimizer.{sorted(unknown)[0]}", "unknown key")
    if cont is not None:
        d["continuation"] = ContinuationSchedule(**cont)
    return OptimizerSettings(**d)
