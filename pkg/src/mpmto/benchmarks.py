"""Problem construction from configs and the run pipelines behind the CLI.

A run writes everything into one output directory:

``summary.json``
    final numbers of the run (deterministic for a given config and seed)
``timings.json``
    wall-clock times; with ``wall_time.csv`` kept apart so the other
    artifacts are reproducible
``history.csv``, ``design_*.mpd``
    optimizer history and design snapshots
``wall_time.csv``
    elapsed time per optimizer iteration
``probe.csv``
    load-displacement table of the probe particle (forward runs)
``gradcheck.csv``
    adjoint against finite differences per checked component
``dump/``
    particle tables and manifest (see :mod:`mpmto.dump`)
``*.ppm``
    renders
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .beam_theory import BeamSection, cantilever_tip
from .config import ProblemConfig, parse_config, shipped_config_text
from .design import (MaterialCatalog, NeuralDesignField, PseudoDensityField,
                     evaluate_design, load_design)
from .dump import dump_state
from .errors import ConfigError, MPMError, VerificationError
from .grid import BackgroundGrid, Polygon, Rectangle, populate_domain
from .objectives import ConstraintSpec, ObjectiveSpec
from .optimizer import ContinuationSchedule, OptimizerSettings, run_optimization
from .problem import (OptimizationProblem, adjoint_gradient, constraint_value,
                      gradient_check, solve_objective)
from .render import render_field
from .solver import LoadSchedule, MaterialParams, MPMModel, NewtonSettings, run_forward

log = logging.getLogger(__name__)

OUTPUT_ENV = "MPMTO_OUTPUT"
BENCHMARKS = {
    "validate-beam": "validate_beam",
    "cantilever-single": "mid_cantilever",
    "cantilever-multi": "cantilever_multi",
    "gripper": "gripper",
}
STRIDE_TOL = 1e-12


@dataclass
class BuiltProblem:
    cfg: ProblemConfig
    grid: BackgroundGrid
    points: object
    model: MPMModel
    catalog: MaterialCatalog
    f_in: np.ndarray
    f_out: np.ndarray
    passive: tuple
    schedule: LoadSchedule
    problem: OptimizationProblem = None
    design: object = None


def _region(rc):
    if rc.shape == "rectangle":
        return Rectangle(*rc.bounds)
    return Polygon(tuple(tuple(v) for v in rc.vertices))


def build_catalog(cfg: ProblemConfig) -> MaterialCatalog:
    lam, mu = cfg.materials.lame()
    m = cfg.materials
    return MaterialCatalog(lam, mu, m.rho, tuple(m.names), tuple(m.colors), m.floor)


def _passive(cfg, points):
    idx, val = [], []
    for i, pc in enumerate(cfg.passive):
        if cfg.design.kind == "density" and pc.value is None:
            raise ConfigError(f"passive[{i}]", "a density design needs a passive value")
        if cfg.design.kind == "neural" and pc.material is None:
            raise ConfigError(f"passive[{i}]", "a network design needs a passive material")
        hit = np.flatnonzero(_region(pc).contains(points.X0))
        if hit.size == 0:
            raise ConfigError(f"passive[{i}]", "region contains no particles")
        idx.append(hit)
        val.append(np.full(hit.size, pc.value if pc.value is not None else pc.material))
    if not idx:
        return None
    idx, val = np.concatenate(idx), np.concatenate(val)
    # later blocks win where regions overlap
    _, last = np.unique(idx[::-1], return_index=True)
    keep = np.sort(idx.size - 1 - last)
    val = val[keep].astype(int) if cfg.design.kind == "neural" else val[keep]
    return idx[keep], val


def initial_design(cfg: ProblemConfig, points, catalog):
    dc = cfg.design
    n = len(points)
    if dc.load is not None:
        try:
            design = load_design(dc.load)
        except (OSError, ValueError) as exc:
            raise ConfigError("design.load", f"cannot load {dc.load}: {exc}") from None
        if design.kind != dc.kind:
            raise ConfigError("design.load", f"file holds a {design.kind} design, config asks for {dc.kind}")
        if design.kind == "density" and design.gamma.size != n:
            raise ConfigError("design.load", f"file has {design.gamma.size} values for {n} particles")
        return design
    if dc.kind == "neural":
        return NeuralDesignField.initialize(catalog.size, _region(cfg.domain).bounds, dc.seed,
                                            dc.n_fourier, tuple(dc.hidden), dc.sigma_f,
                                            dc.output_scale)
    if dc.init_range is not None:
        lo, hi = dc.init_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("design.init_range", "need 0 <= low <= high <= 1")
        return PseudoDensityField(np.random.default_rng(dc.seed).uniform(lo, hi, n))
    value = dc.init
    if value is None:
        con = cfg.constraint
        value = con.fraction if con is not None and con.fraction is not None else 1.0
    return PseudoDensityField.uniform(n, value)


def build_problem(cfg: ProblemConfig) -> BuiltProblem:
    gc = cfg.grid
    grid = BackgroundGrid(gc.origin, gc.h, gc.cells)
    domain = _region(cfg.domain)
    points = populate_domain(domain, grid, cfg.domain.pts_per_cell, cfg.domain.thickness)
    if len(points) == 0:
        raise ConfigError("domain", "domain holds no particles at this resolution")
    tol = 1e-9 * gc.h
    for i, dc in enumerate(cfg.dirichlet):
        x0, y0, x1, y1 = dc.box
        count = grid.fix(lambda x, y: ((x >= x0 - tol) & (x <= x1 + tol)
                                       & (y >= y0 - tol) & (y <= y1 + tol)),
                         axes=tuple("xy".index(a) for a in dc.axes), value=dc.value)
        if count == 0:
            raise ConfigError(f"dirichlet[{i}].box", "box contains no grid nodes")
    n = len(points)
    f_in, f_out = np.zeros((n, 2)), np.zeros((n, 2))
    for load in cfg.loads:
        target = f_in if load.port == "in" else f_out
        target[points.nearest(load.point)] += load.vector
    points.f_ext = f_in.copy()
    points.body_force[:] = cfg.gravity
    s = cfg.solver
    newton = NewtonSettings(tol=s.tol, max_iter=s.max_iter, armijo_c=s.armijo_c,
                            min_step=s.min_step, merit=s.merit)
    model = MPMModel(grid, points, newton, s.backend, s.min_node_weight, s.node_weight)
    catalog = build_catalog(cfg)
    passive = _passive(cfg, points)
    schedule = LoadSchedule(s.n_steps)
    built = BuiltProblem(cfg, grid, points, model, catalog, f_in,
                         f_out if np.any(f_out) else None, passive, schedule)
    built.design = initial_design(cfg, points, catalog)
    if cfg.constraint is not None:
        con = cfg.constraint
        limit = con.limit if con.limit is not None else con.fraction * float(points.V0.sum())
        objective = ObjectiveSpec(cfg.objective.kind, f_in,
                                  built.f_out if cfg.objective.kind == "mechanism" else None)
        built.problem = OptimizationProblem(model, catalog, objective,
                                            ConstraintSpec(con.kind, limit), schedule,
                                            passive, s.stride)
    return built


# --------------------------------------------------------------------------
# output

def output_dir(cfg: ProblemConfig, root=None) -> Path:
    """``output.dir`` if absolute, else below ``root``, ``$MPMTO_OUTPUT`` or ``./runs``."""
    sub = cfg.output.dir or cfg.name
    if os.path.isabs(sub):
        return Path(sub)
    base = root or os.environ.get(OUTPUT_ENV) or "runs"
    return Path(base) / sub


def _write_json(path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _probe_reference(cfg: ProblemConfig, built: BuiltProblem):
    m = cfg.materials
    if m.E is not None:
        E, nu = m.E, m.nu
    else:
        lam, mu = m.lam[0], m.mu[0]
        E, nu = mu * (3 * lam + 2 * mu) / (lam + mu), lam / (2 * (lam + mu))
    x0, y0, x1, y1 = _region(cfg.domain).bounds
    sec = BeamSection(E, nu, x1 - x0, y1 - y0, cfg.domain.thickness)
    P = float(np.linalg.norm(built.f_in.sum(axis=0)))
    return sec, P


def _solid_split(ev, points, cfg):
    """Mass above and below the horizontal mid-line of the design domain."""
    _, y0, _, y1 = _region(cfg.domain).bounds
    mid = 0.5 * (y0 + y1)
    m = ev.rho * points.V0
    above = float(m[points.X0[:, 1] > mid].sum())
    below = float(m[points.X0[:, 1] < mid].sum())
    total = above + below
    return {"mass_above_mid": above, "mass_below_mid": below,
            "mass_asymmetry": abs(above - below) / total if total > 0 else 0.0}


def _render_design(built, ev, state, path, width, deformed):
    pts = built.points
    x, l = (state.x, state.l) if deformed else (pts.X0, pts.l0)
    if ev.values.ndim == 1:
        return render_field(x, l, ev.values, path, width, "linear", lo=0.0, hi=1.0)
    return render_field(x, l, ev.values, path, width, "material", colors=built.catalog.colors)


# --------------------------------------------------------------------------
# pipelines

def run_forward_pipeline(built: BuiltProblem, out: Path) -> dict:
    cfg, pts = built.cfg, built.points
    t0 = time.perf_counter()
    if cfg.design.load is not None:
        q = cfg.optimizer.continuation.q_max
        ev = evaluate_design(built.design, pts, built.catalog, q, built.passive)
        params = MaterialParams(ev.lam, ev.mu, ev.rho)
        design_values = ev.values
    else:
        cat = built.catalog
        params = MaterialParams.uniform(len(pts), cat.lam[0], cat.mu[0], cat.rho[0])
        design_values = None
    rec = run_forward(built.model, params, built.schedule, built.f_in)
    t_solve = time.perf_counter() - t0
    summary = {"name": cfg.name, "mode": "forward", "status": "ok",
               "config_hash": cfg.digest(), "n_particles": len(pts),
               "n_steps": rec.n_steps,
               "newton_iterations": [st.iterations for st in rec.steps]}
    if cfg.probe is not None:
        summary.update(_probe_table(built, rec, out))
    if cfg.output.dump != "none":
        dump_state(rec, pts, out / "dump", params, design_values, cfg.digest(),
                   steps=cfg.output.dump)
    sig = rec.final.sigma
    render_field(rec.final.x, rec.final.l, sig[:, 1, 1], out / "stress_yy_final.ppm",
                 cfg.output.render_width, "diverging")
    _write_json(out / "summary.json", summary)
    _write_json(out / "timings.json", {"solve": t_solve,
                                      "total": time.perf_counter() - t0})
    dev, lim = summary.get("max_deviation"), cfg.probe.max_deviation if cfg.probe else None
    if dev is not None and lim is not None and not dev < lim:
        raise VerificationError(f"probe deviates from the reference by {dev:.4g} L "
                                f"(limit {lim:g} L)")
    return summary


def _probe_table(built, rec, out):
    cfg, pts = built.cfg, built.points
    pc = cfg.probe
    i = pts.nearest(pc.point)
    L = pc.length
    ref = None
    if pc.reference == "beam":
        sec, P = _probe_reference(cfg, built)
    rows, dev = [], 0.0
    for st in rec.steps:
        d = st.state.x[i] - pts.X0[i]
        row = {"step": st.k, "load_fraction": st.scale,
               "u_over_L": abs(d[0]) / L, "v_over_L": abs(d[1]) / L}
        if pc.reference == "beam":
            ur, vr = cantilever_tip(st.scale * P, sec)
            row.update(ref_u_over_L=ur / sec.length, ref_v_over_L=vr / sec.length)
            dev = max(dev, abs(row["u_over_L"] - row["ref_u_over_L"]),
                      abs(row["v_over_L"] - row["ref_v_over_L"]))
        rows.append(row)
    names = list(rows[0])
    lines = [",".join(names)]
    lines += [",".join(repr(float(r[k])) if k != "step" else str(r[k]) for k in names)
              for r in rows]
    (out / "probe.csv").write_text("\n".join(lines) + "\n")
    res = {"probe_particle": i, "tip_u_over_L": rows[-1]["u_over_L"],
           "tip_v_over_L": rows[-1]["v_over_L"]}
    if pc.reference == "beam":
        ref = rows[-1]
        res.update(ref_u_over_L=ref["ref_u_over_L"], ref_v_over_L=ref["ref_v_over_L"],
                   max_deviation=dev)
    return res


def _settings(cfg: ProblemConfig, out: Path) -> OptimizerSettings:
    oc = cfg.optimizer
    cc = oc.continuation
    return OptimizerSettings(max_iter=oc.max_iter, tol=oc.tol, move=oc.move, lr=oc.lr,
                             tau0=oc.tau0, tau_growth=oc.tau_growth,
                             continuation=ContinuationSchedule(cc.q0, cc.dq, cc.q_max),
                             retry_failed_solve=oc.retry_failed_solve,
                             snapshot_every=oc.snapshot_every, out_dir=str(out))


def run_optimize_pipeline(built: BuiltProblem, out: Path, callback=None) -> dict:
    cfg, prob, pts = built.cfg, built.problem, built.points
    t0 = time.perf_counter()
    settings = _settings(cfg, out)
    res = run_optimization(prob, built.design, settings, callback)
    t_opt = time.perf_counter() - t0
    hist = res.history
    q = hist[-1]["q"] if hist else settings.continuation.q(0)
    summary = {"name": cfg.name, "mode": "optimize", "status": res.status,
               "message": res.message, "iterations": len(hist),
               "config_hash": cfg.digest(), "n_particles": len(pts),
               "design_kind": built.design.kind, "q_final": q,
               "constraint": {"kind": prob.constraint.kind, "limit": prob.constraint.limit}}
    if hist:
        summary.update(J_first=hist[0]["J"], J_last_iteration=hist[-1]["J"],
                       g_last_iteration=hist[-1]["g"])
    try:
        ev = evaluate_design(res.design, pts, built.catalog, q, prob.passive)
        J, runs = solve_objective(prob, MaterialParams(ev.lam, ev.mu, ev.rho), keep_all=True)
        g = constraint_value(prob, res.design, ev)[0]
        rec = runs["u"][0]
        summary.update(J_final=J, g_final=g, **_solid_split(ev, pts, cfg))
        _render_design(built, ev, rec.final, out / "design_final.ppm",
                       cfg.output.render_width, False)
        _render_design(built, ev, rec.final, out / "deformed_final.ppm",
                       cfg.output.render_width, True)
        if cfg.output.dump != "none":
            dump_state(rec, pts, out / "dump", MaterialParams(ev.lam, ev.mu, ev.rho),
                       ev.values, cfg.digest(), steps=cfg.output.dump)
    except MPMError as exc:
        if res.status != "failed":
            raise
        summary["final_evaluation"] = f"failed: {exc}"
    _write_json(out / "summary.json", summary)
    _write_json(out / "timings.json", {"optimization": t_opt,
                                      "per_iteration": t_opt / max(len(hist), 1),
                                      "total": time.perf_counter() - t0})
    if res.status == "failed":
        raise OptimizationFailed(res.message)
    return summary


class OptimizationFailed(MPMError):
    pass


def run_gradcheck_pipeline(built: BuiltProblem, out: Path) -> dict:
    cfg, prob = built.cfg, built.problem
    if prob is None:
        raise ConfigError("constraint", "a gradient check needs a constraint block")
    gc = cfg.gradcheck
    t0 = time.perf_counter()
    rep = gradient_check(prob, built.design, gc.q, h_fd=gc.h_fd,
                         n_components=gc.n_components, seed=gc.seed)
    (out / "gradcheck.csv").write_text(rep.verification_text())
    rel = np.array([r[3] for r in rep.fd])
    max_rel = float(np.max(rel)) if rel.size else 0.0
    ok = bool(rel.size) and bool(np.all(np.isfinite(rel))) and max_rel < gc.tol
    stride_dev = {}
    base_dJ = rep.dJ
    for s in gc.strides:
        other = adjoint_gradient(replace(prob, stride=s), built.design, gc.q).dJ
        scale = max(float(np.max(np.abs(base_dJ))), np.finfo(float).tiny)
        stride_dev[str(s)] = float(np.max(np.abs(other - base_dJ)) / scale)
    stride_ok = all(v <= STRIDE_TOL for v in stride_dev.values())
    summary = {"name": cfg.name, "mode": "grad-check", "objective": cfg.objective.kind,
               "design_kind": built.design.kind, "q": gc.q, "J": rep.J,
               "n_checked": int(rel.size), "max_rel_error": max_rel, "tol": gc.tol,
               "stride_deviation": stride_dev, "stride_tol": STRIDE_TOL,
               "passed": ok and stride_ok, "config_hash": cfg.digest()}
    _write_json(out / "summary.json", summary)
    _write_json(out / "timings.json", {"total": time.perf_counter() - t0})
    if not ok:
        raise VerificationError(f"adjoint and finite differences differ by {max_rel:.3e} "
                                f"(tolerance {gc.tol:g})")
    if not stride_ok:
        raise VerificationError(f"gradient depends on the checkpoint stride: {stride_dev}")
    return summary


def run_config(cfg: ProblemConfig, out_root=None, gradcheck=False) -> dict:
    built = build_problem(cfg)
    out = output_dir(cfg, out_root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output.dir", f"cannot create {out}: {exc.strerror}") from None
    if gradcheck:
        return run_gradcheck_pipeline(built, out)
    if cfg.mode == "forward":
        return run_forward_pipeline(built, out)
    return run_optimize_pipeline(built, out)


def benchmark_config(name: str, overrides=(), load=None, ci=False) -> ProblemConfig:
    """Shipped config of a named benchmark, with ``load`` as the force magnitude."""
    if name not in BENCHMARKS:
        raise ConfigError("<benchmark>", f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    cfg_name = BENCHMARKS[name] + ("_ci" if ci else "")
    cfg = parse_config(shipped_config_text(cfg_name), cfg_name + ".cfg", overrides)
    if load is not None:
        if not load > 0:
            raise ConfigError("--load", "load magnitude must be positive")
        loads = []
        for ld in cfg.loads:
            v = np.asarray(ld.vector, dtype=float)
            norm = float(np.linalg.norm(v))
            loads.append(ld.model_copy(update={"vector": tuple(load * v / norm)}) if norm else ld)
        data = cfg.model_dump()
        data["loads"] = [ld.model_dump() for ld in loads]
        cfg = ProblemConfig.model_validate(data)
    return cfg


def run_benchmark(name: str, overrides=(), load=None, ci=False, out_root=None) -> dict:
    return run_config(benchmark_config(name, overrides, load, ci), out_root)
