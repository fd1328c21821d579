from dataclasses import replace

import numpy as np
import pytest

from mpmto.benchmarks import build_problem
from mpmto.errors import DeterminismError
from mpmto.objectives import compliance, compliance_seed, volume_constraint_grad
from mpmto.problem import adjoint_gradient, gradient_check, objective_function
from mpmto.sensitivity import (CheckpointStore, SolveCounters, adjoint_sweep,
                               checkpoint_forward, finite_difference_oracle)
from mpmto.solver import (LoadSchedule, MaterialParams, NewtonSettings, StepContext,
                          run_forward)

from conftest import patch_model, shipped, tip_load


def _max_rel(report):
    return max(r[3] for r in report.fd)


def _patch_gradient(model, params, f, n_steps=1, stride=None, counters=None):
    sch = LoadSchedule(n_steps)
    rec, store = checkpoint_forward(model, params, sch, f, stride, counters)
    ct = adjoint_sweep(model, params, sch, store, compliance_seed(rec, f), f, counters)
    return rec, store, ct


# --------------------------------------------------------------------------
# adjoint against finite differences

def test_density_compliance_gradient_matches_fd(gradcheck_built):
    b = gradcheck_built
    rep = gradient_check(b.problem, b.design, 3.0)
    assert len(rep.fd) == b.design.get_params().size
    assert _max_rel(rep) < 1e-5


def test_density_mechanism_gradient_matches_fd():
    b = build_problem(shipped("grad_check", ["objective.kind=mechanism"]))
    rep = gradient_check(b.problem, b.design, 3.0)
    assert _max_rel(rep) < 1e-5


def test_neural_gradient_matches_fd_on_sampled_weights():
    b = build_problem(shipped("grad_check_nn"))
    rep = gradient_check(b.problem, b.design, 3.0, n_components=40, seed=1)
    assert len(rep.fd) == 40
    assert _max_rel(rep) < 1e-5


def test_verification_text_lists_every_component(gradcheck_built):
    b = gradcheck_built
    rep = gradient_check(b.problem, b.design, 3.0, components=[0, 5, 7])
    lines = rep.verification_text().splitlines()
    assert lines[0] == "component,adjoint,fd,rel_error"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 5, 7]


def test_fd_step_sweep_is_v_shaped(gradcheck_built):
    b = gradcheck_built
    exact = adjoint_gradient(b.problem, b.design, 3.0).dJ[3]
    fun = objective_function(b.problem, b.design, 3.0)
    theta = b.design.get_params()
    hs = [1e-1, 1e-3, 1e-5, 1e-7, 1e-9, 1e-11]
    err = [abs(finite_difference_oracle(fun, theta, [3], h)[0] - exact) / abs(exact)
           for h in hs]
    best = int(np.argmin(err))
    assert 0 < best < len(hs) - 1
    assert err[0] > 100 * err[best]
    assert err[-1] > 100 * err[best]


def test_volume_constraint_gradient_is_exact(gradcheck_built):
    b = gradcheck_built
    rep = adjoint_gradient(b.problem, b.design, 3.0)
    V0 = b.model.points.V0
    want = volume_constraint_grad(V0, b.problem.constraint.limit)
    assert np.array_equal(rep.dg["volume"], want)
    assert want == pytest.approx(V0 / b.problem.constraint.limit, rel=1e-15)


# --------------------------------------------------------------------------
# structure of the reverse sweep

def test_one_step_sweep_is_single_ift_application():
    model, params = patch_model()
    model.newton = NewtonSettings(tol=1e-13)
    f = tip_load(model.points, (0.0, -0.01))
    rec, _, ct = _patch_gradient(model, params, f)
    ctx = StepContext(model, rec.initial, params, f, 1.0)
    u = ctx.restrict(rec.steps[0].u_nodes)
    # dJ/du: J = f . sum_m S_pm u_m
    dJ_du = ctx.reduce(ctx.conn.scatter(ctx.conn.S[:, :, None] * f[:, None, :], ctx.n_nodes))
    K = ctx.tangent(u).toarray()
    lam = np.linalg.solve(K.T, dJ_du)
    n = len(model.points)
    h = 1e-6
    for p in range(0, n, 3):
        dR = []
        for sgn in (1.0, -1.0):
            mu = params.mu.copy()
            mu[p] += sgn * h
            ctx.params = MaterialParams(params.lam, mu, params.rho)
            dR.append(ctx.residual(u))
        want = -lam @ ((dR[0] - dR[1]) / (2 * h))
        assert ct.mu[p] == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_gradient_independent_of_stride(gradcheck_built):
    prob = gradcheck_built.problem.with_steps(6)
    design = gradcheck_built.design
    ref = adjoint_gradient(replace(prob, stride=1), design, 3.0).dJ
    scale = np.max(np.abs(ref))
    for stride in (2, 4, 5, 6):
        other = adjoint_gradient(replace(prob, stride=stride), design, 3.0).dJ
        assert np.max(np.abs(other - ref)) <= 1e-12 * scale


def test_stride_n_stores_two_states():
    model, params = patch_model()
    f = tip_load(model.points, (0.0, -0.005))
    _, store = checkpoint_forward(model, params, LoadSchedule(5), f, stride=5)
    assert sorted(store.snapshots) == [0, 5]
    assert store.memory_report()["snapshots"] == 2


def test_stride_one_matches_plain_forward():
    model, params = patch_model()
    f = tip_load(model.points, (0.0, -0.01))
    sch = LoadSchedule(3)
    rec, store = checkpoint_forward(model, params, sch, f, stride=1)
    plain = run_forward(model, params, sch, f)
    assert sorted(store.snapshots) == [0, 1, 2, 3]
    for a, b in zip(rec.steps, plain.steps):
        assert np.array_equal(a.u_nodes, b.u_nodes)
        assert np.array_equal(a.state.x, b.state.x)
        assert np.array_equal(a.state.F, b.state.F)


def test_adjoint_cost_is_one_solve_per_step(gradcheck_built):
    prob = replace(gradcheck_built.problem.with_steps(10), stride=3)
    counters = SolveCounters()
    adjoint_gradient(prob, gradcheck_built.design, 3.0, counters)
    assert counters.forward_steps == 10
    assert counters.adjoint_solves == 10
    # segments (9,10], (6,9], (3,6], (0,3] replay 0 + 2 + 2 + 2 steps
    assert counters.replay_steps == 6


def test_adjoint_solves_ignore_newton_iterations():
    model, params = patch_model()
    counts = []
    for fy in (-1e-6, -0.03):
        f = tip_load(model.points, (0.0, fy))
        counters = SolveCounters()
        rec, _, _ = _patch_gradient(model, params, f, n_steps=2, counters=counters)
        counts.append((sum(s.iterations for s in rec.steps), counters.adjoint_solves))
    assert counts[0][0] < counts[1][0]
    assert counts[0][1] == counts[1][1] == 2


def test_fifty_step_stride_ten_counts():
    model, params = patch_model()
    f = tip_load(model.points, (0.0, -0.01))
    counters = SolveCounters()
    _, store, _ = _patch_gradient(model, params, f, n_steps=50, stride=10, counters=counters)
    assert sorted(store.snapshots) == [0, 10, 20, 30, 40, 50]
    rep = store.memory_report()
    assert rep["snapshots"] == 6 == rep["bound"]
    assert counters.replay_steps == 5 * 9
    assert counters.adjoint_solves == 50


@pytest.mark.parametrize("n,stride", [(1, 1), (7, 3), (10, 3), (12, 4), (9, 10)])
def test_snapshot_count_within_bound(n, stride):
    store = CheckpointStore(stride, n)
    kept = [k for k in range(n + 1) if store.wants(k)]
    assert 0 in kept and n in kept
    assert len(kept) <= store.memory_report()["bound"]


def test_default_stride_is_ceil_sqrt():
    assert [CheckpointStore.default_stride(n) for n in (1, 2, 4, 5, 10, 50)] == [1, 2, 2, 3, 4, 8]
    with pytest.raises(ValueError):
        CheckpointStore(0, 4)


def test_tampered_checkpoint_raises():
    model, params = patch_model()
    f = tip_load(model.points, (0.0, -0.01))
    sch = LoadSchedule(2)
    rec, store = checkpoint_forward(model, params, sch, f, stride=1)
    store.snapshots[2][0].x[0, 0] += 1e-6
    with pytest.raises(DeterminismError):
        adjoint_sweep(model, params, sch, store, compliance_seed(rec, f), f)


# --------------------------------------------------------------------------
# structural zeros and symmetry

def test_fully_clamped_particles_have_zero_gradient():
    model, params = patch_model(clamp=False)
    model.grid.fix(lambda x, y: x <= 0.25 + 1e-12)
    pts = model.points
    left = np.flatnonzero(pts.X0[:, 0] < 0.25)
    mu = params.mu.copy()
    mu[left] *= 1e-6
    params = MaterialParams(params.lam, mu, params.rho)
    f = tip_load(pts, (0.0, -0.01))
    _, _, ct = _patch_gradient(model, params, f, n_steps=2)
    assert np.all(ct.mu[left] == 0.0) and np.all(ct.lam[left] == 0.0)
    right = np.setdiff1d(np.arange(len(pts)), left)
    assert np.all(np.abs(ct.mu[right]) > 0)

    def J(theta):
        m = mu.copy()
        m[left[0]] = theta[0]
        p = MaterialParams(params.lam, m, params.rho)
        return compliance(run_forward(model, p, LoadSchedule(2), f), f)
    fd = finite_difference_oracle(J, mu[left[:1]], [0])[0]
    assert abs(fd) < 1e-9 * np.max(np.abs(ct.mu))


def _mirror_pair():
    model, params = patch_model()
    model.newton = NewtonSettings(tol=1e-14)
    pts = model.points
    X = pts.X0
    # the patch and its grid are symmetric about y = 0.25
    mirror = np.array([int(np.argmin(np.sum((X - [x, 0.5 - y]) ** 2, axis=1))) for x, y in X])
    assert np.allclose(X[mirror, 1], 0.5 - X[:, 1], atol=1e-14)
    pair = [pts.nearest([1.0, 0.2]), pts.nearest([1.0, 0.3])]
    assert mirror[pair[0]] == pair[1]
    return model, params, mirror, pair


def test_axial_load_gradient_is_mirror_symmetric():
    model, params, mirror, pair = _mirror_pair()
    f = np.zeros((len(model.points), 2))
    f[pair] = [0.01, 0.0]
    _, _, ct = _patch_gradient(model, params, f, n_steps=2)
    scale = np.max(np.abs(ct.mu))
    assert np.max(np.abs(ct.mu - ct.mu[mirror])) < 1e-8 * scale
    assert np.max(np.abs(ct.lam - ct.lam[mirror])) < 1e-8 * np.max(np.abs(ct.lam))


def test_transverse_load_gradient_mirrors_with_the_load():
    # a downward load and its mirror image give mirrored gradient fields;
    # a single transverse load is only symmetric up to O(f) terms
    model, params, mirror, pair = _mirror_pair()
    cts = []
    for fy in (-1e-3, 1e-3):
        f = np.zeros((len(model.points), 2))
        f[pair] = [0.0, fy]
        cts.append(_patch_gradient(model, params, f, n_steps=2)[2])
    down, up = cts
    assert np.max(np.abs(down.mu - up.mu[mirror])) < 1e-8 * np.max(np.abs(down.mu))
    assert np.max(np.abs(down.lam - up.lam[mirror])) < 1e-8 * np.max(np.abs(down.lam))
