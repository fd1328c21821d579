import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmto.benchmarks import build_problem
from mpmto.design import load_design
from mpmto.errors import AdjointError, ConfigError
from mpmto.objectives import log_barrier
from mpmto.optimizer import (HISTORY_FIELDS, AdamState, ContinuationSchedule, MmaState,
                             OptimizerSettings, adam_update, mma_update, run_optimization,
                             settings_from_dict)
from mpmto.problem import evaluate_problem

from conftest import shipped


# --------------------------------------------------------------------------
# MMA

def test_mma_stationary_point_is_kept():
    x = np.array([0.2, 0.5, 0.9])
    st_ = MmaState(3)
    xn = mma_update(x, np.zeros(3), -0.5, np.ones(3), st_)
    assert np.allclose(xn, x, atol=1e-12)


def test_mma_quadratic_step_is_clamped_by_move_limit():
    x = np.array([0.25])
    xn = mma_update(x, 2 * (x - 0.5), -1.0, np.zeros(1), MmaState(1, move=0.01))
    assert xn[0] == pytest.approx(0.26, abs=1e-12)


def test_mma_violated_constraint_lowers_densities():
    x = np.full(5, 0.6)
    xn = mma_update(x, np.zeros(5), 0.2, np.full(5, 0.4), MmaState(5))
    assert np.all(xn < x)


def test_mma_converges_on_a_separable_problem():
    # min sum (x - c)^2 s.t. mean(x) <= 0.4; the optimum shifts c down uniformly
    c = np.array([0.2, 0.5, 0.7, 0.9])
    x = np.full(4, 0.4)
    state = MmaState(4, move=0.05)
    for _ in range(200):
        x = mma_update(x, 2 * (x - c), np.mean(x) / 0.4 - 1.0, np.full(4, 0.25 / 0.4), state)
    shift = (np.sum(c) - 1.6) / 4
    assert np.allclose(x, c - shift, atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.floats(-1, 1), st.lists(st.floats(0, 10), min_size=3, max_size=3),
       st.sampled_from([0.01, 0.05, 0.2]))
def test_mma_respects_box_and_move_limit(x, dJ, g, dg, move):
    x = np.array(x)
    state = MmaState(3, move=move)
    for _ in range(3):
        xn = mma_update(x, np.array(dJ), g, np.array(dg), state)
        assert np.all(xn >= 0.0) and np.all(xn <= 1.0)
        assert np.max(np.abs(xn - x)) <= move + 1e-12
        x = xn


def test_mma_rejects_non_finite_gradient():
    with pytest.raises(AdjointError):
        mma_update(np.ones(2) * 0.5, np.array([np.nan, 0.0]), -1.0, np.ones(2), MmaState(2))


def test_mma_first_asymptotes_half_box_away():
    x = np.array([0.3, 0.6])
    state = MmaState(2)
    mma_update(x, np.array([1.0, -1.0]), -1.0, np.ones(2), state)
    assert np.allclose(state.low, x - 0.5) and np.allclose(state.upp, x + 0.5)


# --------------------------------------------------------------------------
# Adam

def test_adam_first_step_is_signed_learning_rate():
    g = np.array([3.0, -1e-3, 250.0])
    w = adam_update(np.zeros(3), g, AdamState(3, lr=0.01))
    assert np.allclose(w, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_keeps_weights():
    w0 = np.array([0.5, -2.0])
    assert np.array_equal(adam_update(w0, np.zeros(2), AdamState(2)), w0)


def test_adam_is_deterministic():
    rng = np.random.default_rng(3)
    w0, grads = rng.standard_normal(6), rng.standard_normal((4, 6))
    runs = []
    for _ in range(2):
        state, w = AdamState(6), w0
        for g in grads:
            w = adam_update(w, g, state)
        runs.append(w)
    assert np.array_equal(runs[0], runs[1])


def test_adam_rejects_mismatched_or_non_finite_gradient():
    with pytest.raises(AdjointError):
        adam_update(np.zeros(2), np.array([1.0, np.inf]), AdamState(2))
    with pytest.raises(ValueError):
        adam_update(np.zeros(2), np.zeros(3), AdamState(2))


# --------------------------------------------------------------------------
# continuation and settings

def test_penalty_continuation_schedule():
    sch = ContinuationSchedule()
    for k in range(0, 120):
        assert sch.q(k) == min(1.0 + 0.05 * k, 5.0)
    assert not sch.saturated(79) and sch.saturated(80)
    with pytest.raises(ConfigError):
        ContinuationSchedule(q0=0.5)


def test_settings_reject_unknown_keys():
    with pytest.raises(ConfigError) as exc:
        settings_from_dict({"max_iter": 3, "momentum": 0.9})
    assert "optimizer.momentum" in str(exc.value)
    with pytest.raises(ConfigError):
        OptimizerSettings(max_iter=-1)


# --------------------------------------------------------------------------
# outer loop on the small verification problem

@pytest.fixture(scope="module")
def small():
    return build_problem(shipped("grad_check"))


def test_zero_budget_returns_initial_design(small, tmp_path):
    res = run_optimization(small.problem, small.design,
                           OptimizerSettings(max_iter=0, out_dir=str(tmp_path)))
    assert np.array_equal(res.design.get_params(), small.design.get_params())
    assert res.history == [] and res.status == "max_iter"


def test_density_loop_keeps_box_and_move_limit(small, tmp_path):
    seen = []
    res = run_optimization(small.problem, small.design,
                           OptimizerSettings(max_iter=5, out_dir=str(tmp_path), snapshot_every=2),
                           callback=lambda k, d, ev: seen.append(d.get_params().copy()))
    seen.append(res.design.get_params())
    for a, b in zip(seen, seen[1:]):
        assert np.max(np.abs(b - a)) <= 1e-2 + 1e-12
        assert np.all(b >= 0) and np.all(b <= 1)
    assert [r["q"] for r in res.history] == [1.0, 1.05, 1.1, 1.15, 1.2]
    # the design given in is not modified
    assert not np.array_equal(res.design.get_params(), small.design.get_params())


def test_every_iteration_starts_from_reference(small):
    X0 = small.model.points.X0
    starts = []

    def cb(k, design, ev):
        init = ev.records["u"].initial
        starts.append((init.x.copy(), init.F.copy()))
    run_optimization(small.problem, small.design, OptimizerSettings(max_iter=3), callback=cb)
    assert len(starts) == 3
    for x, F in starts:
        assert np.array_equal(x, X0)
        assert np.array_equal(F, np.broadcast_to(np.eye(2), F.shape))


def test_evaluation_is_repeatable(small):
    a = evaluate_problem(small.problem, small.design, 2.0)
    b = evaluate_problem(small.problem, small.design, 2.0)
    assert a.J == b.J and np.array_equal(a.report.dJ, b.report.dJ)


def test_history_written_every_iteration(small, tmp_path):
    lengths = []

    def cb(k, design, ev):
        with open(tmp_path / "history.csv") as fh:
            lengths.append(len(list(csv.reader(fh))) - 1)
    res = run_optimization(small.problem, small.design,
                           OptimizerSettings(max_iter=4, out_dir=str(tmp_path), snapshot_every=2),
                           callback=cb)
    assert lengths == [1, 2, 3, 4]
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == HISTORY_FIELDS
    assert [float(r["J"]) for r in rows] == [r["J"] for r in res.history]
    with open(tmp_path / "wall_time.csv") as fh:
        times = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in times] == [0, 1, 2, 3]
    assert (tmp_path / "design_0002.mpd").exists() and (tmp_path / "design_0004.mpd").exists()
    final = load_design(tmp_path / "design_final.mpd")
    assert np.array_equal(final.get_params(), res.design.get_params())


def test_neural_loop_uses_barrier_and_grows_tau(tmp_path):
    b = build_problem(shipped("grad_check_nn"))
    res = run_optimization(b.problem, b.design, OptimizerSettings(max_iter=3, lr=1e-3))
    taus = [r["tau"] for r in res.history]
    assert taus == pytest.approx([3.0, 3.06, 3.1212], rel=1e-12)
    assert all(np.isfinite(r["loss"]) for r in res.history)
    assert res.history[0]["loss"] == pytest.approx(1.0 + log_barrier(res.history[0]["g"], 3.0))



def _failing_first(monkeypatch, fail_steps):
    import mpmto.optimizer as opt
    from mpmto.errors import ConvergenceError
    real, seen = opt.evaluate_problem, []

    def fake(problem, design, q, *a, **kw):
        seen.append(problem.schedule.n_steps)
        if problem.schedule.n_steps in fail_steps:
            raise ConvergenceError("no convergence", step=1, history=[1.0])
        return real(problem, design, q, *a, **kw)
    monkeypatch.setattr(opt, "evaluate_problem", fake)
    return seen


def test_failed_solve_is_retried_with_doubled_steps(small, monkeypatch):
    seen = _failing_first(monkeypatch, {2})
    res = run_optimization(small.problem, small.design, OptimizerSettings(max_iter=2))
    assert seen == [2, 4, 4]
    assert res.status == "max_iter" and len(res.history) == 2


def test_second_failure_halts_with_last_good_design(small, monkeypatch):
    _failing_first(monkeypatch, {2, 4})
    res = run_optimization(small.problem, small.design, OptimizerSettings(max_iter=2))
    assert res.status == "failed" and "iteration 0" in res.message
    assert np.array_equal(res.design.get_params(), small.design.get_params())
