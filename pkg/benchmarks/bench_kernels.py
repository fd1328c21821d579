"""Time the compiled and NumPy assembly kernels on the beam problem.

Usage: python benchmarks/bench_kernels.py [--h 0.25] [--repeat 5]

Both backends assemble residual and tangent at the same deformed state;
the script reports the best wall time of each and checks they agree.
"""
import argparse
import time

import numpy as np

from mpmto import kernels
from mpmto.constitutive import LameParams
from mpmto.grid import BackgroundGrid, Rectangle, populate_domain
from mpmto.solver import MaterialParams, MPMModel, ParticleState, StepContext


def beam_context(h, backend):
    nx = int(round(10.5 / h)) + 2
    grid = BackgroundGrid((-2 * h, -9.0), h, (nx, int(round(10.5 / h))))
    pts = populate_domain(Rectangle(0, 0, 10, 1), grid, 6)
    grid.fix(lambda x, y: x <= 1e-9, axes=(0,))
    lp = LameParams.from_young(12e6, 0.2)
    params = MaterialParams.uniform(len(pts), lp.lam, lp.mu)
    model = MPMModel(grid, pts, backend=backend)
    f = np.zeros((len(pts), 2))
    f[pts.nearest((10, 0.5))] = (0, -1e5)
    return StepContext(model, ParticleState.reference(pts), params, f, 0.02)


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=float, default=0.25)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    results = {}
    u = None
    for name in kernels.available():
        ctx = beam_context(args.h, name)
        if u is None:
            u = 1e-3 * rng.standard_normal(ctx.free.size)
        t_r, R = best_time(lambda: ctx.residual(u), args.repeat)
        t_k, (_, K) = best_time(lambda: ctx.residual_and_tangent(u), args.repeat)
        results[name] = (t_r, t_k, R, K)
        print(f"{name:>7s}: particles={len(ctx.V0)} dofs={ctx.free.size} "
              f"residual {1e3 * t_r:8.2f} ms  residual+tangent {1e3 * t_k:8.2f} ms")
    if len(results) == 2:
        (tr_c, tk_c, R_c, K_c), (tr_n, tk_n, R_n, K_n) = results["cython"], results["numpy"]
        dR = np.abs(R_c - R_n).max() / np.abs(R_n).max()
        dK = abs(K_c - K_n).max() / abs(K_n).max()
        print(f"speedup: residual {tr_n / tr_c:.1f}x, residual+tangent {tk_n / tk_c:.1f}x; "
              f"max relative difference R {dR:.1e}, K {dK:.1e}")


if __name__ == "__main__":
    main()
