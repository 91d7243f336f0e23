"""Compare the numba and numpy element kernels.

Usage: python benchmarks/bench_kernels.py [--nx 48 --ny 16 --levels 0 2 4] [--repeat 5]

Kernel inputs come from the real quadrature data of the wave-scenario mesh,
so the timings reflect what one assembly of the velocity block costs.
"""

import argparse
import time

import numpy as np

from chnsadapt import _accel, _kernels
from chnsadapt.assembly import quad_data
from chnsadapt.mesh import build_rectangle_mesh, refine_uniform


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nx", type=int, default=48)
    ap.add_argument("--ny", type=int, default=16)
    ap.add_argument("--levels", type=int, nargs="+", default=[0, 2, 4])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    base = build_rectangle_mesh(3.0, 1.0, args.nx, args.ny)
    print(f"{'triangles':>10} {'kernel':>10} {'numpy [s]':>10} {'numba [s]':>10} {'speedup':>8}")
    for level in args.levels:
        mesh = refine_uniform(base, level)
        q = quad_data(mesh)
        wq = np.ascontiguousarray(q.w)
        N = np.ascontiguousarray(q.N2)
        G = np.ascontiguousarray(q.G2)
        bq = np.ascontiguousarray(np.random.default_rng(0).standard_normal(q.x.shape) * wq[..., None])
        cases = {
            "mass": (_kernels.weighted_mass_numpy, _kernels.weighted_mass_numba, (wq, N)),
            "gradgrad": (_kernels.weighted_gradgrad_numpy, _kernels.weighted_gradgrad_numba, (wq, G)),
            "advection": (_kernels.advection_numpy, _kernels.advection_numba, (bq, G, N)),
        }
        for name, (f_np, f_nb, inputs) in cases.items():
            f_nb(*inputs)  # compile outside the timing
            assert np.allclose(f_np(*inputs), f_nb(*inputs), rtol=1e-12, atol=1e-13)
            t_np = best_of(lambda: f_np(*inputs), args.repeat)
            t_nb = best_of(lambda: f_nb(*inputs), args.repeat)
            print(f"{mesh.n_triangles:>10} {name:>10} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f}")


if __name__ == "__main__":
    main()
