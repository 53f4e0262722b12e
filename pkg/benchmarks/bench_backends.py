"""Wall-clock comparison of the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_backends.py [--repeat 3]

The first numba call of each kernel includes compilation (or a cache load),
so it is run once untimed.
"""
import argparse
import time

import numpy as np

from cpflow import _coeffs as C
from cpflow._jit import HAVE_NUMBA
from cpflow.mckean import coded_kernel, init_states, run_particles
from cpflow.nse2d import mesh, solve_nse_poisson, taylor_green_w0
from cpflow.randomness import derive_stream
from cpflow.scheme import coded, simulate_batch


def scheme_case(backend):
    c = coded(C.SIN_COS, (), C.ADDITIVE, (0.7,))
    simulate_batch(c, [0.3], 1e-3, 1.0, derive_stream(0, [("bench", 0)]), 200, backend=backend)


def particle_case(backend):
    k = coded_kernel(C.PAIR_SIN)
    s = derive_stream(0, [("bench", 1)])
    run_particles(k, init_states(s, 32, 4), 1.0, s, fluct=True, backend=backend)


def vorticity_case(backend):
    X1, X2 = mesh(8)
    solve_nse_poisson(taylor_green_w0(X1, X2), 0.1, 0.02, 0.5, derive_stream(0, [("bench", 2)]),
                      M=40, G=8, slices=2, max_iter=1, backend=backend)


CASES = {"scheme (200 paths, 1000 events)": scheme_case,
         "particles (N=32, 4 replicas)": particle_case,
         "vorticity sweep (G=8, M=40)": vorticity_case}


def best_of(fn, backend, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(backend)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    if not HAVE_NUMBA:
        print("numba not available; only the numpy backend can run")
    print(f"{'case':36s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for name, fn in CASES.items():
        tn = np.nan
        if HAVE_NUMBA:
            fn("numba")
            tn = best_of(fn, "numba", args.repeat)
        tp = best_of(fn, "numpy", args.repeat)
        print(f"{name:36s} {tn:10.4f} {tp:10.4f} {tp / tn:8.1f}")


if __name__ == "__main__":
    main()
