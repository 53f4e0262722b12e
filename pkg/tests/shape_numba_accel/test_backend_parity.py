import numpy as np
import pytest

from cpflow import _coeffs as C
from cpflow._jit import HAVE_NUMBA, resolve_backend
from cpflow.mckean import coded_kernel, constant_flow, gauss_hermite_nodes, init_states, run_particles
from cpflow.nse2d import mesh, solve_nse_poisson, taylor_green_w0
from cpflow.randomness import derive_stream
from cpflow.reference import rk4_solve
from cpflow.scheme import coded, simulate_batch

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba backend unavailable")


def test_resolve_backend(monkeypatch):
    assert resolve_backend("numpy") == "numpy"
    with pytest.raises(ValueError):
        resolve_backend("cuda")
    monkeypatch.setenv("CPFLOW_BACKEND", "numpy")
    assert resolve_backend() == "numpy"


@needs_numba
@pytest.mark.parametrize("coeffs,x0", [
    (coded(C.SIN_COS, (), C.ADDITIVE, (0.7,)), [0.3]),
    (coded(C.DOUBLE_WELL, (), C.ADDITIVE, (1.0,), m=3.0), [0.5]),
    (coded(C.NEG_TANH, (1.0,), C.ADDITIVE, (1.0,), alpha=1.5), [0.0]),
    (coded(C.VORTEX, (0.5, 1.0), d=2), [0.5, 0.0]),
])
def test_scheme_batch_backends_agree(coeffs, x0):
    s = derive_stream(0, [("parity", 0)])
    ref = rk4_solve(coeffs.drift, x0, 1.0, 1e-3).as_grid()
    kw = dict(reference=ref, window=(0.2, 1.0))
    a = simulate_batch(coeffs, x0, 0.01, 1.0, s, 40, backend="numba", **kw)
    b = simulate_batch(coeffs, x0, 0.01, 1.0, s, 40, backend="numpy", **kw)
    assert np.array_equal(a.n_events, b.n_events)
    assert np.allclose(a.endpoints, b.endpoints, rtol=1e-12, atol=1e-13)
    assert np.allclose(a.sup_err2, b.sup_err2, rtol=1e-9, atol=1e-13)
    assert np.allclose(a.time_avg, b.time_avg, rtol=1e-10, atol=1e-13)


@needs_numba
@pytest.mark.parametrize("fluct", [False, True])
def test_particle_backends_agree(fluct):
    kernel = coded_kernel(C.PAIR_SIN)
    s = derive_stream(1, [("parity", 1)])
    init = init_states(s.child("init", 0), 12, 5)
    flow = None if fluct else constant_flow(*gauss_hermite_nodes(0.0, 1.0, 16), 1.0)
    a = run_particles(kernel, init, 1.0, s, flow=flow, fluct=fluct, backend="numba")
    b = run_particles(kernel, init, 1.0, s, flow=flow, fluct=fluct, backend="numpy")
    assert np.array_equal(a.n_events, b.n_events)
    assert np.allclose(a.x, b.x, rtol=1e-12, atol=1e-13)
    if fluct:
        assert np.allclose(a.Y, b.Y, rtol=1e-10, atol=1e-12)
    else:
        assert np.allclose(a.gap, b.gap, rtol=1e-9, atol=1e-14)


@needs_numba
def test_vorticity_backends_agree():
    X1, X2 = mesh(8)
    s = derive_stream(2, [("parity", 2)])
    kw = dict(M=40, G=8, slices=2, max_iter=2)
    a = solve_nse_poisson(taylor_green_w0(X1, X2), 0.1, 0.05, 0.5, s, backend="numba", **kw)
    b = solve_nse_poisson(taylor_green_w0(X1, X2), 0.1, 0.05, 0.5, s, backend="numpy", **kw)
    assert np.allclose(a.w, b.w, rtol=1e-10, atol=1e-12)
    assert np.allclose(a.noise_floor, b.noise_floor, rtol=1e-8, atol=1e-13)


def test_worker_count_does_not_change_results():
    c = coded(C.SIN_COS, (), C.ADDITIVE, (0.7,))
    s = derive_stream(3, [("workers", 0)])
    one = simulate_batch(c, [0.1], 0.01, 1.0, s, 50, workers=1)
    four = simulate_batch(c, [0.1], 0.01, 1.0, s, 50, workers=4)
    assert np.array_equal(one.endpoints, four.endpoints)
    kernel = coded_kernel(C.PAIR_SIN)
    init = init_states(s.child("init", 0), 8, 9)
    p1 = run_particles(kernel, init, 1.0, s, workers=1)
    p3 = run_particles(kernel, init, 1.0, s, workers=3)
    assert np.array_equal(p1.x, p3.x)
