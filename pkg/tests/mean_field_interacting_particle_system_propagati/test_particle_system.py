import io
import math

import numpy as np
import pytest

from cpflow import _coeffs as C
from cpflow._philox import philox_np, u01_np
from cpflow.mckean import (PicardError, chaos_error, cloud_flow, coded_kernel, constant_flow,
                           fluctuation_stat, gauss_hermite_nodes, init_states, picard_flow,
                           run_particles, simulate_coupled, simulate_particles,
                           write_trajectory_csv)
from cpflow.randomness import TAG_PARTICLE, build_jump_law, derive_stream, jump_from_words
from cpflow.scheme import coded, replay


def particle_events(stream, label, replica, T, eps):
    """Tick times and jumps of one particle, rebuilt from raw counter blocks."""
    key = stream.key
    law = build_jump_law(2.0, 1)
    times, jumps, tot, k = [], [], 0.0, 1
    while True:
        w = philox_np(np.uint64(k), np.uint64(label), np.uint64(replica), np.uint64(TAG_PARTICLE),
                      *key)
        tot += -math.log1p(-float(u01_np(np.array([w[0]]))[0]))
        if eps * tot > T:
            return np.array(times), np.array(jumps).reshape(-1, 1)
        times.append(eps * tot)
        jumps.append(jump_from_words(law, np.array([w[1]]), np.array([w[2]]),
                                     np.array([w[3]]))[0])
        k += 1


def test_single_particle_is_the_scheme_with_self_interaction():
    kernel = coded_kernel(C.PAIR_CONST, (0.7,), C.ADDITIVE, (0.5,))
    s = derive_stream(3, [("one", 0)])
    run = simulate_particles(kernel, [0.2], 4.0, s, replica=2)
    times, jumps = particle_events(s, 0, 2, 4.0, 1.0)
    path = replay(coded(C.CONST, (0.7,), C.ADDITIVE, (0.5,)), [0.2], 1.0, times, jumps, T=4.0)
    events = [row for row in run.log if row[0] > 0]
    assert [row[1] for row in events] == pytest.approx(list(times), rel=1e-15)
    assert np.allclose([row[3] for row in events], path.states[1:, 0], rtol=1e-14)
    assert run.x[0] == pytest.approx(path.states[-1, 0])


def test_constant_kernel_mean_displacement():
    N, R, T, c = 16, 300, 1.0, 1.5
    kernel = coded_kernel(C.PAIR_CONST, (c,))
    init = np.zeros((R, N))
    b = run_particles(kernel, init, T, derive_stream(0, [("const", 0)]))
    # x_i = c n_i / N with n_i ~ Poisson(N T)
    assert np.array_equal(b.x, c * b.n_events / N)
    assert abs(b.x.mean() - c * T) < 4 * c * math.sqrt(T / N / (N * R))


def test_mean_field_ou_variance():
    N, R, T = 64, 200, 1.0
    kernel = coded_kernel(C.PAIR_ATTRACT, (1.0,), C.ADDITIVE, (1.0,), mean_field_closed_form=True)
    s = derive_stream(1, [("ou", 0)])
    init = init_states(s.child("init", 0), N, R)
    b = run_particles(kernel, init, T, s)
    per_rep = b.x.var(axis=1, ddof=1)
    exact = math.exp(-2 * T) + (1 - math.exp(-2 * T)) / 2
    m = per_rep.mean()
    ci = 1.96 * per_rep.std(ddof=1) / math.sqrt(R)
    # the O(1/N) scheme bias is about 0.01 at N = 64
    assert abs(m - exact) < ci + 0.02


def test_y_independent_kernel_has_zero_coupling_gap():
    N, R = 8, 10
    kernel = coded_kernel(C.PAIR_CONST, (0.3,), C.ADDITIVE, (1.0,))
    s = derive_stream(4, [("gap", 0)])
    init = init_states(s.child("init", 0), N, R)
    flow = constant_flow(*gauss_hermite_nodes(0.0, 1.0), 1.0)
    b = run_particles(kernel, init, 1.0, s, flow=flow)
    # zero up to rounding; the numpy backend sums the bracket in another order
    assert np.all(b.gap < 1e-28)
    np.testing.assert_allclose(b.x, b.xbar, rtol=0, atol=1e-14)
    assert chaos_error(b).value < 1e-28


def test_fluctuation_statistic_trivial_cases():
    N, R, T = 16, 2000, 1.0
    s = derive_stream(5, [("fl", 0)])
    init = np.zeros((R, N))
    zero = run_particles(coded_kernel(C.PAIR_CONST, (0.0,)), init, T, s, fluct=True)
    assert np.allclose(zero.Y, 0.0)
    c = 2.0
    const = run_particles(coded_kernel(C.PAIR_CONST, (c,)), init, T, s, fluct=True)
    f = fluctuation_stat(const)
    # compensated Poisson: Var Y = c^2 T
    assert f.variance == pytest.approx(c ** 2 * T, abs=5 * c ** 2 * T * math.sqrt(2 / R))


def test_exchangeability():
    N = 6
    kernel = coded_kernel(C.PAIR_SIN)
    s = derive_stream(7, [("ex", 0)])
    init = init_states(s.child("init", 0), N, 1)
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = run_particles(kernel, init, 1.0, s)
    b = run_particles(kernel, init[:, perm], 1.0, s, labels=perm)
    assert np.allclose(b.x[0], a.x[0, perm], rtol=1e-13, atol=1e-14)


def test_picard_flow_for_linear_attraction():
    # b[y, mu] = -(y - mean mu); the mean is conserved and nodes relax as e^{-t}
    kernel = coded_kernel(C.PAIR_ATTRACT, (1.0,))
    nodes, w = gauss_hermite_nodes(0.5, 1.0, K=16)
    flow = picard_flow(kernel, nodes, w, 1.0, h=1e-2)
    expected = 0.5 + (nodes - 0.5) * math.exp(-1.0)
    assert np.allclose(flow.at(1.0), expected, atol=1e-9)
    assert flow.method == "picard"


def test_picard_needs_drift_only_kernel():
    kernel = coded_kernel(C.PAIR_SIN, (1.0,), C.ADDITIVE, (1.0,))
    with pytest.raises(ValueError):
        picard_flow(kernel, np.zeros(3), np.ones(3) / 3, 1.0)
    with pytest.raises(PicardError):
        picard_flow(coded_kernel(C.PAIR_SIN), *gauss_hermite_nodes(0, 1, 8), 1.0, tol=0.0,
                    max_sweeps=3)


def test_gauss_hermite_moments():
    x, w = gauss_hermite_nodes(1.0, 2.0, K=32)
    assert w.sum() == pytest.approx(1.0)
    assert w @ x == pytest.approx(1.0)
    assert w @ (x - 1) ** 2 == pytest.approx(4.0)
    assert w @ (x - 1) ** 4 == pytest.approx(48.0)


def test_cloud_flow_shape_and_mean():
    kernel = coded_kernel(C.PAIR_ATTRACT, (1.0,), C.ADDITIVE, (1.0,))
    flow = cloud_flow(kernel, 256, 0.5, derive_stream(0, [("cloud", 0)]), h=0.1)
    assert flow.nodes.shape == (6, 256)
    assert abs(flow.at(0.5).mean() - flow.at(0.0).mean()) < 0.3


def test_coupled_replica_and_trajectory_csv():
    kernel = coded_kernel(C.PAIR_SIN)
    flow = constant_flow(np.zeros(1), np.ones(1), 1.0)
    s = derive_stream(2, [("cp", 0)])
    run = simulate_coupled(kernel, [0.1, -0.2, 0.4], 1.0, s, flow, record=True)
    assert run.gap.shape == (3,)
    buf = io.StringIO()
    write_trajectory_csv(run, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "event_idx,time,particle,x0"
    # one row per initial state, then one per tick
    assert len(lines) == 1 + 3 + int(run.n_events.sum())


def test_init_states():
    s = derive_stream(0, [("init", 0)])
    x = init_states(s, 100, 50)
    assert x.shape == (50, 100)
    assert np.array_equal(init_states(s, 100, 20, offset=30), x[30:])
    assert np.all(init_states(s, 3, 2, ("point", 1.5)) == 1.5)
    with pytest.raises(ValueError):
        init_states(s, 3, 2, ("uniform", 0, 1))
    with pytest.raises(ValueError):
        run_particles(coded_kernel(C.PAIR_SIN), np.zeros((2, 0)), 1.0, s)
