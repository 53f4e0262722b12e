import math

import numpy as np
import pytest

from cpflow.nse2d import (NonConvergenceError, jump_only_mean, mesh, solve_nse_poisson,
                          sparse_modes, taylor_green_exact_w, taylor_green_u0, taylor_green_w0,
                          transported_mean)
from cpflow.randomness import derive_stream

G = 8


def tg_modes():
    X1, X2 = mesh(G)
    return sparse_modes(taylor_green_w0(X1, X2) + 0.5 * np.sin(X1 + 2 * X2))


def test_campbell_mean_against_direct_monte_carlo():
    # marked Poisson sum over (r, T] with piecewise-constant maps A_m and drifts a_m
    rng = np.random.default_rng(0)
    modes = tg_modes()
    S, P, nsub, eps, jump, T = 2, 3, 6, 0.05, 0.3, 0.6
    anchor = rng.uniform(-3, 3, (S, P, 2))
    tmaps = np.eye(2) + 0.3 * rng.standard_normal((S, P, nsub, 2, 2))
    dvec = rng.standard_normal((S, P, nsub, 2))
    k = 1
    hsub = T / nsub
    m0 = k * nsub // S
    exact = transported_mean(modes, anchor, tmaps, dvec, k, eps, jump, T)
    n = 200_000
    axes = np.array([[1.0, 0.0], [0.0, 1.0]])
    for p in range(P):
        total = np.zeros((n, 2))
        for m in range(m0, nsub):
            cnt = rng.poisson(hsub / eps, n)
            idx = np.repeat(np.arange(n), cnt)
            xi = axes[rng.integers(0, 2, idx.size)] * rng.choice([-1.0, 1.0], (idx.size, 1))
            inc = eps * dvec[k, p, m] + jump * xi @ tmaps[k, p, m].T
            np.add.at(total, idx, inc)
        vals = modes(anchor[k, p, 0] + total[:, 0], anchor[k, p, 1] + total[:, 1])
        se = vals.std() / math.sqrt(n)
        assert abs(vals.mean() - exact[p]) < 5 * se


def test_identity_maps_reduce_to_jump_only_mean():
    modes = tg_modes()
    S, P, nsub, eps, jump, T = 4, 5, 8, 0.02, 0.2, 0.5
    rng = np.random.default_rng(1)
    anchor = rng.uniform(-3, 3, (S, P, 2))
    tmaps = np.broadcast_to(np.eye(2), (S, P, nsub, 2, 2)).copy()
    dvec = np.zeros((S, P, nsub, 2))
    for k in range(S):
        got = transported_mean(modes, anchor, tmaps, dvec, k, eps, jump, T)
        want = jump_only_mean(modes, T - k * T / S, eps, jump, anchor[k, :, 0], anchor[k, :, 1])
        assert np.allclose(got, want, atol=1e-13)


def test_constant_vorticity_is_preserved_exactly():
    r = solve_nse_poisson(np.full((G, G), 0.7), 0.3, 0.05, 0.5, derive_stream(0, [("c", 0)]),
                          M=40, G=G, slices=2)
    assert np.allclose(r.w, 0.7, atol=1e-14)
    assert np.allclose(r.u, 0.0, atol=1e-14)


def test_zero_velocity_control_variate_is_exact():
    # with no drift the companion equals the path, so the estimate is the exact jump mean
    X1, X2 = mesh(G)
    w0 = taylor_green_w0(X1, X2)
    eps, nu, T, S = 0.05, 0.1, 0.5, 2
    r = solve_nse_poisson(w0, nu, eps, T, derive_stream(0, [("z", 0)]), M=40, G=G, slices=S,
                          frozen_velocity=np.zeros((S, 2, G, G)))
    modes = sparse_modes(w0)
    jump = 2 * math.sqrt(eps * nu)
    for k in range(S):
        want = jump_only_mean(modes, T - k * T / S, eps, jump, X1.ravel(), X2.ravel())
        assert np.allclose(r.w[k].ravel(), want, atol=1e-12)


def test_control_variate_does_not_shift_the_estimate():
    X1, X2 = mesh(G)
    w0 = taylor_green_w0(X1, X2)
    S = 2
    u = np.stack([np.stack(taylor_green_u0(X1, X2))] * S)
    s = derive_stream(5, [("cv", 0)])
    on = solve_nse_poisson(w0, 0.1, 0.05, 0.5, s, M=4000, G=G, slices=S, frozen_velocity=u)
    off = solve_nse_poisson(w0, 0.1, 0.05, 0.5, s.child("off", 0), M=4000, G=G, slices=S,
                            frozen_velocity=u, control_variate=False)
    gap = np.max(np.abs(on.u - off.u), axis=(1, 2, 3))
    assert np.all(gap < 4 * np.hypot(on.noise_floor, off.noise_floor))
    assert np.all(on.noise_floor < off.noise_floor)


def test_taylor_green_small_run_converges():
    X1, X2 = mesh(16)
    r = solve_nse_poisson(taylor_green_w0, 0.1, 0.02, 0.5, derive_stream(1, [("tg", 0)]), M=200,
                          G=16, slices=4)
    assert r.converged
    assert all(b < a for a, b in zip(r.gaps, r.gaps[1:]))
    want = np.stack(taylor_green_u0(X1, X2)) * math.exp(-2 * 0.1 * 0.5)
    assert np.max(np.abs(r.u[0] - want)) < 0.01
    assert r.u.shape == (4, 2, 16, 16)
    ex = taylor_green_exact_w(0.0, 0.1, 0.5, X1, X2)
    assert np.max(np.abs(r.w[0] - ex)) < 0.02


def test_invalid_arguments():
    s = derive_stream(0, [("bad", 0)])
    w0 = np.zeros((G, G))
    with pytest.raises(ValueError):
        solve_nse_poisson(w0, 0.1, 1.5, 0.5, s, M=8, G=G)
    with pytest.raises(ValueError):
        solve_nse_poisson(w0, -0.1, 0.1, 0.5, s, M=8, G=G)
    with pytest.raises(ValueError):
        solve_nse_poisson(w0, 0.1, 0.1, 0.5, s, M=6, G=G)


def test_nonconvergence_error_carries_gaps():
    e = NonConvergenceError([1.0, 2.0])
    assert e.gaps == [1.0, 2.0]
    assert "not decreasing" in str(e)
