import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpflow import _coeffs as C
from cpflow.experiments import scheme_second_moment
from cpflow.randomness import build_jump_law, derive_stream
from cpflow.scheme import (DivergenceError, RangeError, coded, evaluate_path, generator_apply,
                           path_jacobian, replay, simulate_batch, simulate_path, step, tame_drift,
                           write_path_csv)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1.0, 5.0), st.floats(1e-6, 1.0))
def test_taming_bounds(b, m, eps):
    t = float(tame_drift(np.array(b), m, eps))
    assert abs(t) <= eps * abs(b) * (1 + 1e-12)
    assert abs(t) <= math.sqrt(eps) * abs(b) ** (1 / m) * (1 + 1e-12) + 1e-300
    assert np.sign(t) == np.sign(b)


def test_taming_off_is_plain_euler():
    assert float(tame_drift(np.array(3.0), 1.0, 0.01, taming=False)) == pytest.approx(0.03)
    with pytest.raises(ValueError):
        tame_drift(np.array(1.0), 0.5, 0.1)
    with pytest.raises(ValueError):
        tame_drift(np.array(1.0), 1.0, 1.5)


def test_linear_drift_path_is_geometric():
    a, eps = -0.7, 0.05
    c = coded(C.LINEAR, (a,), drift_grad=lambda t, x: np.full(x.shape, a))
    p = simulate_path(c, [2.0], eps, 1.5, derive_stream(0, [("geo", 0)]))
    n = np.arange(p.n_events + 1)
    assert np.allclose(p.states[:, 0], 2.0 * (1 + eps * a) ** n, rtol=1e-13)
    jac = path_jacobian(p, c, eps)
    assert np.allclose(jac.matrices[:, 0, 0], (1 + eps * a) ** n, rtol=1e-13)
    assert not jac.singular


def test_step_matches_replay_and_rejects_time_reversal():
    c = coded(C.SIN_COS, (), C.ADDITIVE, (0.5,))
    times = np.array([0.1, 0.25, 0.3])
    jumps = np.array([[1], [-1], [1]])
    path = replay(c, [0.2], 0.1, times, jumps, T=0.5)
    x = np.array([0.2])
    t = 0.0
    for s, z in zip(times, jumps):
        x = step((t, x), s, z, c, 0.1)
        t = s
    assert np.array_equal(path.states[-1], x)
    with pytest.raises(ValueError):
        step((0.3, x), 0.3, jumps[0], c, 0.1)


def test_path_is_right_continuous():
    c = coded(C.CONST, (1.0,))
    p = replay(c, [0.0], 0.1, np.array([0.2, 0.5]), np.zeros((2, 1)), T=1.0)
    assert evaluate_path(p, 0.2)[0] == pytest.approx(0.1)
    assert evaluate_path(p, 0.2, left=True)[0] == 0.0
    assert evaluate_path(p, 1.0)[0] == pytest.approx(0.2)
    with pytest.raises(RangeError):
        evaluate_path(p, 1.5)


def test_generator_is_exact_on_polynomials():
    sigma, eps, x = 0.8, 0.05, 0.3
    c = coded(C.SIN_COS, (), C.ADDITIVE, (sigma,))
    law = build_jump_law(2.0, 1)
    b = math.sin(x) + math.cos(0.4)
    g1 = generator_apply(lambda y: y[0], 0.4, [x], c, law, eps)
    g2 = generator_apply(lambda y: y[0] ** 2, 0.4, [x], c, law, eps)
    assert g1 == pytest.approx(b, rel=1e-12)
    assert g2 == pytest.approx(2 * x * b + eps * b ** 2 + sigma ** 2, rel=1e-12)


def test_batch_replica_matches_single_path():
    c = coded(C.SIN_COS, (), C.ADDITIVE, (0.5,))
    s = derive_stream(11, [("batch", 0)])
    b = simulate_batch(c, [0.1], 0.02, 1.0, s, 6)
    for r in range(6):
        p = simulate_path(c, [0.1], 0.02, 1.0, s, replica=r)
        assert p.n_events == b.n_events[r]
        assert p.states[-1, 0] == pytest.approx(b.endpoints[r, 0], rel=1e-13, abs=1e-15)


def test_replica_offset_selects_the_same_paths():
    c = coded(C.SIN_COS, (), C.ADDITIVE, (0.5,))
    s = derive_stream(11, [("offset", 0)])
    full = simulate_batch(c, [0.1], 0.02, 1.0, s, 10)
    tail = simulate_batch(c, [0.1], 0.02, 1.0, s, 4, replica_offset=6)
    assert np.array_equal(full.endpoints[6:], tail.endpoints)


def test_constant_drift_has_compound_poisson_variance():
    cval, eps, T, M = 2.0, 0.01, 1.0, 20000
    b = simulate_batch(coded(C.CONST, (cval,)), [0.0], eps, T, derive_stream(2, [("cp", 0)]), M)
    x = b.endpoints[:, 0]
    assert abs(x.mean() - cval * T) < 4 * math.sqrt(eps * cval ** 2 * T / M)
    # Var = eps c^2 T; the sample variance has relative sd about sqrt(2 / M)
    assert x.var(ddof=1) / (eps * cval ** 2 * T) == pytest.approx(1.0, abs=5 * math.sqrt(2 / M))


def test_drift_only_linear_second_moment():
    a, eps, T, M = -1.0, 0.1, 1.0, 50000
    b = simulate_batch(coded(C.LINEAR, (a,)), [1.0], eps, T, derive_stream(4, [("wk", 0)]), M)
    y = b.endpoints[:, 0] ** 2
    exact = scheme_second_moment(a, eps, T, 1.0)
    assert exact == pytest.approx(math.exp((eps - 2) * T), rel=1e-12)
    assert abs(y.mean() - exact) < 4 * y.std() / math.sqrt(M)


def test_untamed_superlinear_drift_diverges():
    c = coded(C.DOUBLE_WELL, (), m=3.0, taming=False)
    with pytest.raises(DivergenceError):
        simulate_path(c, [10.0], 1.0, 50.0, derive_stream(0, [("div", 0)]))
    b = simulate_batch(c, [10.0], 1.0, 50.0, derive_stream(0, [("div", 0)]), 3)
    assert b.n_diverged == 3
    assert np.all(np.isnan(b.endpoints))


def test_tamed_superlinear_drift_stays_bounded():
    c = coded(C.DOUBLE_WELL, (), m=3.0)
    b = simulate_batch(c, [10.0], 0.5, 50.0, derive_stream(0, [("div", 0)]), 50)
    assert b.n_diverged == 0
    assert np.all(np.abs(b.endpoints) < 2)


def test_stable_noise_scaling():
    c = coded(C.ZERO, (), C.ADDITIVE, (1.0,), alpha=1.5)
    p = simulate_path(c, [0.0], 0.01, 1.0, derive_stream(1, [("st", 0)]))
    inc = np.diff(p.states[:, 0])
    assert np.allclose(inc, 0.01 ** (1 / 1.5) * p.jumps[:, 0])


def test_write_path_csv():
    c = coded(C.CONST, (1.0,))
    p = replay(c, [0.0], 0.1, np.array([0.2, 0.5]), np.zeros((2, 1)), T=1.0)
    buf = io.StringIO()
    write_path_csv(p, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "n,S_n,x0"
    assert len(lines) == 4
    assert lines[2].startswith("1,0.2,")


def test_invalid_eps_and_horizon():
    c = coded(C.CONST, (1.0,))
    s = derive_stream(0, [("bad", 0)])
    with pytest.raises(ValueError):
        simulate_path(c, [0.0], 0.0, 1.0, s)
    with pytest.raises(ValueError):
        simulate_path(c, [0.0], 0.1, 0.0, s)
    with pytest.raises(ValueError):
        simulate_batch(c, [0.0], 2.0, 1.0, s, 3)
