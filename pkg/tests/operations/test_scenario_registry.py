import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from cpflow.nse2d import mesh
from cpflow.scenarios import (REGISTRY, UnknownScenarioError, get_scenario, names, residual_check,
                              square_wave, square_wave_integral)

QUANTITATIVE = ["oscillatory", "lipschitz_1d", "linear_ou", "filippov_sign", "mckean_sin",
                "taylor_green"]


def test_unknown_scenario_lists_registry():
    with pytest.raises(UnknownScenarioError) as e:
        get_scenario("nope")
    msg = str(e.value)
    for n in names():
        assert n in msg


@pytest.mark.parametrize("name", [n for n in sorted(REGISTRY)
                                  if REGISTRY[n].exact_solution is not None
                                  and REGISTRY[n].kind == "sde"])
def test_closed_forms_solve_their_odes(name):
    assert residual_check(get_scenario(name)) <= 1e-8


def test_residual_check_needs_closed_form():
    with pytest.raises(ValueError):
        residual_check(get_scenario("lipschitz_1d"))


def test_square_wave_integral():
    t = np.linspace(0, 1, 200_001)
    f = square_wave(t)
    num = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) / 2 * np.diff(t))])
    assert np.max(np.abs(num - square_wave_integral(t))) < 1e-2
    assert trapezoid(f ** 2, t) == pytest.approx(get_scenario("oscillatory").constants["int_f2"],
                                                rel=1e-3)


@pytest.mark.parametrize("name", QUANTITATIVE)
def test_quantitative_scenarios_carry_an_oracle_and_targets(name):
    s = get_scenario(name)
    assert not s.qualitative
    assert s.exact_solution is not None or s.oracle is not None
    assert s.targets


@pytest.mark.parametrize("name", ["stable_drift", "vortex_sobolev", "mckean_w1"])
def test_trend_only_scenarios_are_flagged(name):
    assert get_scenario(name).qualitative


def test_specs_are_frozen_and_hash_is_stable():
    s = get_scenario("linear_ou")
    with pytest.raises(dataclasses.FrozenInstanceError):
        s.T = 2.0
    with pytest.raises(TypeError):
        s.constants["burn_in"] = 0.0
    assert s.hash == get_scenario("linear_ou").hash
    assert len({get_scenario(n).hash for n in names()}) == len(names())


def test_drift_only_strips_noise():
    s = get_scenario("linear_ou")
    assert s.coeffs.has_noise
    assert not s.drift_only().has_noise


def test_taylor_green_problem_is_consistent():
    p = get_scenario("taylor_green").coeffs
    X1, X2 = mesh(p.G)
    assert np.allclose(p.exact_w(p.T, X1, X2), p.w0(X1, X2))
    u1, u2 = p.exact_u(0.0, X1, X2)
    assert np.max(np.abs(u1)) == pytest.approx(math.exp(-2 * p.nu * p.T), rel=1e-12)


def test_acceptance_grids():
    assert list(get_scenario("lipschitz_1d").eps_grid) == [2.0 ** -k for k in range(6, 15)]
    assert list(get_scenario("filippov_sign").eps_grid) == [2.0 ** -k for k in range(6, 13)]
    assert list(get_scenario("mckean_sin").n_grid) == [8, 16, 32, 64, 128, 256]
    assert list(get_scenario("taylor_green").eps_grid) == [0.02, 0.01, 0.005]
