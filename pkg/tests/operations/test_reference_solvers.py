import math

import numpy as np
import pytest

from cpflow import _coeffs as C
from cpflow.reference import (closed_form_path, filippov_solve, gaussian_mollify, ou_exact,
                              rk4_solve)
from cpflow.scheme import coded


def linear(a):
    return lambda t, x: a * np.asarray(x)


def test_rk4_fourth_order():
    errs = []
    for h in (0.1, 0.05, 0.025):
        p = rk4_solve(linear(-1.0), [1.0], 2.0, h)
        errs.append(abs(p.x[-1, 0] - math.exp(-2.0)))
    rates = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(3.8 < r < 4.2 for r in rates)


def test_dense_output_is_accurate_between_nodes():
    p = rk4_solve(lambda t, x: np.cos(t) + 0 * np.asarray(x), [0.0], 3.0, 1e-2)
    t = np.linspace(0, 3, 997)
    assert np.max(np.abs(p.at(t)[:, 0] - np.sin(t))) < 1e-8


def test_closed_form_path_and_derivative():
    c = coded(C.LINEAR, (-1.0,))
    p = closed_form_path(lambda t, x0: np.exp(-t)[:, None] * x0, c.drift, np.array([1.0]), 1.0,
                         1e-3, "cubic")
    assert p.method == "closed_form"
    assert np.allclose(p.dx[:, 0], -np.exp(-p.t))


def test_mollifier_preserves_smooth_linear_drift():
    bd = gaussian_mollify(linear(2.0), 0.1, 1)
    x = np.array([[0.3, -1.2]])
    assert np.allclose(bd(np.zeros(2), x), 2.0 * x)


def test_mollified_quadratic_drift():
    # E (x + delta Z)^2 = x^2 + delta^2, exact for Gauss-Hermite nodes
    bd = gaussian_mollify(lambda t, x: np.asarray(x) ** 2, 0.1, 1)
    x = np.array([[0.05, -2.0]])
    assert np.allclose(bd(np.zeros(2), x), x ** 2 + 0.01)


def test_filippov_sign_solution_sticks_at_zero():
    c = coded(C.NEG_SIGN)
    p = filippov_solve(c.drift, [1.0], 2.0, 1e-3)
    exact = np.maximum(1.0 - p.t, 0.0)
    assert np.max(np.abs(p.x[:, 0] - exact)) < 2e-3
    assert p.method == "mollified"
    assert p.accuracy < 1e-2


def test_ou_moments():
    m, v = ou_exact(1.0, 1.0, 2.0, 3.0)
    assert m == pytest.approx(2.0 * math.exp(-3.0))
    assert v == pytest.approx((1 - math.exp(-6.0)) / 2)
    with pytest.raises(ValueError):
        ou_exact(0.0, 1.0, 0.0, 1.0)


def test_bad_step():
    with pytest.raises(ValueError):
        rk4_solve(linear(1.0), [1.0], 1.0, 0.0)
