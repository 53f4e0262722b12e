"""Deterministic oracles: RK4 with dense output, mollified Filippov solves, OU moments.

Nothing here touches random streams or scheme state.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .scheme import DivergenceError, GridReference


class NonConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReferencePath:
    t: np.ndarray        # (n,) strictly increasing, t[0] = 0
    x: np.ndarray        # (n, d)
    dx: np.ndarray       # (n, d) time derivative at the nodes
    method: str          # rk4 | mollified | closed_form
    accuracy: float = 0.0
    interp: str = "cubic"

    @property
    def h(self):
        return float(self.t[1] - self.t[0])

    def at(self, t):
        """Dense output: cubic Hermite (or linear) between grid nodes."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        k = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2)
        h = (self.t[k + 1] - self.t[k])[:, None]
        tau = ((t - self.t[k])[:, None]) / h
        x0, x1 = self.x[k], self.x[k + 1]
        if self.interp == "linear":
            return (1 - tau) * x0 + tau * x1
        t2, t3 = tau * tau, tau * tau * tau
        return ((2 * t3 - 3 * t2 + 1) * x0 + (t3 - 2 * t2 + tau) * h * self.dx[k]
                + (-2 * t3 + 3 * t2) * x1 + (t3 - t2) * h * self.dx[k + 1])

    def as_grid(self):
        """Kernel view; requires the uniform grid produced by the solvers here."""
        return GridReference(self.h, np.ascontiguousarray(self.x), np.ascontiguousarray(self.dx),
                             1 if self.interp == "linear" else 0)


def _grid(T, h):
    if h <= 0:
        raise ValueError("step h must be positive")
    n = max(1, int(round(T / h)))
    if abs(n * h - T) > 1e-12 * max(1.0, T):
        n = int(math.ceil(T / h))
    return np.linspace(0.0, T, n + 1)


def _rhs(b, d):
    def f(t, x):
        return np.asarray(b(np.array([t]), x.reshape(d, 1)), dtype=np.float64).reshape(d)
    return f


def rk4_solve(b, x0, T, h):
    """Classical RK4 for x' = b(t, x); b uses the (t (K,), x (d, K)) convention."""
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    d = x.size
    f = _rhs(b, d)
    t = _grid(T, h)
    xs = np.empty((t.size, d))
    dxs = np.empty((t.size, d))
    xs[0] = x
    for n in range(t.size - 1):
        s, hn = t[n], t[n + 1] - t[n]
        k1 = f(s, x)
        dxs[n] = k1
        k2 = f(s + hn / 2, x + hn / 2 * k1)
        k3 = f(s + hn / 2, x + hn / 2 * k2)
        k4 = f(s + hn, x + hn * k3)
        x = x + hn / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(n + 1, f"rk4 diverged at step {n + 1}")
        xs[n + 1] = x
    dxs[-1] = f(t[-1], x)
    return ReferencePath(t, xs, dxs, "rk4")


def closed_form_path(fn, b, x0, T, h, interp="linear"):
    """Sample an exact solution fn(t, x0) -> (n, d) on the grid."""
    t = _grid(T, h)
    x = np.asarray(fn(t, x0), dtype=np.float64).reshape(t.size, -1)
    d = x.shape[1]
    dx = np.asarray(b(t, x.T), dtype=np.float64).reshape(d, t.size).T
    return ReferencePath(t, x, dx, "closed_form", 0.0, interp)


def gaussian_mollify(b, delta, d, n_nodes=None):
    """b_delta(t, x) = E b(t, x + delta Z) with Z standard normal, by Gauss-Hermite quadrature."""
    n_nodes = n_nodes or (64 if d == 1 else 16)
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids])                       # (d, Q)
    weights = np.prod(np.meshgrid(*([w] * d), indexing="ij"), axis=0).ravel()
    q = weights.size

    def bd(t, x):
        x = np.asarray(x, dtype=np.float64).reshape(d, -1)
        k = x.shape[1]
        xx = (x[:, :, None] + delta * nodes[:, None, :]).reshape(d, k * q)
        tt = np.repeat(np.broadcast_to(np.asarray(t, dtype=np.float64), (k,)), q)
        vals = np.asarray(b(tt, xx)).reshape(d, k, q)
        return vals @ weights

    return bd


def filippov_solve(b, x0, T, h, delta_grid=(1e-1, 1e-2, 1e-3), closed_form=None, mollified=None):
    """Filippov solution of x' = b(t, x) for one-sided Lipschitz, possibly discontinuous b.

    With a closed form the exact path is returned. Otherwise the drift is
    mollified at each delta (``mollified(delta)`` if given, Gaussian quadrature
    if not), each problem is solved by RK4, and the sup gap between the two
    finest solutions is reported as the accuracy.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    d = x0.size
    if closed_form is not None:
        return closed_form_path(closed_form, b, x0, T, h)
    deltas = sorted(delta_grid, reverse=True)
    hs = min(h, deltas[-1] / 5)
    paths = []
    for delta in deltas:
        bd = mollified(delta) if mollified is not None else gaussian_mollify(b, delta, d)
        paths.append(rk4_solve(bd, x0, T, hs))
    gaps = [float(np.max(np.abs(p.x - q.x))) for p, q in zip(paths, paths[1:])]
    if any(g2 >= g1 for g1, g2 in zip(gaps, gaps[1:])):
        warnings.warn(f"mollified Cauchy gaps not decreasing: {gaps}", NonConvergenceWarning)
    last = paths[-1]
    return ReferencePath(last.t, last.x, last.dx, "mollified", gaps[-1] if gaps else math.nan)


def ou_exact(theta, sigma, x0, t):
    """Mean and variance of dX = -theta X dt + sigma dW at time t."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    mean = math.exp(-theta * t) * x0
    var = sigma ** 2 * (1 - math.exp(-2 * theta * t)) / (2 * theta)
    return mean, var
