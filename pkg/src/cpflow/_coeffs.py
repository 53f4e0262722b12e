"""Closed-form coefficient families addressable by integer code.

The jit kernels cannot call arbitrary Python callables, so every scenario
coefficient used in a hot loop is one of these families. Each family has a
scalar-loop version for the kernels and a vectorized numpy version with
identical arithmetic.
"""
import numpy as np

from ._jit import njit

# drifts b(t, x)
ZERO = 0
CONST = 1          # p = c (d entries)
LINEAR = 2         # p = A row-major (d*d entries)
SIN_COS = 3        # b = sin x + cos t (d = 1)
NEG_SIGN = 4       # b = -sign(x) componentwise
DOUBLE_WELL = 5    # b = x - x^3 componentwise
NEG_TANH = 6       # b = -p0 tanh(x) componentwise
SQUARE_WAVE = 7    # b(t) = p1 (1 - 2 ([p0 t] mod 2)) (d = 1)
VORTEX = 8         # b = (-x2, x1) |x|^{-p0} exp(-|x|^2 / p1) (d = 2)

# diffusions sigma(t, x, z)
NO_NOISE = 0
ADDITIVE = 1       # sigma = p0 z

# pair drifts b(t, x, y) for particle systems, componentwise
PAIR_CONST = 0     # b = p0
PAIR_ATTRACT = 1   # b = -p0 (x - y)
PAIR_SIN = 2       # b = sin(x - y)
PAIR_NEG_TANH = 3  # b = -p0 tanh(x - y)


@njit
def drift_eval(code, p, t, x, out):
    d = x.shape[0]
    if code == ZERO:
        for i in range(d):
            out[i] = 0.0
    elif code == CONST:
        for i in range(d):
            out[i] = p[i]
    elif code == LINEAR:
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += p[i * d + j] * x[j]
            out[i] = acc
    elif code == SIN_COS:
        out[0] = np.sin(x[0]) + np.cos(t)
    elif code == NEG_SIGN:
        for i in range(d):
            out[i] = -np.sign(x[i])
    elif code == DOUBLE_WELL:
        for i in range(d):
            out[i] = x[i] - x[i] * x[i] * x[i]
    elif code == NEG_TANH:
        for i in range(d):
            out[i] = -p[0] * np.tanh(x[i])
    elif code == SQUARE_WAVE:
        out[0] = p[1] * (1.0 - 2.0 * (np.floor(p[0] * t) % 2.0))
    elif code == VORTEX:
        r2 = x[0] * x[0] + x[1] * x[1]
        if r2 == 0.0:
            out[0] = 0.0
            out[1] = 0.0
        else:
            f = r2 ** (-0.5 * p[0]) * np.exp(-r2 / p[1])
            out[0] = -x[1] * f
            out[1] = x[0] * f


def drift_np(code, p, t, x):
    """Vectorized drift: t shape (K,), x shape (d, K) -> (d, K)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[1:])
    d = x.shape[0]
    if code == ZERO:
        return np.zeros_like(x)
    if code == CONST:
        return np.broadcast_to(np.asarray(p[:d], dtype=np.float64)[:, None], x.shape).copy()
    if code == LINEAR:
        A = np.asarray(p[:d * d]).reshape(d, d)
        out = np.zeros_like(x)
        # same accumulation order as the scalar loop
        for i in range(d):
            acc = np.zeros(x.shape[1:])
            for j in range(d):
                acc = acc + A[i, j] * x[j]
            out[i] = acc
        return out
    if code == SIN_COS:
        return (np.sin(x[0]) + np.cos(t))[None]
    if code == NEG_SIGN:
        return -np.sign(x)
    if code == DOUBLE_WELL:
        return x - x * x * x
    if code == NEG_TANH:
        return -p[0] * np.tanh(x)
    if code == SQUARE_WAVE:
        return (p[1] * (1.0 - 2.0 * (np.floor(p[0] * t) % 2.0)))[None]
    if code == VORTEX:
        r2 = x[0] * x[0] + x[1] * x[1]
        safe = np.where(r2 == 0.0, 1.0, r2)
        f = np.where(r2 == 0.0, 0.0, safe ** (-0.5 * p[0]) * np.exp(-r2 / p[1]))
        return np.stack([-x[1] * f, x[0] * f])
    raise ValueError(f"unknown drift code {code}")


@njit
def pair_eval(code, p, t, x, y):
    if code == PAIR_CONST:
        return p[0]
    if code == PAIR_ATTRACT:
        return -p[0] * (x - y)
    if code == PAIR_SIN:
        return np.sin(x - y)
    return -p[0] * np.tanh(x - y)


def pair_np(code, p, t, x, y):
    """Vectorized pair drift with broadcasting over x and y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if code == PAIR_CONST:
        return np.full(np.broadcast_shapes(x.shape, y.shape), float(p[0]))
    if code == PAIR_ATTRACT:
        return -p[0] * (x - y)
    if code == PAIR_SIN:
        return np.sin(x - y)
    if code == PAIR_NEG_TANH:
        return -p[0] * np.tanh(x - y)
    raise ValueError(f"unknown pair code {code}")
