"""Compound-Poisson integrator.

The state jumps at the ticks S_n of a Poisson clock of intensity 1/eps:

    Gamma_{n+1} = Gamma_n + sigma_eps(S_{n+1}, Gamma_n, xi_{n+1}) + b_eps(S_{n+1}, Gamma_n)

and X_t = Gamma_{N_t}. The drift increment is tamed for superlinear growth
and the noise is rescaled according to the stability index of the jump law.

Coefficient convention: ``drift(t, x)`` takes t of shape (K,) and x of shape
(d, K) and returns (d, K); ``diffusion(t, x, z)`` does the same with z of
shape (d, K) holding jump vectors.
"""
import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _coeffs as C
from ._jit import njit, resolve_backend
from ._philox import philox_block, u01
from ._pool import run_chunks
from .randomness import (TAG_PATH, build_jump_law, clock_times, exponential_from_uniform,
                         jump_from_words, required_iterations)

DIVERGENCE_BOUND = 1e12
BUDGET_SLACK = 60


class DivergenceError(RuntimeError):
    def __init__(self, step, msg=None):
        self.step = step
        super().__init__(msg or f"scheme diverged at step {step}")


class TruncationError(RuntimeError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientSet:
    drift: callable
    diffusion: callable = None
    d: int = 1
    m: float = 1.0
    alpha: float = 2.0
    taming: bool = None
    drift_grad: callable = None
    code: tuple = None   # (drift_code, drift_params, diff_code, diff_params) for jit kernels

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("growth exponent m must be >= 1")
        if self.taming is None:
            object.__setattr__(self, "taming", self.m > 1)

    @property
    def has_noise(self):
        return self.diffusion is not None


def coded(drift_code, drift_params=(), diff_code=C.NO_NOISE, diff_params=(), *, d=1, m=1.0,
          alpha=2.0, taming=None, drift_grad=None):
    """CoefficientSet backed by one of the closed-form families in ``_coeffs``."""
    dp = np.asarray(drift_params, dtype=np.float64).ravel()
    sp = np.asarray(diff_params, dtype=np.float64).ravel()
    if dp.size == 0:
        dp = np.zeros(1)
    if sp.size == 0:
        sp = np.zeros(1)

    def drift(t, x):
        return C.drift_np(drift_code, dp, t, x)

    diffusion = None
    if diff_code == C.ADDITIVE:
        def diffusion(t, x, z):
            return sp[0] * np.asarray(z, dtype=np.float64)

    return CoefficientSet(drift, diffusion, d, m, alpha, taming, drift_grad,
                          (int(drift_code), dp, int(diff_code), sp))


def _col(x, d):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(d, -1)


def _norm(v):
    return np.sqrt(np.sum(np.asarray(v, dtype=np.float64) ** 2, axis=0))


def tame_drift(b_val, m, eps, taming=True):
    """eps b / (1 + sqrt(eps) |b|^{1 - 1/m}); plain eps b when taming is off.

    b_val has the state on axis 0; extra axes are batch dimensions.
    """
    if m < 1:
        raise ValueError("growth exponent m must be >= 1")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    b = np.asarray(b_val, dtype=np.float64)
    if not taming:
        return eps * b
    nb = _norm(b) if b.ndim else np.abs(b)
    return (eps / (1.0 + math.sqrt(eps) * nb ** (1.0 - 1.0 / m))) * b


def scale_diffusion(coeffs, eps, t, x, z):
    """sqrt(eps) sigma(t, x, z) when alpha >= 2, sigma(t, x, eps^{1/alpha} z) otherwise."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    d = coeffs.d
    x = _col(x, d)
    z = _col(z, d).astype(np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[1:])
    if coeffs.diffusion is None:
        return np.zeros_like(x)
    if coeffs.alpha >= 2:
        return math.sqrt(eps) * coeffs.diffusion(t, x, z)
    return coeffs.diffusion(t, x, eps ** (1.0 / coeffs.alpha) * z)


def tamed_drift_at(coeffs, eps, t, x):
    x = _col(x, coeffs.d)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[1:])
    return tame_drift(coeffs.drift(t, x), coeffs.m, eps, coeffs.taming)


def step(state, S_next, xi, coeffs, eps, index=0):
    """One chain update from (t_prev, Gamma_n) at the next tick S_next with jump xi."""
    t_prev, g = state
    if not S_next > t_prev:
        raise ValueError("S_next must exceed the previous event time")
    g = _col(g, coeffs.d)
    new = (g + scale_diffusion(coeffs, eps, S_next, g, xi)) + tamed_drift_at(coeffs, eps, S_next, g)
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > DIVERGENCE_BOUND:
        raise DivergenceError(index)
    return new[:, 0] if np.ndim(state[1]) <= 1 else new


@dataclass(frozen=True)
class SchemePath:
    x0: np.ndarray
    eps: float
    T: float
    times: np.ndarray                     # S_1 < ... < S_N <= T
    states: np.ndarray                    # (N + 1, d), states[0] = x0
    jumps: np.ndarray = field(default=None, repr=False)   # (N, d)

    @property
    def n_events(self):
        return self.times.size


@functools.lru_cache(maxsize=16)
def default_law(alpha, d, cutoff=None):
    return build_jump_law(alpha, d, cutoff)


def _law_for(coeffs, law):
    if law is not None:
        return law
    if coeffs.diffusion is None or coeffs.alpha >= 2:
        return default_law(2.0, coeffs.d)
    return default_law(float(coeffs.alpha), coeffs.d)


def replay(coeffs, x0, eps, times, jumps, T=None):
    """Fold ``step`` over given event times and jumps; returns a SchemePath."""
    d = coeffs.d
    x = np.asarray(x0, dtype=np.float64).reshape(d).copy()
    states = np.empty((len(times) + 1, d))
    states[0] = x
    t_prev = 0.0
    for n, (s, z) in enumerate(zip(times, jumps)):
        x = step((t_prev, x), s, z, coeffs, eps, index=n + 1)
        states[n + 1] = x
        t_prev = s
    T = float(times[-1]) if T is None and len(times) else (0.0 if T is None else T)
    return SchemePath(states[0].copy(), float(eps), float(T), np.asarray(times, dtype=float),
                      states, np.asarray(jumps).reshape(len(times), d))


def simulate_path(coeffs, x0, eps, T, stream, replica=0, law=None, n_slack=BUDGET_SLACK):
    """Scheme path on [0, T] driven by the event-indexed draws of ``stream``."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if T <= 0:
        raise ValueError("T must be positive")
    law = _law_for(coeffs, law)
    times, words = clock_times(stream, eps, T, replica)
    if times.size > required_iterations(eps, T, n_slack):
        raise TruncationError(f"{times.size} events exceed the budget for eps={eps}, T={T}")
    jumps = jump_from_words(law, words[1], words[2], words[3]) if times.size else \
        np.zeros((0, coeffs.d), dtype=np.int64)
    return replay(coeffs, x0, eps, times, jumps, T)


def evaluate_path(path, t, left=False):
    """X_t = Gamma_{N_t} (right-continuous); left=True gives the left limit at jump times."""
    if t < 0 or t > path.T:
        raise RangeError(f"t={t} outside [0, {path.T}]")
    n = int(np.searchsorted(path.times, t, side="right"))
    if left and n > 0 and path.times[n - 1] == t:
        n -= 1
    return path.states[n]


def write_path_csv(path, fh):
    w = csv.writer(fh, lineterminator="\n")
    d = path.states.shape[1]
    w.writerow(["n", "S_n"] + [f"x{i}" for i in range(d)])
    w.writerow([0, repr(0.0)] + [repr(float(v)) for v in path.states[0]])
    for n, s in enumerate(path.times, start=1):
        w.writerow([n, repr(float(s))] + [repr(float(v)) for v in path.states[n]])


def generator_apply(f, t, x, coeffs, law, eps):
    """sum_z p(z) [f(x + sigma_eps(t, x, z) + b_eps(t, x)) - f(x)] / eps, exact over atoms.

    f maps (d, K) arrays to (K,) values.
    """
    d = coeffs.d
    x = np.asarray(x, dtype=np.float64).reshape(d, 1)
    atoms, p = law.atoms()
    z = atoms.T.astype(np.float64)
    k = z.shape[1]
    xs = np.broadcast_to(x, (d, k))
    tt = np.full(k, float(t))
    moved = (xs + scale_diffusion(coeffs, eps, tt, xs, z)) + tamed_drift_at(coeffs, eps, tt, xs)
    fx = f(x)[0]
    return float(np.sum(p * (f(moved) - fx)) / eps)


def tamed_gradient(coeffs, eps, t, x):
    """Jacobian of b_eps at a single point, from the analytic gradient of b."""
    d = coeffs.d
    xc = _col(x, d)
    tt = np.array([float(t)])
    b = coeffs.drift(tt, xc)[:, 0]
    G = np.asarray(coeffs.drift_grad(tt, xc), dtype=np.float64).reshape(d, d)
    if not coeffs.taming:
        return eps * G
    g = 1.0 - 1.0 / coeffs.m
    nb = float(np.sqrt(b @ b))
    D = 1.0 + math.sqrt(eps) * nb ** g
    if nb == 0.0 or g == 0.0:
        return eps * G / D
    dnorm = (b @ G) / nb                      # d|b|/dx_j
    dD = math.sqrt(eps) * g * nb ** (g - 1.0) * dnorm
    return eps * (G / D - np.outer(b, dD) / D ** 2)


@dataclass(frozen=True)
class JacobianFlow:
    matrices: np.ndarray    # (N + 1, d, d)
    det: np.ndarray         # (N + 1,)
    singular: bool


def path_jacobian(path, coeffs, eps):
    """J_{n+1} = (I + grad b_eps(S_{n+1}, Gamma_n)) J_n with J_0 = I."""
    if coeffs.drift_grad is None:
        raise ValueError("coefficient set carries no drift gradient")
    d = coeffs.d
    J = np.eye(d)
    mats = [J]
    for n, s in enumerate(path.times):
        J = (np.eye(d) + tamed_gradient(coeffs, eps, s, path.states[n])) @ J
        mats.append(J)
    mats = np.array(mats)
    det = np.linalg.det(mats)
    return JacobianFlow(mats, det, bool(np.any(np.abs(det) < 1e-12)))


# --------------------------------------------------------------------------
# batched simulation


@dataclass
class BatchResult:
    endpoints: np.ndarray          # (M, d); NaN rows for diverged replicas
    n_events: np.ndarray           # (M,)
    diverged: np.ndarray           # (M,) step index of divergence, -1 if none
    sup_err2: np.ndarray = None    # (M,) sup_t |X_t - reference(t)|^2
    time_avg: np.ndarray = None    # (M,) window average of the observable

    @property
    def n_diverged(self):
        return int(np.sum(self.diverged >= 0))


@dataclass(frozen=True)
class GridReference:
    """Reference trajectory on a uniform grid, as consumed by the kernels."""
    h: float
    x: np.ndarray       # (nn, d)
    dx: np.ndarray      # (nn, d)
    mode: int = 0       # 0 cubic Hermite, 1 piecewise linear


drift_eval_k = C.drift_eval

OBS_SQ = 0
OBS_X0 = 1
OBS_ONE = 2
_OBS = {"sq": OBS_SQ, "x": OBS_X0, "one": OBS_ONE}


@njit
def _ref_eval(t, h, rx, rdx, mode, out):
    nn = rx.shape[0]
    k = int(t / h)
    if k > nn - 2:
        k = nn - 2
    if k < 0:
        k = 0
    tau = (t - k * h) / h
    for i in range(rx.shape[1]):
        if mode == 1:
            out[i] = (1.0 - tau) * rx[k, i] + tau * rx[k + 1, i]
        else:
            t2 = tau * tau
            t3 = t2 * tau
            out[i] = ((2 * t3 - 3 * t2 + 1) * rx[k, i] + (t3 - 2 * t2 + tau) * h * rdx[k, i]
                      + (-2 * t3 + 3 * t2) * rx[k + 1, i] + (t3 - t2) * h * rdx[k + 1, i])


@njit
def _sq_gap(y, r):
    acc = 0.0
    for i in range(y.shape[0]):
        acc += (y[i] - r[i]) ** 2
    return acc


@njit
def _interval_sup(a, b, y, h, rx, rdx, mode, g, buf):
    """Max squared gap of the constant y against the reference on [a, b]; advances grid pointer g."""
    nn = rx.shape[0]
    _ref_eval(a, h, rx, rdx, mode, buf)
    best = _sq_gap(y, buf)
    while g < nn and g * h < b:
        if g * h >= a:
            for i in range(y.shape[0]):
                buf[i] = rx[g, i]
            e = _sq_gap(y, buf)
            if e > best:
                best = e
        g += 1
    _ref_eval(b, h, rx, rdx, mode, buf)
    e = _sq_gap(y, buf)
    if e > best:
        best = e
    return best, g


@njit
def _obs(code, y):
    if code == OBS_SQ:
        return _sq_gap(y, np.zeros_like(y))
    if code == OBS_X0:
        return y[0]
    return 1.0


@njit
def _overlap(a, b, w0, w1):
    lo = a if a > w0 else w0
    hi = b if b < w1 else w1
    return hi - lo if hi > lo else 0.0


@njit
def _scheme_kernel(key, r0, r1, x0, eps, T, m, taming, alpha, dcode, dpar, scode, spar,
                   half, aprob, aalias, max_events, ref_h, rx, rdx, rmode, w0, w1, obs,
                   out_end, out_n, out_div, out_sup, out_avg):
    d = x0.shape[0]
    k0 = key[0]
    k1 = key[1]
    tag = np.uint64(TAG_PATH)
    nh = aprob.shape[0]
    want_sup = ref_h > 0.0
    want_avg = w1 > w0
    zs = eps ** (1.0 / alpha) if alpha < 2.0 else 0.0
    sq = np.sqrt(eps)
    gexp = 1.0 - 1.0 / m
    y = np.empty(d)
    b = np.empty(d)
    buf = np.empty(d)
    for r in range(r0, r1):
        for i in range(d):
            y[i] = x0[i]
        tot = 0.0
        t_prev = 0.0
        n = 0
        g = 0
        sup = 0.0
        avg = 0.0
        div = -1
        while True:
            c = philox_block(np.uint64(n + 1), np.uint64(r), np.uint64(0), tag, k0, k1)
            tot += -np.log1p(-u01(c[0]))
            s = eps * tot
            if s > T:
                break
            n += 1
            if n > max_events:
                break
            if want_sup:
                e, g = _interval_sup(t_prev, s, y, ref_h, rx, rdx, rmode, g, buf)
                if e > sup:
                    sup = e
            if want_avg:
                avg += _obs(obs, y) * _overlap(t_prev, s, w0, w1)
            # jump through the alias table
            col = int(u01(c[1]) * nh)
            if col >= nh:
                col = nh - 1
            hh = col if u01(c[2]) < aprob[col] else aalias[col]
            sgn = -1.0 if (c[3] >> np.uint64(63)) == np.uint64(1) else 1.0
            drift_eval_k(dcode, dpar, s, y, b)
            nb = 0.0
            for i in range(d):
                nb += b[i] * b[i]
            if taming:
                fac = eps / (1.0 + sq * np.sqrt(nb) ** gexp)
            else:
                fac = eps
            big = False
            for i in range(d):
                if scode == C.ADDITIVE:
                    z = sgn * half[hh, i]
                    if alpha >= 2.0:
                        sig = sq * (spar[0] * z)
                    else:
                        sig = spar[0] * (zs * z)
                else:
                    sig = 0.0
                y[i] = (y[i] + sig) + fac * b[i]
                if not np.isfinite(y[i]) or abs(y[i]) > DIVERGENCE_BOUND:
                    big = True
            if big:
                div = n
                break
            t_prev = s
        if div < 0 and n <= max_events:
            if want_sup:
                e, g = _interval_sup(t_prev, T, y, ref_h, rx, rdx, rmode, g, buf)
                if e > sup:
                    sup = e
            if want_avg:
                avg += _obs(obs, y) * _overlap(t_prev, T, w0, w1)
        out_n[r - r0] = n
        out_div[r - r0] = div
        out_sup[r - r0] = sup
        out_avg[r - r0] = avg / (w1 - w0) if want_avg else 0.0
        for i in range(d):
            out_end[r - r0, i] = y[i] if div < 0 else np.nan



def _kernel_args(coeffs, law):
    if coeffs.code is None:
        raise ValueError("the numba backend needs a coded coefficient set; use backend='numpy'")
    dcode, dpar, scode, spar = coeffs.code
    return dcode, dpar, scode, spar, law.half_atoms, law.alias_prob, law.alias_idx


def _batch_numba(coeffs, law, key, x0, eps, T, M, reference, window, obs, workers, offset,
                 max_events):
    d = coeffs.d
    dcode, dpar, scode, spar, half, aprob, aalias = _kernel_args(coeffs, law)
    if reference is None:
        ref_h, rx, rdx, rmode = 0.0, np.zeros((2, d)), np.zeros((2, d)), 0
    else:
        ref_h, rx, rdx, rmode = reference.h, reference.x, reference.dx, reference.mode
    w0, w1 = (0.0, 0.0) if window is None else window
    end = np.empty((M, d))
    nev = np.empty(M, dtype=np.int64)
    div = np.empty(M, dtype=np.int64)
    sup = np.empty(M)
    avg = np.empty(M)

    def work(a, b):
        _scheme_kernel(key, offset + a, offset + b, x0, eps, T, float(coeffs.m), bool(coeffs.taming),
                       float(coeffs.alpha), dcode, dpar, scode, spar, half, aprob, aalias,
                       max_events, ref_h, rx, rdx, rmode, w0, w1, obs,
                       end[a:b], nev[a:b], div[a:b], sup[a:b], avg[a:b])

    run_chunks(work, M, workers)
    return end, nev, div, sup, avg


def _batch_numpy(coeffs, law, key, x0, eps, T, M, reference, window, obs, workers, offset,
                 max_events):
    """Replicas advance in lock-step; arithmetic mirrors the jit kernel."""
    from ._philox import philox_np, u01_np
    d = coeffs.d
    reps = np.arange(offset, offset + M, dtype=np.uint64)
    y = np.tile(np.asarray(x0, dtype=np.float64)[:, None], (1, M))
    tot = np.zeros(M)
    t_prev = np.zeros(M)
    nev = np.zeros(M, dtype=np.int64)
    div = np.full(M, -1, dtype=np.int64)
    active = np.ones(M, dtype=bool)
    w0, w1 = (0.0, 0.0) if window is None else window
    avg = np.zeros(M)
    keep = reference is not None
    hist_t, hist_y = [], []
    n = 0
    while active.any():
        n += 1
        idx = np.flatnonzero(active)
        c = philox_np(np.uint64(n), reps[idx], 0, np.uint64(TAG_PATH), key[0], key[1])
        tot[idx] = tot[idx] + (-np.log1p(-u01_np(c[0])))
        s = eps * tot[idx]
        done = s > T
        over = (~done) & (n > max_events)
        nev[idx[over]] = n
        stop = done | over
        active[idx[stop]] = False
        go = ~stop
        idx, s = idx[go], s[go]
        c = tuple(w[go] for w in c)
        if idx.size == 0:
            break
        nev[idx] = n
        if window is not None:
            avg[idx] += _obs_np(obs, y[:, idx]) * _overlap_np(t_prev[idx], s, w0, w1)
        z = jump_from_words(law, c[1], c[2], c[3]).T.astype(np.float64)
        yi = y[:, idx]
        new = (yi + scale_diffusion(coeffs, eps, s, yi, z)) + tamed_drift_at(coeffs, eps, s, yi)
        bad = ~np.all(np.isfinite(new) & (np.abs(new) <= DIVERGENCE_BOUND), axis=0)
        if bad.any():
            div[idx[bad]] = n
            active[idx[bad]] = False
            new[:, bad] = np.nan
        y[:, idx] = new
        t_prev[idx] = s
        if keep:
            hist_t.append((idx.copy(), s.copy()))
            hist_y.append(new.copy())
    ok = div < 0
    if window is not None:
        avg[ok] += _obs_np(obs, y[:, ok]) * _overlap_np(t_prev[ok], T, w0, w1)
        avg = avg / (w1 - w0)
    sup = np.zeros(M)
    if keep:
        sup = _sup_from_history(x0, T, M, hist_t, hist_y, reference, d)
        sup[~ok] = 0.0
    return y.T.copy(), nev, div, sup, avg


def _obs_np(code, y):
    if code == OBS_SQ:
        return np.sum(y * y, axis=0)
    if code == OBS_X0:
        return y[0]
    return np.ones(y.shape[1])


def _overlap_np(a, b, w0, w1):
    return np.maximum(np.minimum(b, w1) - np.maximum(a, w0), 0.0)


def _ref_eval_np(ref, t):
    rx, rdx, h = ref.x, ref.dx, ref.h
    nn = rx.shape[0]
    k = np.clip((t / h).astype(np.int64), 0, nn - 2)
    tau = ((t - k * h) / h)[:, None]
    if ref.mode == 1:
        return (1.0 - tau) * rx[k] + tau * rx[k + 1]
    t2 = tau * tau
    t3 = t2 * tau
    return ((2 * t3 - 3 * t2 + 1) * rx[k] + (t3 - 2 * t2 + tau) * h * rdx[k]
            + (-2 * t3 + 3 * t2) * rx[k + 1] + (t3 - t2) * h * rdx[k + 1])


def _sup_from_history(x0, T, M, hist_t, hist_y, ref, d):
    """Same checkpoints as the kernel: both sides of every jump, grid nodes, and T."""
    per_t = [[] for _ in range(M)]
    per_y = [[] for _ in range(M)]
    for (idx, s), yv in zip(hist_t, hist_y):
        for j, r in enumerate(idx):
            per_t[r].append(s[j])
            per_y[r].append(yv[:, j])
    nn = ref.x.shape[0]
    grid_t = np.arange(nn) * ref.h
    grid_t = grid_t[grid_t <= T]
    out = np.zeros(M)
    for r in range(M):
        times = np.asarray(per_t[r], dtype=np.float64)
        states = np.vstack([np.asarray(x0, dtype=np.float64)[None]] +
                           ([np.asarray(per_y[r])] if times.size else []))
        # left and right values at each jump, plus the start and T
        ct = np.concatenate([[0.0], times, times, [T], grid_t])
        cy = np.concatenate([states[:1], states[:-1], states[1:], states[-1:],
                             states[np.searchsorted(times, grid_t, side="right")]])
        gap = np.sum((cy - _ref_eval_np(ref, ct)) ** 2, axis=1)
        if grid_t.size:
            gap[-grid_t.size:] = np.sum((cy[-grid_t.size:] - ref.x[:grid_t.size]) ** 2, axis=1)
        out[r] = gap.max()
    return out


def simulate_batch(coeffs, x0, eps, T, stream, replicas, *, law=None, reference=None, window=None,
                   observable="sq", backend=None, workers=None, replica_offset=0,
                   n_slack=BUDGET_SLACK):
    """Run ``replicas`` independent scheme paths; replica r uses the event counters of index r."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    law = _law_for(coeffs, law)
    backend = resolve_backend(backend)
    if backend == "numba" and coeffs.code is None:
        backend = "numpy"
    x0 = np.asarray(x0, dtype=np.float64).reshape(coeffs.d)
    max_events = required_iterations(eps, T, n_slack)
    fn = _batch_numba if backend == "numba" else _batch_numpy
    end, nev, div, sup, avg = fn(coeffs, law, stream.key_array, x0, float(eps), float(T),
                                 int(replicas), reference, window, _OBS[observable], workers,
                                 int(replica_offset), max_events)
    if np.any(nev > max_events):
        raise TruncationError(f"event budget {max_events} exceeded for eps={eps}, T={T}")
    return BatchResult(end, nev, div, sup if reference is not None else None,
                       avg if window is not None else None)
