"""Interacting particle systems driven by N independent Poisson clocks.

Each of the N particles ticks at intensity N (eps = 1/N). At a tick of
particle i at time s with jump xi,

    x_i += sigma_N[s, x_i, mu^N, xi] + (1/N) sum_j b_N(s, x_i, x_j)

where b_N is the tamed pair drift and mu^N the empirical measure just
before the tick. The coupled copy Xbar^i uses the same ticks and jumps but
evaluates the bracket against the limit flow mu_t. States are scalar.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _coeffs as C
from ._jit import njit, resolve_backend
from ._philox import philox_block, u01, philox_np, u01_np
from ._pool import run_chunks
from .randomness import TAG_INIT, TAG_PARTICLE, build_jump_law, exponential_from_uniform, \
    jump_from_words
from .scheme import DIVERGENCE_BOUND, DivergenceError
from .stats import mean_ci, Z95


@dataclass(frozen=True)
class KernelSet:
    pair_drift: callable                 # b(t, x, y), broadcasting
    pair_diffusion: callable = None      # sigma(t, x, y, z), odd in z
    m: float = 1.0
    alpha: float = 2.0
    taming: bool = None
    code: tuple = None                   # (pair_code, params, diff_code, diff_params)
    mean_field_closed_form: bool = False  # bracket depends on mu only through its mean
    constants: dict = None

    def __post_init__(self):
        if self.taming is None:
            object.__setattr__(self, "taming", self.m > 1)

    def bracket(self, t, x, ys, weights=None):
        """b[t, x, mu] for mu = sum_k w_k delta_{y_k}; x may be an array."""
        x = np.asarray(x, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        w = np.full(ys.size, 1.0 / ys.size) if weights is None else np.asarray(weights)
        return self.pair_drift(t, x[..., None], ys) @ w


def coded_kernel(pair_code, params=(1.0,), diff_code=C.NO_NOISE, diff_params=(1.0,), *, m=1.0,
                 alpha=2.0, taming=None, mean_field_closed_form=False, constants=None):
    pp = np.asarray(params, dtype=np.float64).ravel()
    sp = np.asarray(diff_params, dtype=np.float64).ravel()

    def b(t, x, y):
        return C.pair_np(pair_code, pp, t, x, y)

    sig = None
    if diff_code == C.ADDITIVE:
        def sig(t, x, y, z):
            return sp[0] * np.asarray(z, dtype=np.float64) + 0.0 * np.asarray(x)

    return KernelSet(b, sig, m, alpha, taming, (int(pair_code), pp, int(diff_code), sp),
                     mean_field_closed_form, constants or {})


# --------------------------------------------------------------------------
# limit measure flows


@dataclass(frozen=True)
class MeasureFlow:
    """mu_t = sum_k w_k delta_{y_k(t)} with node paths tabulated on a uniform grid."""
    h: float
    nodes: np.ndarray      # (nt, K)
    weights: np.ndarray    # (K,)
    method: str = "nodes"
    sweeps: int = 0

    @property
    def T(self):
        return self.h * (self.nodes.shape[0] - 1)

    def at(self, t):
        nt = self.nodes.shape[0]
        k = min(max(int(t / self.h), 0), nt - 2)
        tau = (t - k * self.h) / self.h
        return (1.0 - tau) * self.nodes[k] + tau * self.nodes[k + 1]

    def bracket(self, kernel, t, x):
        return kernel.bracket(t, x, self.at(t), self.weights)

    def mean_sq_drift_integral(self, kernel):
        """int_0^T sum_k w_k |b[s, y_k(s), mu_s]|^2 ds by the trapezoid rule."""
        nt = self.nodes.shape[0]
        vals = np.empty(nt)
        for n in range(nt):
            y = self.nodes[n]
            bb = kernel.bracket(n * self.h, y, y, self.weights)
            vals[n] = np.sum(self.weights * bb ** 2)
        return float(np.sum(0.5 * (vals[1:] + vals[:-1])) * self.h)


class PicardError(RuntimeError):
    pass


def constant_flow(points, weights, T, h=1e-2):
    """Flow frozen at the given atoms (exact for brackets that only see a conserved mean)."""
    pts = np.asarray(points, dtype=np.float64).ravel()
    nt = int(math.ceil(T / h)) + 1
    return MeasureFlow(h, np.tile(pts, (nt, 1)), np.asarray(weights, dtype=np.float64),
                       "closed_form")


def gauss_hermite_nodes(mean, sd, K=64):
    """Weighted nodes reproducing a normal law for smooth integrands."""
    z, w = np.polynomial.hermite_e.hermegauss(K)
    return mean + sd * z, w / w.sum()


def picard_flow(kernel, nodes0, weights, T, h=1e-3, tol=1e-8, max_sweeps=50):
    """Limit flow of the drift-only system by Picard iteration over node paths.

    Sweep n freezes mu^{n-1}, moves every node by RK4 under b[t, y, mu^{n-1}_t]
    (cubic Hermite in time between grid nodes of the frozen flow) and stops
    when the sup gap between sweeps falls below tol.
    """
    if kernel.pair_diffusion is not None:
        raise ValueError("Picard node flow needs a drift-only kernel; use cloud_flow")
    y0 = np.asarray(nodes0, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64)
    nt = int(round(T / h)) + 1
    h = T / (nt - 1)
    Y = np.tile(y0, (nt, 1))
    dY = np.zeros_like(Y)
    gaps = []

    def frozen(n, tau):
        h00 = 2 * tau ** 3 - 3 * tau ** 2 + 1
        h10 = tau ** 3 - 2 * tau ** 2 + tau
        h01 = -2 * tau ** 3 + 3 * tau ** 2
        h11 = tau ** 3 - tau ** 2
        if n >= nt - 1:
            return Y[-1]
        return h00 * Y[n] + h10 * h * dY[n] + h01 * Y[n + 1] + h11 * h * dY[n + 1]

    for sweep in range(1, max_sweeps + 1):
        newY = np.empty_like(Y)
        newdY = np.empty_like(Y)
        y = y0.copy()
        newY[0] = y
        for n in range(nt - 1):
            t = n * h
            mu0, mu_half, mu1 = Y[n], frozen(n, 0.5), Y[n + 1]
            k1 = kernel.bracket(t, y, mu0, w)
            newdY[n] = k1
            k2 = kernel.bracket(t + h / 2, y + h / 2 * k1, mu_half, w)
            k3 = kernel.bracket(t + h / 2, y + h / 2 * k2, mu_half, w)
            k4 = kernel.bracket(t + h, y + h * k3, mu1, w)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            newY[n + 1] = y
        newdY[-1] = kernel.bracket(T, y, Y[-1], w)
        gap = float(np.max(np.abs(newY - Y)))
        gaps.append(gap)
        Y, dY = newY, newdY
        if gap < tol:
            return MeasureFlow(h, Y, w, "picard", sweep)
        if len(gaps) > 10 and gaps[-1] >= gaps[-11]:
            raise PicardError(f"Picard sweeps not contracting: {gaps}")
    raise PicardError(f"Picard did not reach tol={tol} in {max_sweeps} sweeps: {gaps[-5:]}")


def cloud_flow(kernel, N_cloud, T, stream, init=("normal", 0.0, 1.0), h=1e-2, backend=None):
    """Flow approximated by one large particle system snapshotted on a time grid."""
    nt = int(round(T / h)) + 1
    h = T / (nt - 1)
    x0 = init_states(stream, N_cloud, 1, init)
    res = run_particles(kernel, x0, T, stream.child("cloud", 0), snap_h=h, backend=backend,
                        workers=1)
    return MeasureFlow(h, res.snapshots[0], np.full(N_cloud, 1.0 / N_cloud), "cloud")


# --------------------------------------------------------------------------
# initial states


def init_states(stream, N, replicas, init=("normal", 0.0, 1.0), offset=0):
    """i.i.d. initial states, shape (replicas, N); counters (i, r, 0, TAG_INIT)."""
    kind = init[0]
    if kind == "point":
        return np.full((replicas, N), float(init[1]))
    if kind != "normal":
        raise ValueError(f"unknown initial law {kind!r}")
    from scipy.special import ndtri
    i = np.arange(N, dtype=np.uint64)[None, :]
    r = np.arange(offset, offset + replicas, dtype=np.uint64)[:, None]
    w = stream.block(i, r, 0, TAG_INIT)[0]
    u = ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return init[1] + init[2] * ndtri(u)


# --------------------------------------------------------------------------
# kernels


@njit
def _tame1(b, eps, sq, gexp, taming):
    if taming:
        return eps * b / (1.0 + sq * abs(b) ** gexp)
    return b


@njit
def _flow_bracket(pcode, ppar, s, x, fh, fy, fw, eps, sq, gexp, taming):
    nt = fy.shape[0]
    k = int(s / fh)
    if k > nt - 2:
        k = nt - 2
    tau = (s - k * fh) / fh
    acc = 0.0
    for q in range(fy.shape[1]):
        y = (1.0 - tau) * fy[k, q] + tau * fy[k + 1, q]
        acc += fw[q] * _tame1(C.pair_eval(pcode, ppar, s, x, y), eps, sq, gexp, taming)
    return acc if taming else eps * acc


@njit
def _total_bracket(pcode, ppar, s, x):
    n = x.shape[0]
    tot = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += C.pair_eval(pcode, ppar, s, x[i], x[j])
        tot += acc / n
    return tot


@njit
def _particle_kernel(key, r0, r1, init, lab, T, m, taming, alpha, pcode, ppar, scode, spar,
                     half, aprob, aalias, coupled, fh, fy, fw, fluct, snap_h, out_x, out_xbar,
                     out_gap, out_y, out_nev, out_div, out_snap):
    N = init.shape[1]
    eps = 1.0 / N
    sq = np.sqrt(eps)
    gexp = 1.0 - 1.0 / m
    zs = eps ** (1.0 / alpha) if alpha < 2.0 else 0.0
    k0 = key[0]
    k1 = key[1]
    tag = np.uint64(TAG_PARTICLE)
    nh = aprob.shape[0]
    x = np.empty(N)
    xb = np.empty(N)
    nxt = np.empty(N)
    tot = np.empty(N)
    cnt = np.empty(N, dtype=np.int64)
    wj = np.empty((N, 3), dtype=np.uint64)
    nsnap = out_snap.shape[1]
    for r in range(r0, r1):
        rr = np.uint64(r)
        ro = r - r0
        for i in range(N):
            x[i] = init[ro, i]
            xb[i] = init[ro, i]
            c = philox_block(np.uint64(1), np.uint64(lab[i]), rr, tag, k0, k1)
            tot[i] = -np.log1p(-u01(c[0]))
            nxt[i] = eps * tot[i]
            cnt[i] = 1
            wj[i, 0] = c[1]
            wj[i, 1] = c[2]
            wj[i, 2] = c[3]
            out_gap[ro, i] = 0.0
            out_nev[ro, i] = 0
        B = _total_bracket(pcode, ppar, 0.0, x) if fluct else 0.0
        integral = 0.0
        t_prev = 0.0
        nevents = 0
        div = -1
        isnap = 0
        while True:
            p = 0
            s = nxt[0]
            for i in range(1, N):
                if nxt[i] < s:
                    s = nxt[i]
                    p = i
            if s > T:
                break
            while isnap < nsnap and isnap * snap_h < s:
                for i in range(N):
                    out_snap[ro, isnap, i] = x[i]
                isnap += 1
            if fluct:
                integral += B * (s - t_prev)
            # jump of this tick
            col = int(u01(wj[p, 0]) * nh)
            if col >= nh:
                col = nh - 1
            hh = col if u01(wj[p, 1]) < aprob[col] else aalias[col]
            sgn = -1.0 if (wj[p, 2] >> np.uint64(63)) == np.uint64(1) else 1.0
            z = sgn * half[hh, 0]
            sig = 0.0
            if scode == C.ADDITIVE:
                if alpha >= 2.0:
                    sig = sq * (spar[0] * z)
                else:
                    sig = spar[0] * (zs * z)
            xp = x[p]
            acc = 0.0
            for j in range(N):
                acc += _tame1(C.pair_eval(pcode, ppar, s, xp, x[j]), eps, sq, gexp, taming)
            inc = acc / N if taming else eps * (acc / N)
            xnew = (xp + sig) + inc
            if not np.isfinite(xnew) or abs(xnew) > DIVERGENCE_BOUND:
                div = nevents + 1
                break
            if coupled:
                xb[p] = (xb[p] + sig) + _flow_bracket(pcode, ppar, s, xb[p], fh, fy, fw, eps, sq,
                                                      gexp, taming)
                g = (xnew - xb[p]) ** 2
                if g > out_gap[ro, p]:
                    out_gap[ro, p] = g
            if fluct:
                dB = 0.0
                for j in range(N):
                    if j != p:
                        dB += (C.pair_eval(pcode, ppar, s, xnew, x[j])
                               - C.pair_eval(pcode, ppar, s, xp, x[j]))
                        dB += (C.pair_eval(pcode, ppar, s, x[j], xnew)
                               - C.pair_eval(pcode, ppar, s, x[j], xp))
                dB += C.pair_eval(pcode, ppar, s, xnew, xnew) - C.pair_eval(pcode, ppar, s, xp, xp)
                B += dB / N
            x[p] = xnew
            nevents += 1
            out_nev[ro, p] += 1
            if fluct and nevents % N == 0:
                B = _total_bracket(pcode, ppar, s, x)
            t_prev = s
            # schedule the next tick of p
            cnt[p] += 1
            c = philox_block(np.uint64(cnt[p]), np.uint64(lab[p]), rr, tag, k0, k1)
            tot[p] += -np.log1p(-u01(c[0]))
            nxt[p] = eps * tot[p]
            wj[p, 0] = c[1]
            wj[p, 1] = c[2]
            wj[p, 2] = c[3]
        while isnap < nsnap:
            for i in range(N):
                out_snap[ro, isnap, i] = x[i]
            isnap += 1
        if fluct:
            integral += B * (T - t_prev)
        ysum = 0.0
        for i in range(N):
            out_x[ro, i] = x[i] if div < 0 else np.nan
            out_xbar[ro, i] = xb[i]
            ysum += x[i] - init[ro, i]
        out_y[ro] = ysum - integral
        out_div[ro] = div


@dataclass
class ParticleBatch:
    N: int
    T: float
    init: np.ndarray        # (R, N)
    x: np.ndarray           # (R, N) states at T
    xbar: np.ndarray        # (R, N) coupled limit copies at T
    gap: np.ndarray         # (R, N) sup_t |X^i - Xbar^i|^2
    Y: np.ndarray           # (R,) fluctuation statistic
    n_events: np.ndarray    # (R, N) ticks per particle
    diverged: np.ndarray    # (R,) event index of divergence, -1 if none
    snapshots: np.ndarray = None


def _law(kernel):
    if kernel.pair_diffusion is None or kernel.alpha >= 2:
        return build_jump_law(2.0, 1)
    from .scheme import default_law
    return default_law(float(kernel.alpha), 1)


def run_particles(kernel, init, T, stream, flow=None, fluct=False, labels=None, snap_h=0.0,
                  backend=None, workers=None, replica_offset=0, law=None):
    """Simulate R replicas of the N-particle system; init has shape (R, N)."""
    init = np.ascontiguousarray(np.atleast_2d(np.asarray(init, dtype=np.float64)))
    R, N = init.shape
    if N < 1:
        raise ValueError("need at least one particle")
    law = _law(kernel) if law is None else law
    lab = np.arange(N, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    backend = resolve_backend(backend)
    if backend == "numba" and kernel.code is None:
        backend = "numpy"
    nsnap = int(round(T / snap_h)) + 1 if snap_h > 0 else 0
    out = ParticleBatch(N, T, init, np.empty((R, N)), np.empty((R, N)), np.zeros((R, N)),
                        np.empty(R), np.zeros((R, N), dtype=np.int64),
                        np.empty(R, dtype=np.int64),
                        np.empty((R, nsnap, N)) if nsnap else None)
    if flow is None:
        fh, fy, fw = 1.0, np.zeros((2, 1)), np.zeros(1)
    else:
        fh, fy, fw = flow.h, np.ascontiguousarray(flow.nodes), flow.weights
    key = stream.key_array

    if backend == "numba":
        pcode, ppar, scode, spar = kernel.code
        snap = out.snapshots if nsnap else np.empty((R, 0, N))

        def work(a, b):
            _particle_kernel(key, replica_offset + a, replica_offset + b, init[a:b], lab, float(T),
                             float(kernel.m), bool(kernel.taming), float(kernel.alpha), pcode,
                             ppar, scode, spar, law.half_atoms, law.alias_prob, law.alias_idx,
                             flow is not None, fh, fy, fw, bool(fluct), float(snap_h),
                             out.x[a:b], out.xbar[a:b], out.gap[a:b], out.Y[a:b],
                             out.n_events[a:b], out.diverged[a:b], snap[a:b])
    else:
        def work(a, b):
            for r in range(a, b):
                run = _replica_numpy(kernel, law, stream, init[r], lab, T, replica_offset + r,
                                     flow, fluct, snap_h, record=False)
                out.x[r], out.xbar[r], out.gap[r] = run.x, run.xbar, run.gap
                out.Y[r], out.n_events[r], out.diverged[r] = run.Y, run.n_events, run.diverged
                if nsnap:
                    out.snapshots[r] = run.snapshots

    run_chunks(work, R, workers)
    return out


# --------------------------------------------------------------------------
# per-replica numpy event loop (fallback backend and event-log export)


@dataclass
class ParticleRun:
    x: np.ndarray
    xbar: np.ndarray
    gap: np.ndarray
    Y: float
    n_events: np.ndarray
    diverged: int
    log: list = None          # (event_idx, time, particle, state) rows
    snapshots: np.ndarray = None


def _replica_numpy(kernel, law, stream, x0, lab, T, r, flow, fluct, snap_h, record):
    N = x0.size
    eps = 1.0 / N
    sq = math.sqrt(eps)
    gexp = 1.0 - 1.0 / kernel.m
    taming = kernel.taming
    key = stream.key
    rr = np.uint64(r)
    labs = np.asarray(lab, dtype=np.uint64)

    def block(k, i):
        return philox_np(np.asarray(k, dtype=np.uint64), labs[i], rr, np.uint64(TAG_PARTICLE),
                         key[0], key[1])

    def tame(b):
        if taming:
            return eps * b / (1.0 + sq * np.abs(b) ** gexp)
        return b

    def flow_inc(s, xb):
        ys = flow.at(s)
        acc = float(np.sum(flow.weights * tame(kernel.pair_drift(s, xb, ys))))
        return acc if taming else eps * acc

    def total_bracket(s, x):
        return float(np.sum(np.mean(kernel.pair_drift(s, x[:, None], x[None, :]), axis=1)))

    x = np.array(x0, dtype=np.float64)
    xb = x.copy()
    c = block(np.ones(N), np.arange(N))
    tot = exponential_from_uniform(u01_np(c[0]))
    nxt = eps * tot
    cnt = np.ones(N, dtype=np.int64)
    wj = np.stack(c[1:], axis=1)
    gap = np.zeros(N)
    nev = np.zeros(N, dtype=np.int64)
    B = total_bracket(0.0, x) if fluct else 0.0
    integral = 0.0
    t_prev = 0.0
    nevents = 0
    div = -1
    log = [] if record else None
    nsnap = int(round(T / snap_h)) + 1 if snap_h > 0 else 0
    snaps = np.empty((nsnap, N)) if nsnap else None
    isnap = 0
    if record:
        for i in range(N):
            log.append((0, 0.0, i, x[i]))
    while True:
        p = int(np.argmin(nxt))
        s = float(nxt[p])
        if s > T:
            break
        while isnap < nsnap and isnap * snap_h < s:
            snaps[isnap] = x
            isnap += 1
        if fluct:
            integral += B * (s - t_prev)
        z = float(jump_from_words(law, wj[p, 0:1], wj[p, 1:2], wj[p, 2:3])[0, 0])
        sig = 0.0
        if kernel.pair_diffusion is not None:
            if kernel.alpha >= 2:
                sig = sq * float(np.mean(kernel.pair_diffusion(s, x[p], x, z)))
            else:
                sig = float(np.mean(kernel.pair_diffusion(s, x[p], x, eps ** (1 / kernel.alpha) * z)))
        xp = x[p]
        acc = 0.0
        for v in tame(kernel.pair_drift(s, xp, x)):
            acc += v
        inc = acc / N if taming else eps * (acc / N)
        xnew = (xp + sig) + inc
        if not math.isfinite(xnew) or abs(xnew) > DIVERGENCE_BOUND:
            div = nevents + 1
            break
        if flow is not None:
            xb[p] = (xb[p] + sig) + flow_inc(s, xb[p])
            gap[p] = max(gap[p], (xnew - xb[p]) ** 2)
        if fluct:
            others = np.arange(N) != p
            bd = kernel.pair_drift
            dB = float(np.sum((bd(s, xnew, x) - bd(s, xp, x))[others])
                       + np.sum((bd(s, x, xnew) - bd(s, x, xp))[others]))
            dB += float(bd(s, xnew, xnew) - bd(s, xp, xp))
            B += dB / N
        x[p] = xnew
        nevents += 1
        nev[p] += 1
        if record:
            log.append((nevents, s, p, xnew))
        if fluct and nevents % N == 0:
            B = total_bracket(s, x)
        t_prev = s
        cnt[p] += 1
        c = block(cnt[p], p)
        tot[p] += float(exponential_from_uniform(u01_np(c[0])))
        nxt[p] = eps * tot[p]
        wj[p] = [c[1], c[2], c[3]]
    if nsnap:
        snaps[isnap:] = x
    if fluct:
        integral += B * (T - t_prev)
    Y = float(np.sum(x - x0)) - integral
    xo = x if div < 0 else np.full(N, np.nan)
    return ParticleRun(xo, xb, gap, Y, nev, div, log, snaps)


def simulate_particles(kernel, init, T, stream, replica=0, record=True, fluct=False):
    """One replica with an event log; init is the (N,) vector of initial states."""
    init = np.asarray(init, dtype=np.float64).ravel()
    run = _replica_numpy(kernel, _law(kernel), stream, init, np.arange(init.size), T, replica,
                         None, fluct, 0.0, record)
    if run.diverged >= 0:
        raise DivergenceError(run.diverged)
    return run


def simulate_coupled(kernel, init, T, stream, flow, replica=0, record=False):
    """One replica plus the same-clock limit copies Xbar^i driven by ``flow``."""
    init = np.asarray(init, dtype=np.float64).ravel()
    run = _replica_numpy(kernel, _law(kernel), stream, init, np.arange(init.size), T, replica,
                         flow, False, 0.0, record)
    if run.diverged >= 0:
        raise DivergenceError(run.diverged)
    return run


def write_trajectory_csv(run, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["event_idx", "time", "particle", "x0"])
    for k, s, p, v in run.log:
        w.writerow([k, repr(float(s)), p, repr(float(v))])


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ChaosEstimate:
    value: float          # mean over replicas and particles of sup_t |X^i - Xbar^i|^2
    ci: float
    worst_particle: float  # max_i of the replica-mean per particle (diagnostic)


def chaos_error(batch):
    """Exchangeable estimate of sup_i E sup_t |X^{N,i}_t - Xbar^i_t|^2."""
    per_rep = batch.gap.mean(axis=1)
    v, ci = mean_ci(per_rep)
    return ChaosEstimate(v, ci, float(batch.gap.mean(axis=0).max()))


@dataclass(frozen=True)
class FluctuationEstimate:
    Y: np.ndarray
    variance: float
    ci: float


def fluctuation_stat(batch):
    """Replica variance of Y^N_T with a delta-method CI."""
    y = batch.Y[batch.diverged < 0]
    var = float(np.var(y, ddof=1))
    m4 = float(np.mean((y - y.mean()) ** 4))
    ci = Z95 * math.sqrt(max(m4 - var ** 2, 0.0) / y.size)
    return FluctuationEstimate(y, var, ci)
