"""Monte-Carlo solver for the backward 2D vorticity equation on the torus [-pi, pi]^2.

The vorticity solves  d_s w + u.grad w + nu Lap w = 0  on [0, T] with w(T) = w0
and u = K * w (Biot-Savart). Its stochastic representation is
w(s, x) = E w0(X_{s,T}(x)) where X moves by eps u(r, X-) + jump at the ticks
of a Poisson clock of intensity 1/eps. The jump is +/- 2 sqrt(eps nu) along
a random axis, which makes the generator converge to u.grad + nu Lap. The
velocity feeding the paths is rebuilt from the Monte-Carlo vorticity by
Picard sweeps with common random numbers.
"""
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit, resolve_backend
from ._philox import philox_block, u01, philox_np, u01_np
from ._pool import run_chunks
from .randomness import TAG_NSE


class NonConvergenceError(RuntimeError):
    def __init__(self, gaps):
        self.gaps = list(gaps)
        super().__init__(f"Picard gap not decreasing: {self.gaps}")


class CFLError(RuntimeError):
    pass


def grid(G):
    """Node coordinates -pi + 2 pi j / G."""
    return -math.pi + 2 * math.pi * np.arange(G) / G


def mesh(G):
    x = grid(G)
    return np.meshgrid(x, x, indexing="ij")


def wavenumbers(G):
    k = np.fft.fftfreq(G, 1.0 / G)
    return np.meshgrid(k, k, indexing="ij")


@dataclass(frozen=True)
class VorticityField:
    values: np.ndarray   # (G, G), axis 0 is x1

    @property
    def G(self):
        return self.values.shape[0]

    @property
    def spectrum(self):
        return np.fft.fft2(self.values)


@dataclass(frozen=True)
class VelocityField:
    u1: np.ndarray
    u2: np.ndarray

    @property
    def sup(self):
        return float(max(np.max(np.abs(self.u1)), np.max(np.abs(self.u2))))

    def divergence_residual(self):
        """max |k . u_hat| relative to max |u_hat|."""
        k1, k2 = wavenumbers(self.u1.shape[0])
        a, b = np.fft.fft2(self.u1), np.fft.fft2(self.u2)
        scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
        return float(np.max(np.abs(k1 * a + k2 * b)) / scale)

    def stack(self):
        return np.stack([self.u1, self.u2])


def _bs_hat(what):
    G = what.shape[0]
    k1, k2 = wavenumbers(G)
    k2sum = k1 ** 2 + k2 ** 2
    inv = np.where(k2sum == 0, 0.0, 1.0 / np.where(k2sum == 0, 1.0, k2sum))
    nyq = (np.abs(k1) == G // 2) | (np.abs(k2) == G // 2)
    inv[nyq] = 0.0
    # Delta psi = w, u = (-d2 psi, d1 psi)
    return 1j * k2 * what * inv, -1j * k1 * what * inv


def biot_savart(w):
    """Velocity with curl w and zero mean, by spectral inversion."""
    vals = w.values if isinstance(w, VorticityField) else np.asarray(w, dtype=np.float64)
    if vals.shape[0] < 8:
        raise ValueError("grid size must be at least 8")
    a, b = _bs_hat(np.fft.fft2(vals))
    return VelocityField(np.real(np.fft.ifft2(a)), np.real(np.fft.ifft2(b)))


def curl(u):
    k1, k2 = wavenumbers(u.u1.shape[0])
    return np.real(np.fft.ifft2(1j * k1 * np.fft.fft2(u.u2) - 1j * k2 * np.fft.fft2(u.u1)))


def random_bandlimited(G, kmax, rng):
    """Real zero-mean field with random modes 1 <= |k|_inf <= kmax."""
    k1, k2 = wavenumbers(G)
    mask = (np.maximum(np.abs(k1), np.abs(k2)) <= kmax) & ((k1 != 0) | (k2 != 0))
    coef = (rng.standard_normal((G, G)) + 1j * rng.standard_normal((G, G))) * mask
    return np.real(np.fft.ifft2(coef)) * G


@functools.lru_cache(maxsize=1)
def calibrated_sup_constant(G=32, n=20, seed=2024, safety=1.25):
    """max ||K*w|| / ||w|| over a fixed corpus of band-limited fields, times a safety factor."""
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n):
        w = random_bandlimited(G, 6, rng)
        ratios.append(biot_savart(w).sup / np.max(np.abs(w)))
    return safety * max(ratios)


@dataclass(frozen=True)
class SupNormCheck:
    ratio: float
    constant: float
    bounded: bool


def sup_norm_bound_check(w, constant=None):
    vals = w.values if isinstance(w, VorticityField) else np.asarray(w, dtype=np.float64)
    c = calibrated_sup_constant() if constant is None else constant
    wmax = float(np.max(np.abs(vals)))
    if wmax == 0:
        return SupNormCheck(0.0, c, True)
    ratio = biot_savart(vals).sup / wmax
    return SupNormCheck(ratio, c, ratio <= c)


def upsample(f, factor):
    """Trigonometric interpolation of a periodic (G, G) field onto (G*factor)^2 nodes."""
    if factor == 1:
        return np.array(f, dtype=np.float64)
    G = f.shape[0]
    F = G * factor
    fh = np.fft.fftshift(np.fft.fft2(f))
    pad = np.zeros((F, F), dtype=complex)
    o = (F - G) // 2
    pad[o:o + G, o:o + G] = fh
    # split the Nyquist row and column so the result stays real
    pad[o, :] *= 0.5
    pad[:, o] *= 0.5
    pad[o + G, :] += pad[o, :]
    pad[:, o + G] += pad[:, o]
    return np.real(np.fft.ifft2(np.fft.ifftshift(pad))) * factor ** 2


@dataclass(frozen=True)
class FourierModes:
    """Sparse real Fourier series f(x) = sum_k re_k cos(k.(x+pi)) - im_k sin(k.(x+pi))."""
    k: np.ndarray     # (n, 2) float
    re: np.ndarray
    im: np.ndarray

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=np.float64) + math.pi
        x2 = np.asarray(x2, dtype=np.float64) + math.pi
        out = np.zeros(np.broadcast_shapes(x1.shape, x2.shape))
        for (a, b), re, im in zip(self.k, self.re, self.im):
            ph = a * x1 + b * x2
            out = out + (re * np.cos(ph) - im * np.sin(ph))
        return out


def sparse_modes(values, rel_tol=1e-13):
    G = values.shape[0]
    c = np.fft.fft2(values) / G ** 2
    k1, k2 = wavenumbers(G)
    keep = np.abs(c) > rel_tol * max(np.max(np.abs(c)), 1e-300)
    nyq = (np.abs(k1) == G // 2) | (np.abs(k2) == G // 2)
    if np.any(keep & nyq):
        raise ValueError("terminal vorticity is not resolved: Nyquist modes present")
    return FourierModes(np.stack([k1[keep], k2[keep]], axis=1), c[keep].real.copy(),
                        c[keep].imag.copy())


# --------------------------------------------------------------------------
# path kernel


@njit
def _bilinear2(f, x1, x2, F, inv_h):
    """Periodic bilinear interpolation of both components of f (F, F, 2)."""
    a = (x1 + np.pi) * inv_h
    b = (x2 + np.pi) * inv_h
    a -= F * np.floor(a / F)
    b -= F * np.floor(b / F)
    i0 = int(a)
    j0 = int(b)
    ta = a - i0
    tb = b - j0
    if i0 >= F:
        i0 -= F
    if j0 >= F:
        j0 -= F
    i1 = i0 + 1 if i0 + 1 < F else 0
    j1 = j0 + 1 if j0 + 1 < F else 0
    w00 = (1 - ta) * (1 - tb)
    w01 = (1 - ta) * tb
    w10 = ta * (1 - tb)
    w11 = ta * tb
    v1 = w00 * f[i0, j0, 0] + w01 * f[i0, j1, 0] + w10 * f[i1, j0, 0] + w11 * f[i1, j1, 0]
    v2 = w00 * f[i0, j0, 1] + w01 * f[i0, j1, 1] + w10 * f[i1, j0, 1] + w11 * f[i1, j1, 1]
    return v1, v2


@njit
def _modes_eval(mk, mre, mim, x1, x2):
    acc = 0.0
    y1 = x1 + np.pi
    y2 = x2 + np.pi
    for q in range(mre.shape[0]):
        ph = mk[q, 0] * y1 + mk[q, 1] * y2
        acc += mre[q] * np.cos(ph) - mim[q] * np.sin(ph)
    return acc


_MASK2 = np.uint64(3)


@njit
def _nse_kernel(key, p0, p1, G, S, T, eps, jump, n_pairs, anti, cv, anchor, tmaps, dvec,
                half_split, ufine, mk, mre, mim, out_a, out_b):
    F = ufine.shape[1]
    inv_h = F / (2 * np.pi)
    hgrid = 2 * np.pi / G
    k0 = key[0]
    k1 = key[1]
    tag = np.uint64(TAG_NSE)
    ds = T / S
    nsub = tmaps.shape[2]
    hsub = T / nsub
    for p in range(p0, p1):
        ix = p // G
        iy = p % G
        px = -np.pi + ix * hgrid
        py = -np.pi + iy * hgrid
        for k in range(S):
            sa = 0.0
            sb = 0.0
            ax = anchor[k, p, 0]
            ay = anchor[k, p, 1]
            stream_id = np.uint64(p * S + k)
            for q in range(n_pairs):
                xa = px
                ya = py
                xb = px
                yb = py
                r = k * ds
                e = 0
                tot = 0.0
                jx = 0.0
                jy = 0.0
                dx = 0.0
                dy = 0.0
                c0 = np.uint64(0)
                c1 = np.uint64(0)
                c2 = np.uint64(0)
                c3 = np.uint64(0)
                while True:
                    slot = e % 4
                    if slot == 0:
                        c0, c1, c2, c3 = philox_block(np.uint64(e // 4), np.uint64(q), stream_id,
                                                      tag, k0, k1)
                    if slot == 0:
                        wd = c0
                    elif slot == 1:
                        wd = c1
                    elif slot == 2:
                        wd = c2
                    else:
                        wd = c3
                    e += 1
                    tot += -np.log1p(-u01(wd))
                    r = k * ds + eps * tot
                    if r > T:
                        break
                    j = int(r / ds)
                    if j > S - 1:
                        j = S - 1
                    bits = wd & _MASK2
                    sgn = -1.0 if (bits >> np.uint64(1)) == np.uint64(1) else 1.0
                    axis = int(bits & np.uint64(1))
                    v1, v2 = _bilinear2(ufine[j], xa, ya, F, inv_h)
                    xa = xa + eps * v1
                    ya = ya + eps * v2
                    if axis == 0:
                        xa += sgn * jump
                    else:
                        ya += sgn * jump
                    if cv:
                        m = int(r / hsub)
                        if m > nsub - 1:
                            m = nsub - 1
                        if m < k * (nsub // S):
                            m = k * (nsub // S)
                        jx += sgn * jump * tmaps[k, p, m, 0, axis]
                        jy += sgn * jump * tmaps[k, p, m, 1, axis]
                        dx += eps * dvec[k, p, m, 0]
                        dy += eps * dvec[k, p, m, 1]
                    if anti:
                        v1, v2 = _bilinear2(ufine[j], xb, yb, F, inv_h)
                        xb = xb + eps * v1
                        yb = yb + eps * v2
                        if axis == 0:
                            xb -= sgn * jump
                        else:
                            yb -= sgn * jump
                val = _modes_eval(mk, mre, mim, xa, ya)
                if cv:
                    val -= _modes_eval(mk, mre, mim, ax + dx + jx, ay + dy + jy)
                if anti:
                    val += _modes_eval(mk, mre, mim, xb, yb)
                    if cv:
                        val -= _modes_eval(mk, mre, mim, ax + dx - jx, ay + dy - jy)
                if q < half_split:
                    sa += val
                else:
                    sb += val
            out_a[p - p0, k] = sa
            out_b[p - p0, k] = sb


def _seqsum(v):
    # left-to-right accumulation, like the kernel's running sum
    return float(np.cumsum(v)[-1]) if v.size else 0.0


def _mc_sweep_numpy(key, p0, p1, G, S, T, eps, jump, n_pairs, anti, cv, anchor, tmaps, dvec,
                    half_split, ufine, modes, out_a, out_b):
    """Vectorized over the path index; same counters and arithmetic order as the kernel."""
    F = ufine.shape[1]
    inv_h = F / (2 * np.pi)
    hgrid = 2 * np.pi / G
    ds = T / S
    nsub = tmaps.shape[2]
    hsub = T / nsub
    q = np.arange(n_pairs, dtype=np.uint64)

    for p in range(p0, p1):
        px = -np.pi + (p // G) * hgrid
        py = -np.pi + (p % G) * hgrid
        for k in range(S):
            xa = np.full(n_pairs, px)
            ya = np.full(n_pairs, py)
            xb, yb = xa.copy(), ya.copy()
            tot = np.zeros(n_pairs)
            jx = np.zeros(n_pairs)
            jy = np.zeros(n_pairs)
            dx = np.zeros(n_pairs)
            dy = np.zeros(n_pairs)
            alive = np.ones(n_pairs, dtype=bool)
            e = 0
            words = None
            while alive.any():
                if e % 4 == 0:
                    words = philox_np(np.uint64(e // 4), q, np.uint64(p * S + k),
                                      np.uint64(TAG_NSE), key[0], key[1])
                wd = words[e % 4]
                e += 1
                tot = np.where(alive, tot + (-np.log1p(-u01_np(wd))), tot)
                r = k * ds + eps * tot
                alive &= ~(r > T)
                idx = np.flatnonzero(alive)
                if idx.size == 0:
                    break
                j = np.minimum((r[idx] / ds).astype(np.int64), S - 1)
                bits = wd[idx] & _MASK2
                sgn = np.where((bits >> np.uint64(1)) == 1, -1.0, 1.0)
                ax0 = (bits & np.uint64(1)) == 0
                if cv:
                    m = np.clip((r[idx] / hsub).astype(np.int64), k * (nsub // S), nsub - 1)
                    axis = np.where(ax0, 0, 1)
                    tm = tmaps[k, p][m, :, axis]
                    jx[idx] = jx[idx] + sgn * jump * tm[:, 0]
                    jy[idx] = jy[idx] + sgn * jump * tm[:, 1]
                    dv = dvec[k, p][m]
                    dx[idx] = dx[idx] + eps * dv[:, 0]
                    dy[idx] = dy[idx] + eps * dv[:, 1]
                for xs, ys, sg in ((xa, ya, sgn), (xb, yb, -sgn)) if anti else ((xa, ya, sgn),):
                    v1, v2 = _bil_slices(ufine, j, xs[idx], ys[idx])
                    nx = xs[idx] + eps * v1
                    ny = ys[idx] + eps * v2
                    nx = np.where(ax0, nx + sg * jump, nx)
                    ny = np.where(ax0, ny, ny + sg * jump)
                    xs[idx] = nx
                    ys[idx] = ny
            ax, ay = anchor[k, p]
            val = modes(xa, ya)
            if cv:
                val = val - modes(ax + dx + jx, ay + dy + jy)
            if anti:
                val = val + modes(xb, yb)
                if cv:
                    val = val - modes(ax + dx - jx, ay + dy - jy)
            # sequential sums to match the kernel's accumulation order
            out_a[p - p0, k] = _seqsum(val[:half_split])
            out_b[p - p0, k] = _seqsum(val[half_split:])


def _bilinear_np(f, x1, x2):
    """Vectorized twin of _bilinear2 with the same operation order."""
    F = f.shape[0]
    inv_h = F / (2 * np.pi)
    a = (x1 + np.pi) * inv_h
    b = (x2 + np.pi) * inv_h
    a = a - F * np.floor(a / F)
    b = b - F * np.floor(b / F)
    i0 = a.astype(np.int64)
    j0 = b.astype(np.int64)
    ta, tb = a - i0, b - j0
    i0 = np.where(i0 >= F, i0 - F, i0)
    j0 = np.where(j0 >= F, j0 - F, j0)
    i1 = np.where(i0 + 1 < F, i0 + 1, 0)
    j1 = np.where(j0 + 1 < F, j0 + 1, 0)
    w00, w01 = (1 - ta) * (1 - tb), (1 - ta) * tb
    w10, w11 = ta * (1 - tb), ta * tb
    return tuple(w00 * f[i0, j0, c] + w01 * f[i0, j1, c] + w10 * f[i1, j0, c]
                 + w11 * f[i1, j1, c] for c in (0, 1))


def _bil_slices(ufine, j, x, y):
    v1 = np.empty(x.size)
    v2 = np.empty(x.size)
    for jj in np.unique(j):
        m = j == jj
        v1[m], v2[m] = _bilinear_np(ufine[jj], x[m], y[m])
    return v1, v2


def _grad_fine(u_slices, factor):
    """Spectral gradient of each velocity slice, upsampled: (S, F, F, 4) as
    (d1 u1, d2 u1, d1 u2, d2 u2)."""
    S, _, G, _ = u_slices.shape
    k1, k2 = wavenumbers(G)
    out = []
    for k in range(S):
        comps = []
        for c in range(2):
            fh = np.fft.fft2(u_slices[k, c])
            for kk in (k1, k2):
                comps.append(upsample(np.real(np.fft.ifft2(1j * kk * fh)), factor))
        out.append(np.stack(comps, axis=-1))
    return np.ascontiguousarray(np.stack(out))


def flow_anchors(ufine, gfine, G, T, substeps=8):
    """Deterministic characteristics x' = u(r, x) from every grid point and slice time to T.

    Returns the compensated endpoints c (S, G*G, 2), piecewise-constant
    tangent maps A[k, p, m] ~ D Phi_{r -> T} on the sub-grid
    r_m = m T / (S substeps), shape (S, G*G, S*substeps, 2, 2), and the
    transported velocities a[k, p, m] = A u along the characteristic. The
    companion of a path is c + sum over its ticks of (eps a_m + A_m xi). All
    of it comes from RK4 on the slice-constant interpolated velocity the
    paths use; any deterministic choice keeps the control variate unbiased,
    closeness only reduces variance.
    """
    S = ufine.shape[0]
    nsub = S * substeps
    h = T / nsub
    X1, X2 = mesh(G)
    P = G * G
    anchor = np.empty((S, P, 2))
    dvec = np.zeros((S, P, nsub, 2))
    tmaps = np.zeros((S, P, nsub, 2, 2))
    tmaps[..., 0, 0] = 1.0
    tmaps[..., 1, 1] = 1.0

    def rhs(f, g, x, y, J):
        a, b = _bilinear_np(f, x, y)
        d11, d12 = _bilinear_np(g[..., :2], x, y)
        d21, d22 = _bilinear_np(g[..., 2:], x, y)
        D = np.stack([np.stack([d11, d12], -1), np.stack([d21, d22], -1)], -2)
        return a, b, D @ J

    for k in range(S):
        x = X1.ravel().copy()
        y = X2.ravel().copy()
        J = np.broadcast_to(np.eye(2), (P, 2, 2)).copy()
        Js = [J]
        vel = []
        for m in range(k * substeps, nsub):
            f = ufine[m // substeps]
            g = gfine[m // substeps]
            a1, b1, c1 = rhs(f, g, x, y, J)
            a2, b2, c2 = rhs(f, g, x + h / 2 * a1, y + h / 2 * b1, J + h / 2 * c1)
            a3, b3, c3 = rhs(f, g, x + h / 2 * a2, y + h / 2 * b2, J + h / 2 * c2)
            a4, b4, c4 = rhs(f, g, x + h * a3, y + h * b3, J + h * c3)
            vx = (a1 + 2 * a2 + 2 * a3 + a4) / 6
            vy = (b1 + 2 * b2 + 2 * b3 + b4) / 6
            x = x + h * vx
            y = y + h * vy
            J = J + h / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
            Js.append(J)
            vel.append(np.stack([vx, vy], -1))
        JT = Js[-1]
        inv = np.linalg.inv(np.stack(Js))                   # (n+1, P, 2, 2)
        A = np.moveaxis(JT[None] @ (0.5 * (inv[1:] + inv[:-1])), 0, 1)   # (P, n, 2, 2)
        a = np.einsum("pmij,pmj->pmi", A, np.moveaxis(np.stack(vel), 0, 1))
        tmaps[k, :, k * substeps:] = A
        dvec[k, :, k * substeps:] = a
        anchor[k, :, 0] = x - h * a[:, :, 0].sum(axis=1)
        anchor[k, :, 1] = y - h * a[:, :, 1].sum(axis=1)
    return anchor, tmaps, dvec


def transported_mean(modes, anchor, tmaps, dvec, k, eps, jump, T):
    """E w0(c + sum over ticks of (eps a_m + A_m xi)) on (s_k, T], exactly.

    Campbell's formula for a marked Poisson process of rate 1/eps with
    piecewise-constant marks gives, per Fourier mode q,
    prod_m exp((dr / eps)(exp(i eps kq.a_m) phi(jump A_m^T kq) - 1)).
    """
    nsub = tmaps.shape[2]
    hsub = T / nsub
    m0 = k * (nsub // tmaps.shape[0])
    A = tmaps[k, :, m0:]                                    # (P, Mk, 2, 2)
    v = np.einsum("pmji,qj->pmqi", A, modes.k)              # A^T kq
    phi = 0.5 * (np.cos(jump * v[..., 0]) + np.cos(jump * v[..., 1]))
    drift = np.einsum("pmi,qi->pmq", dvec[k, :, m0:], modes.k)
    lam = np.exp(hsub / eps * np.sum(np.exp(1j * eps * drift) * phi - 1.0, axis=1))  # (P, q)
    ph = (modes.k[:, 0] * (anchor[k, :, 0, None] + math.pi)
          + modes.k[:, 1] * (anchor[k, :, 1, None] + math.pi))
    return np.sum(np.real((modes.re + 1j * modes.im) * np.exp(1j * ph) * lam), axis=1)


@dataclass
class NSEResult:
    s_grid: np.ndarray
    w: np.ndarray            # (S, G, G)
    u: np.ndarray            # (S, 2, G, G)
    gaps: list
    converged: bool
    noise_floor: np.ndarray  # (S,) sup-norm MC noise estimate of u from a half split
    sweeps: int
    eps: float
    M: int


def _as_values(w0, G):
    if callable(w0):
        X1, X2 = mesh(G)
        return np.asarray(w0(X1, X2), dtype=np.float64)
    return np.asarray(w0.values if isinstance(w0, VorticityField) else w0, dtype=np.float64)


def solve_nse_poisson(w0, nu, eps, T, stream, M=2000, G=32, slices=8, picard_tol=1e-5,
                      max_iter=10, antithetic=True, control_variate=True, upsample_factor=4,
                      frozen_velocity=None, backend=None, workers=None):
    """Picard iteration for the Monte-Carlo vorticity on the slice grid s_k = k T / slices.

    Velocity is piecewise constant in time on the slices (left endpoints) and
    bilinear in space on a trigonometrically upsampled grid. With
    ``frozen_velocity`` (array (slices, 2, G, G)) a single sweep is run with
    that drift instead.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if nu < 0:
        raise ValueError("viscosity must be nonnegative")
    if antithetic and M % 4:
        raise ValueError("antithetic sampling needs M divisible by 4")
    wv = _as_values(w0, G)
    modes = sparse_modes(wv)
    S = slices
    s_grid = np.arange(S) * T / S
    jump = 2.0 * math.sqrt(eps * nu)
    n_pairs = M // 2 if antithetic else M
    half_split = n_pairs // 2
    backend = resolve_backend(backend)
    key = stream.key_array
    P = G * G

    def sweep(u_slices):
        ufine = np.ascontiguousarray(np.stack([np.stack([upsample(u_slices[k, c], upsample_factor)
                                                         for c in range(2)], axis=-1)
                                               for k in range(S)]))
        if control_variate:
            gfine = _grad_fine(u_slices, upsample_factor)
            anchor, tmaps, dvec = flow_anchors(ufine, gfine, G, T)
            mean_cv = np.stack([transported_mean(modes, anchor, tmaps, dvec, k, eps, jump, T)
                                .reshape(G, G) for k in range(S)])
        else:
            anchor = np.zeros((S, P, 2))
            tmaps = np.zeros((S, P, S, 2, 2))
            dvec = np.zeros((S, P, S, 2))
            mean_cv = np.zeros((S, G, G))
        out_a = np.empty((P, S))
        out_b = np.empty((P, S))

        def work(a, b):
            if backend == "numba":
                _nse_kernel(key, a, b, G, S, float(T), float(eps), jump, n_pairs, antithetic,
                            control_variate, anchor, tmaps, dvec, half_split, ufine, modes.k,
                            modes.re, modes.im, out_a[a:b], out_b[a:b])
            else:
                _mc_sweep_numpy(key, a, b, G, S, float(T), float(eps), jump, n_pairs, antithetic,
                                control_variate, anchor, tmaps, dvec, half_split, ufine, modes,
                                out_a[a:b], out_b[a:b])

        run_chunks(work, P, workers)
        per = 2 if antithetic else 1
        w = ((out_a + out_b) / M).T.reshape(S, G, G) + mean_cv
        wa = (out_a / (half_split * per)).T.reshape(S, G, G) + mean_cv
        wb = (out_b / ((n_pairs - half_split) * per)).T.reshape(S, G, G) + mean_cv
        return w, wa, wb

    def velocities(w):
        return np.stack([biot_savart(w[k]).stack() for k in range(S)])

    if frozen_velocity is not None:
        u_prev = np.asarray(frozen_velocity, dtype=np.float64).reshape(S, 2, G, G)
        w, wa, wb = sweep(u_prev)
        u = velocities(w)
        floor = _noise_floor(wa, wb, S)
        return NSEResult(s_grid, w, u, [], True, floor, 1, eps, M)

    u_prev = np.stack([biot_savart(wv).stack()] * S)
    gaps = []
    converged = False
    for it in range(1, max_iter + 1):
        w, wa, wb = sweep(u_prev)
        u = velocities(w)
        gap = float(np.max(np.abs(u - u_prev)))
        gaps.append(gap)
        u_prev = u
        if gap < picard_tol:
            converged = True
            break
        if len(gaps) >= 4 and all(gaps[-i] >= gaps[-i - 1] for i in range(1, 4)):
            raise NonConvergenceError(gaps)
    return NSEResult(s_grid, w, u_prev, gaps, converged, _noise_floor(wa, wb, S), it, eps, M)


def jump_only_mean(modes, tau, eps, jump, x1, x2):
    """E w0(x + jump sum) over a Poisson(tau / eps) number of axis jumps, mode by mode.

    The identity-map, zero-drift case of ``transported_mean``, written
    independently so each can check the other.
    """
    k = modes.k
    phi = 0.5 * (np.cos(jump * k[:, 0]) + np.cos(jump * k[:, 1]))
    lam = np.exp(tau / eps * (phi - 1.0))
    return FourierModes(k, modes.re * lam, modes.im * lam)(x1, x2)


def _noise_floor(wa, wb, S):
    # Var(u_A - u_B) = 4 Var(u) for equal halves
    out = np.empty(S)
    for k in range(S):
        d = biot_savart(wa[k] - wb[k])
        out[k] = 0.5 * d.sup
    return out


# --------------------------------------------------------------------------
# pseudo-spectral reference


def spectral_reference(w0, nu, T, s_grid, G=32, dt=1e-3, cfl=1.0):
    """Vorticity of the same backward equation at times s in s_grid, shape (len, G, G).

    Integrates d_tau w = u.grad w + nu Lap w in tau = T - s with 2/3 dealiasing
    and RK4 with an exact integrating factor for the viscous term.
    """
    wv = _as_values(w0, G)
    k1, k2 = wavenumbers(G)
    ksq = k1 ** 2 + k2 ** 2
    kmax = G // 2
    dealias = (np.abs(k1) < 2 * kmax / 3) & (np.abs(k2) < 2 * kmax / 3)

    def nonlinear(wh):
        wh = wh * dealias
        a, b = _bs_hat(wh)
        u1, u2 = np.real(np.fft.ifft2(a)), np.real(np.fft.ifft2(b))
        wx = np.real(np.fft.ifft2(1j * k1 * wh))
        wy = np.real(np.fft.ifft2(1j * k2 * wh))
        umax = max(np.max(np.abs(u1)), np.max(np.abs(u2)))
        return np.fft.fft2(u1 * wx + u2 * wy) * dealias, umax

    taus = sorted({float(T - s) for s in s_grid})
    out = {}
    wh = np.fft.fft2(wv)
    tau = 0.0
    for target in taus:
        while tau < target - 1e-14:
            h = min(dt, target - tau)
            E = np.exp(-nu * ksq * h)
            E2 = np.exp(-nu * ksq * h / 2)
            a, umax = nonlinear(wh)
            if h * umax * kmax > cfl:
                raise CFLError(f"CFL number {h * umax * kmax:.3f} exceeds {cfl}")
            b, _ = nonlinear(E2 * (wh + h / 2 * a))
            c, _ = nonlinear(E2 * wh + h / 2 * b)
            d, _ = nonlinear(E * wh + h * E2 * c)
            wh = E * wh + h / 6 * (E * a + 2 * E2 * (b + c) + d)
            tau += h
        out[target] = np.real(np.fft.ifft2(wh))
    return np.stack([out[float(T - s)] for s in s_grid])


def write_field_csv(values, G, s, component, fh):
    """Row-major matrix with a `G,s,component` header line."""
    fh.write("G,s,component\n")
    fh.write(f"{G},{float(s)!r},{component}\n")
    for row in np.asarray(values):
        fh.write(",".join(repr(float(v)) for v in row) + "\n")


# --------------------------------------------------------------------------
# Taylor-Green


def taylor_green_w0(x1, x2):
    return -2.0 * np.cos(x1) * np.cos(x2)


def taylor_green_u0(x1, x2):
    return np.cos(x1) * np.sin(x2), -np.sin(x1) * np.cos(x2)


def taylor_green_exact_w(s, nu, T, x1, x2):
    return math.exp(-2 * nu * (T - s)) * taylor_green_w0(x1, x2)
