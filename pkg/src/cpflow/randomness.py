"""Reproducible random streams, exponential clocks and lattice jump laws.

A stream is a Philox key derived from ``(root_seed, labels)``. Draws are
addressed by 256-bit counters whose last word is a purpose tag, so the
draws for "event n of replica r" are the same whichever worker computes
them and in whatever order.
"""
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from ._philox import philox_np, u01_np

# counter word 3: purpose tags
TAG_SEQ = 1        # sequential cursor draws (block, 0, 0, TAG_SEQ)
TAG_PATH = 2       # scheme event n of replica r: (n, r, 0, TAG_PATH)
TAG_PARTICLE = 3   # tick k of particle i in replica r: (k, i, r, TAG_PARTICLE)
TAG_NSE = 4        # vorticity paths: (block, pair, point*slices + slice, TAG_NSE)
TAG_INIT = 5       # initial particle states: (i, r, 0, TAG_INIT)

NORMALIZATION_TOL = 1e-10


def _label_words(labels):
    words = []
    for role, index in labels:
        if not isinstance(role, str) or int(index) < 0:
            raise ValueError(f"bad label {(role, index)!r}: expected (str, nonnegative int)")
        words.extend((zlib.crc32(role.encode()), int(index)))
    return tuple(words)


class RngStream:
    """Single-owner handle on a Philox key plus a sequential cursor."""

    def __init__(self, root_seed, labels):
        labels = tuple((str(r), int(i)) for r, i in labels)
        if not labels:
            raise ValueError("stream labels must be nonempty")
        self.root_seed = int(root_seed)
        self.labels = labels
        ss = np.random.SeedSequence(self.root_seed, spawn_key=_label_words(labels))
        k = ss.generate_state(2, dtype=np.uint64)
        self.key = (np.uint64(k[0]), np.uint64(k[1]))
        self._cursor = 0
        self._buf = np.empty(0, dtype=np.uint64)

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, labels={list(self.labels)})"

    def child(self, role, index):
        return RngStream(self.root_seed, self.labels + ((role, index),))

    @property
    def key_array(self):
        return np.array(self.key, dtype=np.uint64)

    def block(self, c0, c1=0, c2=0, tag=TAG_SEQ):
        """Four word arrays for the given counters (broadcast)."""
        return philox_np(c0, c1, c2, np.uint64(tag), self.key[0], self.key[1])

    def raw(self, n):
        """Next n 64-bit words from the sequential cursor."""
        n = int(n)
        while self._buf.size < n:
            nb = max(16, (n - self._buf.size + 3) // 4)
            ctr = np.arange(self._cursor, self._cursor + nb, dtype=np.uint64)
            self._cursor += nb
            w = np.stack(self.block(ctr), axis=1).ravel()
            self._buf = np.concatenate([self._buf, w])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def uniform(self, n=None):
        u = u01_np(self.raw(1 if n is None else n))
        return float(u[0]) if n is None else u

    def exponential(self, n=None):
        u = self.uniform(1 if n is None else n)
        e = exponential_from_uniform(u)
        return float(e[0]) if n is None else e

    def normal(self, n):
        # midpoint of the 53-bit cell keeps the argument strictly inside (0, 1)
        w = self.raw(n)
        u = ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return special.ndtri(u)


def derive_stream(root_seed, labels):
    """Deterministic sub-stream for (root_seed, labels); labels are (role, index) pairs."""
    return RngStream(root_seed, labels)


def exponential_from_uniform(u):
    """Inverse CDF of Exp(1) for u in [0, 1): -ln(1 - u)."""
    return -np.log1p(-np.asarray(u, dtype=np.float64))


def sample_exponential(stream):
    return stream.exponential()


# --------------------------------------------------------------------------
# jump laws


def build_alias(p):
    """Vose alias table for probabilities p (need not be normalized)."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    q = p * (n / p.sum())
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = list(np.flatnonzero(q < 1.0))
    large = list(np.flatnonzero(q >= 1.0))
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = q[s]
        alias[s] = g
        q[g] = (q[g] + q[s]) - 1.0
        (small if q[g] < 1.0 else large).append(g)
    return prob, alias


@dataclass(frozen=True)
class JumpLaw:
    """Symmetric law on lattice vectors stored as +/- pairs of half-atoms.

    ``half_atoms[h]`` stands for the pair {z, -z}; ``half_probs[h]`` is the
    total mass of the pair and each sign gets exactly half of it. A zero
    atom, if present, is its own pair.
    """
    kind: str
    d: int
    alpha: float
    c0: float
    half_atoms: np.ndarray
    half_probs: np.ndarray
    alias_prob: np.ndarray = field(repr=False)
    alias_idx: np.ndarray = field(repr=False)
    cutoff: float = math.inf
    tail_mass: float = 0.0
    declared_rates: tuple = None

    @property
    def n_atoms(self):
        nz = np.any(self.half_atoms != 0, axis=1)
        return int(2 * nz.sum() + (~nz).sum())

    def atoms(self):
        """Full support and probabilities (each +/- pair split evenly)."""
        nz = np.any(self.half_atoms != 0, axis=1)
        a = np.concatenate([self.half_atoms[nz], -self.half_atoms[nz], self.half_atoms[~nz]])
        p = np.concatenate([self.half_probs[nz] / 2, self.half_probs[nz] / 2, self.half_probs[~nz]])
        return a, p

    def second_moment(self):
        """E|xi|^2 over the stored atoms (infinite in the limit for alpha < 2)."""
        return float(np.sum(self.half_probs * np.sum(self.half_atoms.astype(float) ** 2, axis=1)))


def _make_law(kind, d, alpha, c0, half_atoms, weights, **kw):
    w = np.asarray(weights, dtype=np.float64)
    hp = w / w.sum()
    prob, alias = build_alias(hp)
    return JumpLaw(kind, d, float(alpha), float(c0), np.ascontiguousarray(half_atoms, dtype=np.int64),
                   hp, prob, alias, **kw)


def axis_uniform(d):
    return _make_law("axis", d, 2.0, 1.0 / (2 * d), np.eye(d, dtype=np.int64), np.ones(d))


def zeta_tail(s, R):
    """sum_{k > R} k^{-s} by Euler-Maclaurin, with a bound on the remainder."""
    R = float(R)
    head = (R ** (1 - s) / (s - 1) + R ** -s / 2 + s * R ** (-s - 1) / 12
            - s * (s + 1) * (s + 2) * R ** (-s - 3) / 720)
    bound = s * (s + 1) * (s + 2) * (s + 3) * (s + 4) * R ** (-s - 5) / 30240
    return head - R ** -s, bound


def lattice_normalizer(alpha, d, cutoff):
    """Full lattice sum sum_{z != 0} |z|^{-d-alpha}, the truncated atoms and an error bound."""
    if d == 1:
        R = int(math.floor(cutoff))
        k = np.arange(R, 0, -1, dtype=np.float64)
        w = k ** (-1.0 - alpha)
        tail, bound = zeta_tail(1.0 + alpha, R)
        total = 2.0 * (w.sum() + tail)
        return total, 2.0 * bound, k[::-1].astype(np.int64)[:, None], w[::-1]
    R = int(math.floor(cutoff))
    r = np.arange(-R, R + 1)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=1)
    r2 = np.sum(z.astype(np.float64) ** 2, axis=1)
    keep = (r2 > 0) & (r2 <= float(R) ** 2)
    # half space: first nonzero coordinate positive
    first = np.zeros(len(z), dtype=np.int64)
    for j in range(d - 1, -1, -1):
        first = np.where(z[:, j] != 0, z[:, j], first)
    keep &= first > 0
    z = z[keep]
    w = r2[keep] ** (-(d + alpha) / 2)
    if d == 2:
        s = 1.0 + alpha / 2
        beta = 4.0 ** -s * (special.zeta(s, 0.25) - special.zeta(s, 0.75))
        return 4.0 * special.zeta(s) * beta, 0.0, z, w
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    tail = area * R ** -alpha / alpha
    total = 2.0 * w.sum() + tail
    return total, area * math.sqrt(d) * R ** (-1.0 - alpha), z, w


def build_jump_law(alpha, d, cutoff=None, declared_rates=None, tol=NORMALIZATION_TOL):
    """AxisUniform(d) for alpha = 2, LatticeStable(alpha, d, cutoff) for alpha in (0, 2)."""
    if not 0 < alpha <= 2:
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if alpha == 2:
        law = axis_uniform(d)
        return law if declared_rates is None else _replace_rates(law, declared_rates)
    if cutoff is None:
        cutoff = 10.0 ** (6.0 / d)
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    total, bound, half, w = lattice_normalizer(alpha, d, cutoff)
    if bound / total > tol:
        raise ValueError(f"cutoff {cutoff} too small: normalizer error bound {bound / total:.3e} "
                         f"exceeds {tol:.1e}")
    c0 = 1.0 / total
    tail_mass = 1.0 - 2.0 * c0 * float(w.sum())
    return _make_law("lattice", d, alpha, c0, half, w, cutoff=float(cutoff),
                     tail_mass=tail_mass, declared_rates=declared_rates)


def table_law(atoms, probs, alpha=2.0):
    """Symmetric law from an explicit atom table; p(z) must equal p(-z)."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=np.int64))
    probs = np.asarray(probs, dtype=np.float64)
    if atoms.shape[0] != probs.size:
        raise ValueError("atoms and probs differ in length")
    lookup = {tuple(a): p for a, p in zip(atoms, probs)}
    half, w = [], []
    for a, p in zip(atoms, probs):
        t = tuple(a)
        neg = tuple(-x for x in t)
        if neg not in lookup or lookup[neg] != p:
            raise ValueError(f"table law not symmetric at {t}")
        nz = [x for x in t if x != 0]
        if not nz:
            half.append(t)
            w.append(p)
        elif nz[0] > 0:
            half.append(t)
            w.append(2 * p)
    return _make_law("table", atoms.shape[1], alpha, float("nan"), np.array(half), w)


def _replace_rates(law, rates):
    from dataclasses import replace
    return replace(law, declared_rates=tuple(rates))


def jump_from_words(law, w_col, w_acc, w_sign):
    """Map three word arrays to jump vectors (n, d) through the alias table."""
    k = law.alias_prob.size
    col = np.minimum((u01_np(w_col) * k).astype(np.int64), k - 1)
    acc = u01_np(w_acc) < law.alias_prob[col]
    h = np.where(acc, col, law.alias_idx[col])
    sign = np.where((np.asarray(w_sign, dtype=np.uint64) >> np.uint64(63)) == 1, -1, 1)
    return law.half_atoms[h] * sign[:, None]


def sample_jump(law, stream, size=None):
    """Jump vector(s) drawn from the law using the stream's sequential cursor."""
    n = 1 if size is None else int(size)
    w = stream.raw(3 * n).reshape(n, 3)
    z = jump_from_words(law, w[:, 0], w[:, 1], w[:, 2])
    return z[0] if size is None else z


# --------------------------------------------------------------------------
# clocks


@dataclass(frozen=True)
class Clock:
    eps: float
    t_max: float
    jump_times: np.ndarray

    def count(self, t=None):
        """N_t = #{n : S_n <= t}."""
        t = self.t_max if t is None else t
        return int(np.searchsorted(self.jump_times, t, side="right"))


def event_words(stream, n_from, n_to, replica=0):
    """Words for scheme events n_from..n_to-1 (1-based event index) of one replica."""
    n = np.arange(n_from, n_to, dtype=np.uint64)
    return stream.block(n, np.uint64(replica), 0, TAG_PATH)


def clock_times(stream, eps, t_max, replica=0):
    """Jump times S_n = eps * (T_1 + ... + T_n) up to t_max, plus all words used."""
    if t_max <= 0:
        return np.empty(0), tuple(np.empty(0, dtype=np.uint64) for _ in range(4))
    mean = t_max / eps
    chunk = int(mean + 10 * math.sqrt(mean) + 16)
    words = [np.empty(0, dtype=np.uint64) for _ in range(4)]
    total = 0.0
    times = []
    start = 1
    while True:
        w = event_words(stream, start, start + chunk, replica)
        words = [np.concatenate([a, b]) for a, b in zip(words, w)]
        e = exponential_from_uniform(u01_np(w[0]))
        # running sum in event order: identical to the jit kernels
        cs = np.cumsum(np.concatenate([[total], e]))[1:]
        s = eps * cs
        over = np.flatnonzero(s > t_max)
        if over.size:
            times.append(s[:over[0]])
            n = sum(len(t) for t in times)
            return np.concatenate(times), tuple(a[:n] for a in words)
        times.append(s)
        total = cs[-1]
        start += chunk


def build_clock(eps, t_max, stream, replica=0):
    if eps <= 0:
        raise ValueError("eps must be positive")
    times, _ = clock_times(stream, eps, t_max, replica)
    return Clock(float(eps), float(t_max), times)


def required_iterations(eps, t, n_slack):
    """Event budget ceil((e-1) t / eps) + n_slack; P(N_t exceeds it) <= exp(-n_slack)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return int(math.ceil((math.e - 1.0) * t / eps)) + int(n_slack)
