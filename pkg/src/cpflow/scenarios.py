"""Compiled-in registry of named test problems with their constants and exact solutions."""
import hashlib
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from . import _coeffs as C
from . import nse2d
from .mckean import KernelSet, coded_kernel
from .scheme import CoefficientSet, coded


class UnknownScenarioError(KeyError):
    def __init__(self, name, registered):
        self.name = name
        self.registered = tuple(registered)
        super().__init__(f"unknown scenario {name!r}; registered: {', '.join(self.registered)}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class NSEProblem:
    w0: callable
    nu: float
    T: float
    G: int = 32
    slices: int = 8
    exact_w: callable = None   # (s, x1, x2) -> vorticity
    exact_u: callable = None   # (s, x1, x2) -> (u1, u2)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    kind: str                       # sde | mckean | nse
    coeffs: object                  # CoefficientSet | KernelSet | NSEProblem
    x0: tuple = (0.0,)
    T: float = 1.0
    constants: dict = field(default_factory=dict)
    exact_solution: callable = None  # (t (n,), x0 (d,)) -> (n, d)
    oracle: str = None               # rk4 | filippov | picard | closed_form | spectral
    eps_grid: tuple = ()
    n_grid: tuple = ()
    replicas: int = 500
    targets: dict = field(default_factory=dict)   # kind -> (lo, hi)
    init: tuple = ("normal", 0.0, 1.0)            # particle scenarios
    qualitative: bool = False
    anchor: str = ""

    def __post_init__(self):
        object.__setattr__(self, "constants", MappingProxyType(dict(self.constants)))
        object.__setattr__(self, "targets", MappingProxyType(dict(self.targets)))

    @property
    def d(self):
        return getattr(self.coeffs, "d", 1)

    @property
    def hash(self):
        return scenario_hash(self)

    def drift_only(self):
        """The same problem with the diffusion switched off."""
        c = self.coeffs
        if not isinstance(c, CoefficientSet):
            raise TypeError("drift_only applies to SDE scenarios")
        if c.code is None:
            return CoefficientSet(c.drift, None, c.d, c.m, c.alpha, c.taming, c.drift_grad)
        dc, dp, _, _ = c.code
        return coded(dc, dp, d=c.d, m=c.m, alpha=c.alpha, taming=c.taming, drift_grad=c.drift_grad)


def _canon(v):
    if isinstance(v, np.ndarray):
        return [float(a) for a in v.ravel()]
    if isinstance(v, (tuple, list)):
        return [_canon(a) for a in v]
    if isinstance(v, (dict, MappingProxyType)):
        return {str(k): _canon(v[k]) for k in sorted(v)}
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, float, np.integer, np.floating)):
        return float(v)
    return str(v)


def scenario_hash(spec):
    """Short digest of everything that changes the numbers a scenario produces."""
    c = spec.coeffs
    if isinstance(c, (CoefficientSet, KernelSet)):
        body = {"code": c.code, "m": c.m, "alpha": c.alpha, "taming": c.taming,
                "d": getattr(c, "d", 1)}
    else:
        body = {"nu": c.nu, "T": c.T, "G": c.G, "slices": c.slices, "w0": c.w0.__name__}
    blob = json.dumps(_canon({"name": spec.name, "kind": spec.kind, "coeffs": body,
                              "x0": spec.x0, "T": spec.T, "constants": spec.constants,
                              "init": spec.init}), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# exact solutions, all with the (t (n,), x0 (d,)) -> (n, d) convention


def square_wave(t, freq=200.0, amp=100.0):
    t = np.asarray(t, dtype=np.float64)
    return amp * (1.0 - 2.0 * np.mod(np.floor(freq * t), 2.0))


def square_wave_integral(t, freq=200.0, amp=100.0):
    """int_0^t of the square wave: a triangle wave of height amp / freq."""
    u = freq * np.asarray(t, dtype=np.float64)
    k = np.floor(u)
    frac = u - k
    odd = np.mod(k, 2.0) == 1.0
    return amp / freq * np.where(odd, 1.0 - frac, frac)


def _oscillatory_exact(t, x0):
    return (np.asarray(x0, dtype=np.float64)[0] + square_wave_integral(t))[:, None]


def _ou_drift_exact(t, x0):
    return np.exp(-np.asarray(t, dtype=np.float64))[:, None] * np.asarray(x0, dtype=np.float64)


def _double_well_exact(t, x0):
    t = np.asarray(t, dtype=np.float64)[:, None]
    x0 = np.asarray(x0, dtype=np.float64)
    e = np.exp(t)
    return x0 * e / np.sqrt(1.0 + x0 ** 2 * (e * e - 1.0))


def _sign_exact(t, x0):
    t = np.asarray(t, dtype=np.float64)[:, None]
    x0 = np.asarray(x0, dtype=np.float64)
    return np.sign(x0) * np.maximum(np.abs(x0) - t, 0.0)


def _lipschitz_grad(t, x):
    return np.cos(np.asarray(x, dtype=np.float64))


def _ou_grad(t, x):
    return -np.ones_like(np.asarray(x, dtype=np.float64))


def residual_check(spec, n=100, seed=0, h=None):
    """max |d/dt X(t) - b(t, X(t))| at n random (t, x0), by fourth-order central differences.

    Points within 3 h of a kink of the exact solution (switching times of a
    piecewise-smooth drift or of a Filippov solution) are redrawn.
    """
    if spec.exact_solution is None or not isinstance(spec.coeffs, CoefficientSet):
        raise ValueError(f"scenario {spec.name} has no ODE closed form")
    h = spec.constants.get("residual_h", 2e-4) if h is None else h
    rng = np.random.default_rng(seed)
    b = spec.coeffs.drift
    d = spec.d
    kinks = spec.constants.get("kinks")
    worst = 0.0
    done = 0
    while done < n:
        t = rng.uniform(3 * h, spec.T - 3 * h)
        x0 = rng.uniform(-2.0, 2.0, d) if spec.constants.get("free_x0", True) else np.asarray(spec.x0)
        if kinks is not None and np.min(np.abs(kinks(x0) - t)) < 3 * h:
            continue
        X = spec.exact_solution(t + h * np.arange(-2.0, 3.0), x0)
        dX = (X[0] - 8 * X[1] + 8 * X[3] - X[4]) / (12 * h)
        r = dX - np.asarray(b(np.array([t]), X[2].reshape(d, 1))).reshape(d)
        worst = max(worst, float(np.max(np.abs(r))))
        done += 1
    return worst


# --------------------------------------------------------------------------
# registry


def _tg_exact_w(nu, T):
    def w(s, x1, x2):
        return math.exp(-2 * nu * (T - s)) * nse2d.taylor_green_w0(x1, x2)
    return w


def _tg_exact_u(nu, T):
    def u(s, x1, x2):
        f = math.exp(-2 * nu * (T - s))
        u1, u2 = nse2d.taylor_green_u0(x1, x2)
        return f * u1, f * u2
    return u


def _build():
    eps_strong = tuple(2.0 ** -k for k in range(6, 15))
    reg = {}

    def add(spec):
        reg[spec.name] = spec

    add(ScenarioSpec(
        "oscillatory", "sde", coded(C.SQUARE_WAVE, (200.0, 100.0)), (0.0,), 1.0,
        {"freq": 200.0, "amp": 100.0, "int_f2": 1.0e4, "free_x0": False, "residual_h": 1e-5,
         "kinks": lambda x0: np.arange(1, 200) / 200.0},
        _oscillatory_exact, "closed_form", (1e-4,), replicas=2000,
        targets={"isometry": (0.85, 1.15)},
        anchor="mean-square error of the Poisson quadrature equals eps * int f^2"))
    add(ScenarioSpec(
        "lipschitz_1d", "sde", coded(C.SIN_COS, drift_grad=_lipschitz_grad), (0.0,), 1.0,
        {"lipschitz": 1.0, "sup_b": 2.0}, None, "rk4", eps_strong, replicas=500,
        targets={"strong": (0.4, 0.6)},
        anchor="strong rate 1/2 for globally Lipschitz drift"))
    add(ScenarioSpec(
        "linear_ou", "sde", coded(C.LINEAR, (-1.0,), C.ADDITIVE, (1.0,), drift_grad=_ou_grad),
        (1.0,), 1.0,
        {"lipschitz": 1.0, "dissipativity": 1.0, "sigma": 1.0, "invariant_x2": 0.5,
         "burn_in": 10.0, "horizon": 110.0},
        _ou_drift_exact, "closed_form", (0.1, 0.05, 0.025, 0.0125), replicas=100000,
        targets={"weak": (0.85, 1.15), "invariant": (0.45, 0.55), "clt": (0.85, 1.15),
                 "donsker": (0.0, 0.03)},
        anchor="weak rate 1, invariant law and path-scale CLT for a linear drift"))
    add(ScenarioSpec(
        "double_well", "sde", coded(C.DOUBLE_WELL, m=3.0), (0.5,), 1.0,
        {"m": 3.0, "one_sided_lipschitz": 1.0}, _double_well_exact, "closed_form",
        (2.0 ** -6, 2.0 ** -8, 2.0 ** -10), replicas=500, targets={"strong": (0.4, 0.6)},
        anchor="tamed scheme for a superlinear one-sided Lipschitz drift"))
    add(ScenarioSpec(
        "stable_drift", "sde", coded(C.NEG_TANH, (1.0,), C.ADDITIVE, (1.0,), alpha=1.5),
        (0.0,), 1.0, {"lipschitz": 1.0, "sup_b": 1.0, "alpha": 1.5}, None, None,
        (1e-2, 1e-3), replicas=20000, qualitative=True,
        anchor="stable-driven limit, distributional stability in eps"))
    add(ScenarioSpec(
        "filippov_sign", "sde", coded(C.NEG_SIGN), (1.0,), 2.0,
        {"one_sided_lipschitz": 0.0, "sup_b": 1.0, "kinks": lambda x0: np.abs(x0)},
        _sign_exact, "closed_form", tuple(2.0 ** -k for k in range(6, 13)), replicas=500,
        targets={"strong": (0.35, 0.65)},
        anchor="rate 1/2 for a discontinuous one-sided Lipschitz drift"))
    add(ScenarioSpec(
        "vortex_sobolev", "sde", coded(C.VORTEX, (0.5, 1.0), d=2), (0.5, 0.0), 1.0,
        {"holder_exponent": 0.5, "cutoff_scale": 1.0}, None, "filippov",
        (2.0 ** -6, 2.0 ** -8, 2.0 ** -10), replicas=200, qualitative=True,
        anchor="rotational drift only Holder continuous at the origin"))
    add(ScenarioSpec(
        "mckean_mean_revert", "mckean",
        coded_kernel(C.PAIR_ATTRACT, (1.0,), C.ADDITIVE, (1.0,), mean_field_closed_form=True,
                     constants={"lipschitz": 1.0}),
        (0.0,), 1.0, {"lipschitz": 1.0}, _ou_drift_exact, "closed_form",
        n_grid=(8, 16, 32, 64), replicas=64,
        anchor="mean-reverting interaction with an exact mean-field limit"))
    add(ScenarioSpec(
        "mckean_sin", "mckean", coded_kernel(C.PAIR_SIN, constants={"kappa": 1.0}),
        (0.0,), 1.0, {"kappa": 1.0}, None, "picard", n_grid=(8, 16, 32, 64, 128, 256),
        replicas=64, targets={"chaos": (-1.25, -0.75), "fluctuation": (0.85, 1.15)},
        anchor="bounded Lipschitz interaction, chaos at rate 1/N and Gaussian fluctuations"))
    add(ScenarioSpec(
        "mckean_w1", "mckean",
        coded_kernel(C.PAIR_NEG_TANH, (1.0,), C.ADDITIVE, (1.0,), alpha=1.5,
                     constants={"kappa": 1.0}),
        (0.0,), 1.0, {"kappa": 1.0, "alpha": 1.5}, None, "cloud", n_grid=(16, 32, 64, 128),
        replicas=64, qualitative=True,
        anchor="additive stable noise with a bounded Lipschitz interaction, W1 rate"))
    add(ScenarioSpec(
        "taylor_green", "nse",
        NSEProblem(nse2d.taylor_green_w0, 0.1, 0.5, 32, 8, _tg_exact_w(0.1, 0.5),
                   _tg_exact_u(0.1, 0.5)),
        (), 0.5, {"nu": 0.1}, None, "spectral", (0.02, 0.01, 0.005), replicas=2000,
        targets={"nse": (1.4, 2.8)},
        anchor="vorticity scheme, O(eps) error against an exact decaying vortex array"))
    return MappingProxyType(reg)


REGISTRY = _build()


def names():
    return tuple(REGISTRY)


def get_scenario(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownScenarioError(name, REGISTRY) from None
