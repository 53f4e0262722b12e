"""One function per experiment kind; each returns rows, fitted slopes and threshold verdicts."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats as sps

from . import _coeffs as C
from . import mckean as MK
from . import nse2d
from .randomness import derive_stream, sample_jump
from .reference import closed_form_path, filippov_solve, rk4_solve
from .scheme import DivergenceError, coded, default_law, simulate_batch
from .stats import (Z95, ErrorReport, clt_check, clt_limit_variance, fit_rate, ks_statistic,
                    mean_ci)

KINDS = ("strong", "weak", "rates", "chaos", "invariant", "clt", "donsker", "nse", "fluctuation",
         "stable", "tail")
REFERENCE_H = 1e-4
CF_POINTS = (0.5, 1.0, 2.0)
TAIL_KS = (2, 5, 10)


@dataclass(frozen=True)
class Verdict:
    name: str
    value: float
    lo: float
    hi: float

    @property
    def passed(self):
        return bool(self.lo <= self.value <= self.hi)

    def line(self):
        return (f"{self.name}: {'PASS' if self.passed else 'FAIL'} value={self.value!r} "
                f"target=[{self.lo!r}, {self.hi!r}]")


@dataclass
class ExperimentResult:
    report: ErrorReport
    verdicts: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)   # metric -> (slope, stderr)
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(v.passed for v in self.verdicts)

    def fit(self, metric, target=None, name=None):
        slope, se = fit_rate([(r.param, r.estimate) for r in self.report.metric(metric)])
        self.report.slope, self.report.stderr = slope, se
        self.slopes[metric] = (slope, se)
        if target is not None:
            self.verdicts.append(Verdict(name or f"slope[{metric}]", slope, *target))
        return slope


def _stream(seed, kind, spec):
    return derive_stream(seed, [(kind, 0), (spec.name, 0)])


def _check_divergence(batch, spec, eps):
    if batch.n_diverged:
        first = int(np.min(batch.diverged[batch.diverged >= 0]))
        raise DivergenceError(first, f"{batch.n_diverged} replicas of {spec.name} diverged at "
                                     f"eps={eps} (first at step {first})")


def reference_path(spec, coeffs=None, h=REFERENCE_H):
    """Deterministic oracle path for an SDE scenario: closed form, RK4 or mollified Filippov."""
    c = spec.coeffs if coeffs is None else coeffs
    x0 = np.asarray(spec.x0, dtype=np.float64)
    if spec.exact_solution is not None:
        interp = "linear" if "kinks" in spec.constants else "cubic"
        return closed_form_path(spec.exact_solution, c.drift, x0, spec.T, h, interp)
    if spec.oracle == "filippov":
        return filippov_solve(c.drift, x0, spec.T, max(h, 1e-3))
    return rk4_solve(c.drift, x0, spec.T, h)


# --------------------------------------------------------------------------
# single-path scheme experiments


def strong(spec, grid, replicas, seed, workers=None):
    coeffs = spec.coeffs
    ref = reference_path(spec)
    xT = ref.x[-1]
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "strong", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, spec.x0, eps, spec.T, root.child("grid", i), replicas,
                           reference=ref.as_grid(), workers=workers)
        _check_divergence(b, spec, eps)
        m, ci = mean_ci(b.sup_err2)
        res.report.add(spec.name, "eps", eps, "sup_sq_error", m, ci, replicas)
        rms = math.sqrt(m)
        res.report.add(spec.name, "eps", eps, "rms_error", rms, ci / (2 * rms) if rms else 0.0,
                       replicas)
        e, eci = mean_ci(np.sum((b.endpoints - xT) ** 2, axis=1))
        res.report.add(spec.name, "eps", eps, "endpoint_sq_error", e, eci, replicas)
        if "isometry" in spec.targets:
            ratio = e / (eps * spec.constants["int_f2"])
            res.report.add(spec.name, "eps", eps, "isometry_ratio", ratio,
                           eci / (eps * spec.constants["int_f2"]), replicas)
            res.verdicts.append(Verdict(f"isometry_ratio[eps={eps!r}]", ratio,
                                        *spec.targets["isometry"]))
    if len(grid) >= 3:
        res.fit("rms_error", spec.targets.get("strong"))
    return res


def _linear_coefficient(spec):
    c = spec.coeffs
    if c.code is None or c.code[0] != C.LINEAR or spec.d != 1:
        raise ValueError(f"weak oracle needs a scalar linear drift; {spec.name} has none")
    return float(c.code[1][0])


def scheme_second_moment(a, eps, T, x0):
    """E X_T^2 for the drift-only scheme of x' = a x: x0^2 exp((T / eps)((1 + eps a)^2 - 1))."""
    return x0 ** 2 * math.exp(T / eps * ((1.0 + eps * a) ** 2 - 1.0))


def weak(spec, grid, replicas, seed, workers=None):
    a = _linear_coefficient(spec)
    x0 = float(spec.x0[0])
    coeffs = spec.drift_only()
    limit = x0 ** 2 * math.exp(2 * a * spec.T)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "weak", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, spec.x0, eps, spec.T, root.child("grid", i), replicas,
                           workers=workers)
        _check_divergence(b, spec, eps)
        m, ci = mean_ci(b.endpoints[:, 0] ** 2)
        exact = scheme_second_moment(a, eps, spec.T, x0)
        res.report.add(spec.name, "eps", eps, "weak_moment", m, ci, replicas)
        res.report.add(spec.name, "eps", eps, "weak_moment_exact", exact, 0.0, replicas)
        res.report.add(spec.name, "eps", eps, "weak_error", abs(m - limit), ci, replicas)
        se = ci / Z95
        res.verdicts.append(Verdict(f"moment_std_errors[eps={eps!r}]",
                                    abs(m - exact) / se if se > 0 else math.inf, 0.0, 4.0))
    if len(grid) >= 3:
        res.fit("weak_error", spec.targets.get("weak"))
    return res


def invariant(spec, grid, replicas, seed, workers=None):
    burn = float(spec.constants.get("burn_in", 10.0))
    horizon = float(spec.constants.get("horizon", 110.0))
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "invariant", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(spec.coeffs, spec.x0, eps, horizon, root.child("grid", i), replicas,
                           window=(burn, horizon), observable="sq", workers=workers)
        if b.n_diverged:
            raise DivergenceError(int(np.min(b.diverged[b.diverged >= 0])),
                                  f"scenario {spec.name} is not dissipative at eps={eps}")
        m, ci = mean_ci(b.time_avg)
        res.report.add(spec.name, "eps", eps, "time_avg_x2", m, ci, replicas)
        if "invariant" in spec.targets:
            res.verdicts.append(Verdict(f"time_avg_x2[eps={eps!r}]", m,
                                        *spec.targets["invariant"]))
    return res


def clt(spec, grid, replicas, seed, workers=None):
    coeffs = spec.drift_only()
    if coeffs.drift_grad is None:
        raise ValueError(f"scenario {spec.name} declares no drift gradient")
    ref = reference_path(spec, coeffs)
    lim = clt_limit_variance(ref, coeffs.drift, coeffs.drift_grad)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "clt", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, spec.x0, eps, spec.T, root.child("grid", i), replicas,
                           workers=workers)
        _check_divergence(b, spec, eps)
        out = clt_check(b.endpoints[:, 0], float(ref.x[-1, 0]), eps, lim)
        res.report.add(spec.name, "eps", eps, "clt_variance", out.variance,
                       out.ci * lim, replicas)
        res.report.add(spec.name, "eps", eps, "clt_limit_variance", lim, 0.0, replicas)
        res.report.add(spec.name, "eps", eps, "clt_ratio", out.ratio, out.ci, replicas)
        if "clt" in spec.targets:
            res.verdicts.append(Verdict(f"clt_ratio[eps={eps!r}]", out.ratio,
                                        *spec.targets["clt"]))
    return res


def noise_only(spec):
    c = spec.coeffs
    if c.code is None or c.code[2] == C.NO_NOISE:
        raise ValueError(f"scenario {spec.name} has no coded diffusion")
    return coded(C.ZERO, (), c.code[2], c.code[3], d=c.d, alpha=c.alpha)


def donsker(spec, grid, replicas, seed, workers=None):
    coeffs = noise_only(spec)
    if coeffs.alpha < 2 or coeffs.d != 1:
        raise ValueError("the Donsker check is for alpha = 2 in one dimension")
    sd = float(coeffs.code[3][0]) * math.sqrt(spec.T)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "donsker", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, np.zeros(1), eps, spec.T, root.child("grid", i), replicas,
                           workers=workers)
        ks = ks_statistic(b.endpoints[:, 0], sps.norm(0.0, sd).cdf)
        res.report.add(spec.name, "eps", eps, "ks_distance", ks, 0.0, replicas)
        lo, hi = spec.targets.get("donsker", (0.0, 0.03))
        res.verdicts.append(Verdict(f"ks_distance[eps={eps!r}]", ks, lo, hi))
    return res


def stable(spec, grid, replicas, seed, workers=None, jump_samples=200_000):
    coeffs = spec.coeffs
    if coeffs.alpha >= 2:
        raise ValueError("the stable check needs alpha < 2")
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "stable", spec)
    cf = {}
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, spec.x0, eps, spec.T, root.child("grid", i), replicas,
                           workers=workers)
        _check_divergence(b, spec, eps)
        x = b.endpoints[:, 0]
        for u in CF_POINTS:
            m, ci = mean_ci(np.cos(u * x))
            cf[eps, u] = (m, ci)
            res.report.add(spec.name, "eps", eps, f"cf_re_u{u:g}", m, ci, replicas)
    # successive eps must agree within 3 half-widths of the difference
    for e1, e2 in zip(grid, grid[1:]):
        for u in CF_POINTS:
            (m1, c1), (m2, c2) = cf[e1, u], cf[e2, u]
            half = math.hypot(c1, c2)
            res.verdicts.append(Verdict(f"cf_gap_in_halfwidths[u={u:g},eps={e1!r}/{e2!r}]",
                                        abs(m1 - m2) / half if half > 0 else math.inf, 0.0, 3.0))
    # jump-law tails against exact lattice sums
    law = default_law(float(coeffs.alpha), 1)
    z = np.abs(sample_jump(law, root.child("jumps", 0), size=jump_samples)).ravel()
    s = 1.0 + coeffs.alpha
    for k in TAIL_KS:
        exact = 2.0 * law.c0 * float(special.zeta(s, k))
        emp = float(np.mean(z >= k))
        ci = Z95 * math.sqrt(emp * (1 - emp) / z.size) / exact
        res.report.add(spec.name, "k", k, "tail_ratio", emp / exact, ci, z.size)
        res.verdicts.append(Verdict(f"tail_ratio[k={k}]", emp / exact, 0.8, 1.2))
    return res


def tail(spec, grid, replicas, seed, workers=None, t=1.0, n=5):
    """P(N^eps_t >= (e - 1) t / eps + n) against the bound e^{-n}."""
    coeffs = coded(C.ZERO)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "tail", spec)
    for i, eps in enumerate(grid):
        b = simulate_batch(coeffs, np.zeros(1), eps, t, root.child("grid", i), replicas,
                           workers=workers)
        level = (math.e - 1.0) * t / eps + n
        p = float(np.mean(b.n_events >= level))
        se = math.sqrt(p * (1 - p) / replicas)
        res.report.add(spec.name, "eps", eps, "tail_probability", p, Z95 * se, replicas)
        res.verdicts.append(Verdict(f"tail_probability[eps={eps!r}]", p, 0.0,
                                    math.exp(-n) + 3 * se))
    return res


# --------------------------------------------------------------------------
# particle systems


def limit_flow(spec, N_hint, seed, h=1e-3):
    """Limit measure flow chosen by the scenario's oracle tag."""
    kernel = spec.coeffs
    if spec.init[0] == "point":
        nodes, w = np.array([float(spec.init[1])]), np.ones(1)
    else:
        nodes, w = MK.gauss_hermite_nodes(spec.init[1], spec.init[2])
    if spec.oracle == "closed_form" and kernel.mean_field_closed_form:
        return MK.constant_flow(nodes, w, spec.T)
    if spec.oracle == "picard":
        return MK.picard_flow(kernel, nodes, w, spec.T, h)
    return MK.cloud_flow(kernel, 16 * N_hint, spec.T, _stream(seed, "cloud", spec), spec.init)


def chaos(spec, grid, replicas, seed, workers=None):
    kernel = spec.coeffs
    ns = [int(n) for n in grid]
    flow = limit_flow(spec, max(ns), seed)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "chaos", spec)
    for N in ns:
        st = root.child("N", N)
        init = MK.init_states(st.child("init", 0), N, replicas, spec.init)
        b = MK.run_particles(kernel, init, spec.T, st, flow=flow, workers=workers)
        if np.any(b.diverged >= 0):
            raise DivergenceError(int(np.min(b.diverged[b.diverged >= 0])),
                                  f"particle system {spec.name} diverged at N={N}")
        ce = MK.chaos_error(b)
        res.report.add(spec.name, "N", N, "chaos_gap", ce.value, ce.ci, replicas)
        res.report.add(spec.name, "N", N, "chaos_gap_worst_particle", ce.worst_particle,
                       math.nan, replicas)
    if len(ns) >= 3:
        res.fit("chaos_gap", spec.targets.get("chaos"))
    return res


def fluctuation(spec, grid, replicas, seed, workers=None):
    kernel = spec.coeffs
    ns = [int(n) for n in grid]
    flow = limit_flow(spec, max(ns), seed)
    limit = flow.mean_sq_drift_integral(kernel)
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "fluctuation", spec)
    for N in ns:
        st = root.child("N", N)
        init = MK.init_states(st.child("init", 0), N, replicas, spec.init)
        b = MK.run_particles(kernel, init, spec.T, st, fluct=True, workers=workers)
        f = MK.fluctuation_stat(b)
        res.report.add(spec.name, "N", N, "fluctuation_variance", f.variance, f.ci, replicas)
        res.report.add(spec.name, "N", N, "fluctuation_limit", limit, 0.0, replicas)
        res.report.add(spec.name, "N", N, "fluctuation_ratio", f.variance / limit,
                       f.ci / limit, replicas)
        if "fluctuation" in spec.targets:
            res.verdicts.append(Verdict(f"fluctuation_ratio[N={N}]", f.variance / limit,
                                        *spec.targets["fluctuation"]))
    return res


# --------------------------------------------------------------------------
# vorticity


def nse(spec, grid, replicas, seed, workers=None):
    p = spec.coeffs
    X1, X2 = nse2d.mesh(p.G)
    u_ex = np.stack(p.exact_u(0.0, X1, X2))
    res = ExperimentResult(ErrorReport())
    root = _stream(seed, "nse", spec)
    corrected = []
    for i, eps in enumerate(grid):
        r = nse2d.solve_nse_poisson(p.w0, p.nu, eps, p.T, root.child("grid", i), M=replicas,
                                    G=p.G, slices=p.slices, workers=workers)
        err = float(np.max(np.abs(r.u[0] - u_ex)))
        floor = float(r.noise_floor[0])
        res.report.add(spec.name, "eps", eps, "nse_sup_error", err, floor, replicas)
        res.report.add(spec.name, "eps", eps, "nse_noise_floor", floor, 0.0, replicas)
        res.report.add(spec.name, "eps", eps, "nse_corrected_error", err - floor, floor,
                       replicas)
        res.report.add(spec.name, "eps", eps, "picard_sweeps", r.sweeps, 0.0, replicas)
        corrected.append((eps, err, err - floor))
    errs = [e for _, e, _ in corrected]
    if len(grid) >= 2:
        res.verdicts.append(Verdict("sup_error_strictly_decreasing",
                                    float(all(b < a for a, b in zip(errs, errs[1:]))), 1.0, 1.0))
    lo, hi = spec.targets.get("nse", (1.4, 2.8))
    for (e1, _, c1), (e2, _, c2) in zip(corrected, corrected[1:]):
        ratio = c1 / c2 if c2 > 0 else math.inf
        res.verdicts.append(Verdict(f"halving_ratio[eps={e1!r}/{e2!r}]", ratio, lo, hi))
    spec_w = nse2d.spectral_reference(p.w0, p.nu, p.T, [0.0], p.G)[0]
    gap = float(np.max(np.abs(spec_w - p.exact_w(0.0, X1, X2))))
    res.report.add(spec.name, "s", 0.0, "spectral_error", gap, 0.0, 1)
    res.verdicts.append(Verdict("spectral_error", gap, 0.0, 1e-8))
    if len(grid) >= 3:
        try:
            res.fit("nse_corrected_error")
        except ValueError as e:
            res.notes.append(f"no slope fit: {e}")
    return res


RUNNERS = {"strong": strong, "weak": weak, "chaos": chaos, "invariant": invariant, "clt": clt,
           "donsker": donsker, "nse": nse, "fluctuation": fluctuation, "stable": stable,
           "tail": tail}
GRID_KIND = {"chaos": "n", "fluctuation": "n"}


def default_kind(spec):
    """Kind used by ``rates`` when none is given."""
    return {"sde": "weak" if "weak" in spec.targets and "strong" not in spec.targets else "strong",
            "mckean": "chaos", "nse": "nse"}[spec.kind]


def run_experiment(spec, kind, grid, replicas, seed, workers=None):
    if kind == "rates":
        kind = default_kind(spec)
    if kind not in RUNNERS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not grid:
        raise ValueError("parameter grid must be nonempty")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    expected = {"nse": "nse", "chaos": "mckean", "fluctuation": "mckean"}.get(kind, "sde")
    if spec.kind != expected:
        raise ValueError(f"kind {kind!r} does not apply to {spec.kind} scenario {spec.name}")
    return RUNNERS[kind](spec, list(grid), int(replicas), int(seed), workers)
