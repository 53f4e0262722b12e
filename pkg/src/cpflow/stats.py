"""Error metrics, distribution distances, rate fits and long-run averages."""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .scheme import DivergenceError, simulate_path

Z95 = 1.959963984540054
CSV_COLUMNS = ["scenario", "param_name", "param", "metric", "estimate", "ci", "replicas"]


@dataclass(frozen=True)
class Row:
    scenario: str
    param_name: str
    param: float
    metric: str
    estimate: float
    ci: float
    replicas: int

    def __post_init__(self):
        if not self.ci >= 0 and not math.isnan(self.ci):
            raise ValueError("CI half-width must be nonnegative")


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)
    slope: float = math.nan
    stderr: float = math.nan

    def add(self, *args, **kw):
        self.rows.append(Row(*args, **kw))
        return self.rows[-1]

    def metric(self, name):
        return [r for r in self.rows if r.metric == name]

    def fit(self, metric):
        pts = [(r.param, r.estimate, r.ci) for r in self.metric(metric)]
        self.slope, self.stderr = fit_rate(pts)
        return self.slope, self.stderr

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.scenario, r.param_name, _fmt(r.param), r.metric, _fmt(r.estimate),
                        _fmt(r.ci), r.replicas])


def _fmt(v):
    return repr(float(v))


def mean_ci(values):
    """Mean and 95% normal-approximation half-width."""
    v = np.asarray(values, dtype=np.float64)
    m = v.size
    if m == 0:
        return math.nan, math.nan
    sd = float(np.std(v, ddof=1)) if m > 1 else 0.0
    return float(np.mean(v)), Z95 * sd / math.sqrt(m)


def path_sup_err2(path, reference):
    """sup_t |X_t - x(t)|^2 over both sides of every jump, the reference grid and T."""
    times = path.times
    grid = reference.t[reference.t <= path.T]
    ct = np.concatenate([[0.0], times, times, [path.T], grid])
    cy = np.concatenate([path.states[:1], path.states[:-1], path.states[1:], path.states[-1:],
                         path.states[np.searchsorted(times, grid, side="right")]])
    return float(np.max(np.sum((cy - reference.at(ct)) ** 2, axis=1)))


def strong_error(paths, reference, scenario="", param_name="eps", param=math.nan,
                 metric="sup_sq_error"):
    """Replica mean of sup_t |X^eps_t - X_t|^2 with CI."""
    vals = [path_sup_err2(p, reference) for p in paths]
    est, ci = mean_ci(vals)
    return Row(scenario, param_name, float(param), metric, est, ci, len(vals))


def weak_error(samples, phi, exact, scenario="", param_name="eps", param=math.nan,
               metric="weak_error"):
    """|mean phi(X_T) - exact| with the CI of the mean."""
    v = phi(np.asarray(samples, dtype=np.float64))
    m, ci = mean_ci(v)
    return Row(scenario, param_name, float(param), metric, abs(m - exact), ci, len(v))


def fit_rate(points):
    """OLS slope of log(estimate) on log(parameter) with its standard error."""
    pts = [(p, e) for p, e, *_ in points]
    kept = [(p, e) for p, e in pts if e > 0 and p > 0]
    if len(kept) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(kept)} nonpositive points from rate fit")
    if len(kept) < 3:
        raise ValueError("rate fit needs at least 3 positive points")
    x = np.log([p for p, _ in kept])
    y = np.log([e for _, e in kept])
    res = sps.linregress(x, y)
    return float(res.slope), float(res.stderr)


def ks_statistic(samples, cdf):
    """sup |F_n - F| via the sorted-sample formula."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < 100:
        raise ValueError("KS statistic needs at least 100 samples")
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def wasserstein1_1d(a, b, rng=None):
    """Exact empirical W1 in one dimension: mean |sorted(a) - sorted(b)|.

    Unequal sizes are brought to the smaller size by resampling without replacement.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size != b.size:
        rng = np.random.default_rng(0) if rng is None else rng
        n = min(a.size, b.size)
        a = np.sort(rng.choice(a, n, replace=False)) if a.size > n else a
        b = np.sort(rng.choice(b, n, replace=False)) if b.size > n else b
    return float(np.mean(np.abs(a - b)))


def sliced_wasserstein1(a, b, n_proj=64, seed=0):
    """Average 1-D W1 over random unit projections, for d > 1 samples (n, d)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dirs = np.random.default_rng(seed).standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein1_1d(a @ u, b @ u) for u in dirs]))


def path_time_average(path, g, t0, t1):
    """(1 / (t1 - t0)) * integral of g(X_s) over [t0, t1], exact on the step path."""
    edges = np.concatenate([[0.0], path.times, [path.T]])
    lo = np.maximum(edges[:-1], t0)
    hi = np.minimum(edges[1:], t1)
    w = np.maximum(hi - lo, 0.0)
    vals = np.asarray(g(path.states.T), dtype=np.float64)
    return float(np.sum(vals * w) / (t1 - t0))


def invariant_estimate(coeffs, eps, burn_in, horizon, g, stream, x0=None, replica=0, name=""):
    """Long-run time average of g along one scheme path over [burn_in, horizon]."""
    if not burn_in < horizon:
        raise ValueError("burn_in must be smaller than horizon")
    x0 = np.zeros(coeffs.d) if x0 is None else x0
    try:
        path = simulate_path(coeffs, x0, eps, horizon, stream, replica=replica)
    except DivergenceError as e:
        raise DivergenceError(e.step, f"scenario {name or '?'} is not dissipative at eps={eps}: "
                                      f"diverged at step {e.step}") from None
    return path_time_average(path, g, burn_in, horizon)


def clt_limit_variance(reference, b, grad_b):
    """int_0^T exp(2 int_s^T b'(r, X_r) dr) b(s, X_s)^2 ds along a scalar reference path."""
    t = reference.t
    x = reference.x[:, 0]
    if reference.x.shape[1] != 1:
        raise ValueError("limit variance quadrature is implemented for d = 1")
    bv = np.asarray(b(t, x[None]), dtype=np.float64).reshape(-1)
    gv = np.asarray(grad_b(t, x[None]), dtype=np.float64).reshape(-1)
    # G(s) = int_s^T g dr by trapezoid from the right end
    seg = 0.5 * (gv[1:] + gv[:-1]) * np.diff(t)
    G = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    f = np.exp(2 * G) * bv ** 2
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(t)))


@dataclass(frozen=True)
class CltResult:
    ratio: float
    variance: float
    limit_variance: float
    ci: float


def clt_check(samples, reference_value, eps, limit_variance):
    """Var of Z = (X^eps_T - X_T) / sqrt(eps) against the limiting variance."""
    z = (np.asarray(samples, dtype=np.float64).ravel() - reference_value) / math.sqrt(eps)
    var = float(np.var(z, ddof=1))
    # delta-method CI on the variance from the fourth moment
    m4 = float(np.mean((z - z.mean()) ** 4))
    ci = Z95 * math.sqrt(max(m4 - var ** 2, 0.0) / z.size)
    if limit_variance == 0:
        return CltResult(math.nan if var else 1.0, var, 0.0, ci)
    return CltResult(var / limit_variance, var, limit_variance, ci / limit_variance)
