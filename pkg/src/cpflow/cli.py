"""Command-line experiment runner: ``cpflow run|rates``."""
import argparse
import os
import sys
from dataclasses import dataclass, field, fields

from ._pool import default_workers
from .experiments import GRID_KIND, KINDS, default_kind, run_experiment
from .mckean import PicardError
from .nse2d import NonConvergenceError
from .scenarios import REGISTRY, UnknownScenarioError, get_scenario
from .scheme import DivergenceError, TruncationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_FAIL = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str
    kind: str = None
    eps: list = field(default_factory=list)
    n: list = field(default_factory=list)
    replicas: int = None
    seed: int = 0
    out: str = "cpflow_out"
    workers: int = None
    check: bool = False

    def grid(self, spec):
        key = GRID_KIND.get(self.kind, "eps")
        vals = getattr(self, key) or list(spec.n_grid if key == "n" else spec.eps_grid)
        return key, vals


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(float(v)) for v in _floats(text)]


def build_parser():
    p = argparse.ArgumentParser(prog="cpflow", description="Poisson-clock scheme experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "rates"):
        s = sub.add_parser(name)
        s.add_argument("--scenario")
        s.add_argument("--kind", choices=KINDS)
        s.add_argument("--eps", type=_floats, help="comma-separated eps grid")
        s.add_argument("--n", type=_ints, help="comma-separated particle counts")
        s.add_argument("--replicas", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out")
        s.add_argument("--check", action="store_true", default=None)
        s.add_argument("--config", help="TOML file whose keys mirror the flags")
    return p


def load_config(args):
    """Merge a TOML file with the flags; flags win."""
    values = {}
    if args.config:
        with open(args.config, "rb") as fh:
            values = tomllib.load(fh)
        unknown = set(values) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "scenario" not in values:
        raise ConfigError("--scenario is required")
    if "eps" in values:
        values["eps"] = _floats(values["eps"])
    if "n" in values:
        values["n"] = _ints(values["n"])
    cfg = RunConfig(**values)
    if cfg.workers is None:
        cfg.workers = default_workers()
    if cfg.seed < 0 or cfg.seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def _write_outputs(cfg, spec, kind, grid_key, grid, result):
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "results.csv"), "w", newline="") as fh:
        result.report.write_csv(fh)
    head = f"# scenario={spec.name} hash={spec.hash} seed={cfg.seed} kind={kind}\n"
    for metric in dict.fromkeys(r.metric for r in result.report.rows):
        rows = result.report.metric(metric)
        with open(os.path.join(cfg.out, f"plot_{metric}.dat"), "w") as fh:
            fh.write(head)
            fh.write(f"# {rows[0].param_name} estimate\n")
            for r in rows:
                fh.write(f"{r.param!r} {r.estimate!r}\n")
    lines = [f"scenario: {spec.name}", f"scenario_hash: {spec.hash}", f"kind: {kind}",
             f"seed: {cfg.seed}", f"replicas: {cfg.replicas}",
             f"grid: {grid_key}=" + ",".join(repr(float(g)) for g in grid)]
    for metric, (slope, se) in result.slopes.items():
        lines.append(f"slope[{metric}]: {slope!r} stderr={se!r}")
    lines += [v.line() for v in result.verdicts]
    lines += [f"note: {n}" for n in result.notes]
    lines.append(f"overall: {'PASS' if result.passed else 'FAIL'}")
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return lines


def run(cfg, rates=False, stdout=None, stderr=None):
    """Execute one configured experiment; returns the process exit status."""
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        spec = get_scenario(cfg.scenario)
    except UnknownScenarioError as e:
        print(f"error: {e}", file=stderr)
        return EXIT_USAGE
    kind = cfg.kind or (default_kind(spec) if rates else None)
    if kind is None:
        print("error: --kind is required for run", file=stderr)
        return EXIT_USAGE
    if kind == "rates":
        kind = default_kind(spec)
    cfg.kind = kind
    grid_key, grid = cfg.grid(spec)
    if cfg.replicas is None:
        cfg.replicas = spec.replicas
    if rates and len(grid) < 3:
        print(f"error: a rate fit needs at least 3 grid points, got {len(grid)}", file=stderr)
        return EXIT_USAGE
    try:
        result = run_experiment(spec, kind, grid, cfg.replicas, cfg.seed, cfg.workers)
    except (DivergenceError, TruncationError, NonConvergenceError, PicardError) as e:
        print(f"error: {type(e).__name__}: {e}", file=stderr)
        return EXIT_FAIL
    except ValueError as e:
        print(f"error: {e}", file=stderr)
        return EXIT_USAGE
    lines = _write_outputs(cfg, spec, kind, grid_key, grid, result)
    print("\n".join(lines), file=stdout)
    if cfg.check and not result.passed:
        return EXIT_FAIL
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ConfigError, OSError, tomllib.TOMLDecodeError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg, rates=args.command == "rates")


if __name__ == "__main__":
    sys.exit(main())
