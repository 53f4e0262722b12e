"""End-to-end acceptance runs through the command-line runner.

Each criterion is one CLI invocation at its stated configuration; the
determinism criterion repeats every run with another worker count and
compares the CSV bytes.
"""
import pytest

from cpflow.cli import main

pytestmark = pytest.mark.acceptance

SEED = 0

CRITERIA = {
    1: ("oscillatory isometry", ["--scenario", "oscillatory", "--kind", "strong",
                                 "--eps", "1e-4", "--replicas", "2000"]),
    2: ("strong ODE rate", ["--scenario", "lipschitz_1d", "--kind", "strong", "--replicas", "500"]),
    3: ("weak rate via exact moments", ["--scenario", "linear_ou", "--kind", "weak",
                                        "--eps", "0.1,0.05,0.025,0.0125", "--replicas", "100000"]),
    4: ("Filippov rate", ["--scenario", "filippov_sign", "--kind", "strong", "--replicas", "500"]),
    5: ("Donsker limit", ["--scenario", "linear_ou", "--kind", "donsker", "--eps", "1e-3",
                          "--replicas", "5000"]),
    6: ("stable-driven stability", ["--scenario", "stable_drift", "--kind", "stable",
                                    "--eps", "1e-2,1e-3", "--replicas", "20000"]),
    7: ("propagation of chaos", ["--scenario", "mckean_sin", "--kind", "chaos",
                                 "--n", "8,16,32,64,128,256", "--replicas", "64"]),
    8: ("fluctuation CLT", ["--scenario", "mckean_sin", "--kind", "fluctuation", "--n", "128",
                            "--replicas", "500"]),
    9: ("invariant measure", ["--scenario", "linear_ou", "--kind", "invariant", "--eps", "1e-2",
                              "--replicas", "16"]),
    10: ("path-scale CLT", ["--scenario", "linear_ou", "--kind", "clt", "--eps", "1e-3",
                            "--replicas", "2000"]),
    11: ("vorticity rate", ["--scenario", "taylor_green", "--kind", "nse",
                            "--eps", "0.02,0.01,0.005", "--replicas", "2000"]),
    12: ("tail bound", ["--scenario", "linear_ou", "--kind", "tail", "--eps", "1e-2",
                        "--replicas", "100000"]),
}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    done = {}

    def get(n, workers=1):
        if (n, workers) not in done:
            out = root / f"c{n:02d}_w{workers}"
            code = main(["run", *CRITERIA[n][1], "--seed", str(SEED), "--workers", str(workers),
                         "--out", str(out)])
            summary = (out / "summary.txt").read_text() if code == 0 else ""
            done[n, workers] = (code, out, summary)
        return done[n, workers]

    return get


def verdict_lines(summary):
    return [line for line in summary.splitlines() if ": PASS " in line or ": FAIL " in line]


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, runs, acceptance_log):
    code, out, summary = runs(n)
    verdicts = verdict_lines(summary)
    ok = code == 0 and bool(verdicts) and "overall: PASS" in summary
    detail = "; ".join(line.split(" target=")[0] for line in verdicts) or f"exit {code}"
    acceptance_log.append(f"criterion {n:2d} {CRITERIA[n][0]}: {'PASS' if ok else 'FAIL'} "
                          f"({detail})")
    assert code == 0
    assert verdicts
    assert "overall: PASS" in summary, summary


def test_criterion_13_determinism(runs, acceptance_log):
    mismatched = []
    for n in sorted(CRITERIA):
        a = runs(n, 1)[1] / "results.csv"
        b = runs(n, 3)[1] / "results.csv"
        if not (a.exists() and b.exists() and a.read_bytes() == b.read_bytes()):
            mismatched.append(n)
    ok = not mismatched
    acceptance_log.append(f"criterion 13 determinism across worker counts: "
                          f"{'PASS' if ok else 'FAIL'} (mismatched: {mismatched or 'none'})")
    assert ok, mismatched
