"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL criterion N`` line (also collected in
the terminal summary) and fails when its criterion fails.  Expensive
solves are shared through module fixtures; a criterion's runtime counts
the solves it owns.
"""

import math
import time

import numpy as np
import pytest

from magloc.bridge import (BridgeSpec, MCParams, levy_characteristic, near_deterministic_fraction,
                           path_integral_samples, phase_expectation, rotational_scaling_probe, verify_theorem)
from magloc.eig import localization_point, prolong, smallest_eigenpairs
from magloc.export import dumps
from magloc.grid import build_grid
from magloc.landscape import (dirichlet_pairs, improved_landscape_bound, landscape_check, probe_points, torsion,
                              torsion_identity)
from magloc.magop import assemble, dirichlet_spectrum
from magloc.predict import corollary2_report
from magloc.vfield import example1, example3, example4, helmholtz_decompose, sample_field

pytestmark = pytest.mark.acceptance

SQ = (-1.0, 1.0, -1.0, 1.0)
TOL = 1e-8

REF_EXAMPLE3 = [92.8, 132.6, 163.8, 167.2, 167.2, 185.5, 205.3, 220.5, 234.8]
REF_EXAMPLE4 = [62.030, 85.610, 85.875, 86.150, 89.936, 89.949, 99.499, 111.91, 111.95]
REF_EXAMPLE1 = [120.52, 139.80, 170.62, 211.07]

# JSON of the Monte Carlo criteria at workers=1, replayed by criterion 15
MC_JSON = {}


@pytest.fixture
def verdict(record_property, capsys):
    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        record_property("acceptance", line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return report


class Solved:
    def __init__(self, expr, n, k, start=None, coarse=None):
        t0 = time.perf_counter()
        self.grid = build_grid(SQ, n)
        self.A = sample_field(expr, self.grid)
        self.op = assemble(self.grid, self.A)
        init = None
        if coarse is not None:
            init = prolong(coarse.grid, self.grid, np.column_stack([p.psi for p in coarse.pairs]), self.A)
        self.pairs = smallest_eigenpairs(self.op, k, tol=TOL, start=init)
        self.seconds = time.perf_counter() - t0

    @property
    def lams(self):
        return np.array([p.lam for p in self.pairs])


@pytest.fixture(scope="module")
def ex3():
    return Solved(example3(50.0), 257, 9)


@pytest.fixture(scope="module")
def ex4():
    return Solved(example4(50.0), 257, 9)


@pytest.fixture(scope="module")
def ex1():
    """Example 1 at n = 513 and 1025; each level starts from the one below."""
    s257 = Solved(example1(1000.0), 257, 4)
    s513 = Solved(example1(1000.0), 513, 4, coarse=s257)
    s1025 = Solved(example1(1000.0), 1025, 4, coarse=s513)
    del s257.op, s513.op
    return s257, s513, s1025


@pytest.fixture(scope="module")
def ex3_theorem(ex3):
    t0 = time.perf_counter()
    parts = helmholtz_decompose(ex3.A)
    return parts, time.perf_counter() - t0


def rel(a, b):
    return np.abs(np.asarray(a) - np.asarray(b)) / np.abs(np.asarray(b))


# --- spectra ----------------------------------------------------------------------

def test_criterion_01_free_spectrum(verdict):
    t0 = time.perf_counter()
    g = build_grid(SQ, 129)
    pairs = smallest_eigenpairs(assemble(g), 4, tol=TOL)
    sec = time.perf_counter() - t0
    lam = np.array([p.lam for p in pairs])
    exact = dirichlet_spectrum(g)[0][:4]
    e1 = rel(lam[0], math.pi ** 2 / 2)
    e4 = rel(lam, exact).max()
    ok = e1 <= 0.005 and e4 <= 1e-10 and sec < 10
    verdict(1, ok, f"lambda_1 = {lam[0]:.6f} ({100 * e1:.3f}% from pi^2/2), "
                   f"max rel. gap to discrete closed form {e4:.1e}, {sec:.1f} s")


def _match(P, Q):
    """Least-squares Q ~ P C over a cluster; returns max nodal deviation and ||C^H C - I||."""
    C, *_ = np.linalg.lstsq(P, Q, rcond=None)
    return float(np.max(np.abs(Q - P @ C))), float(np.max(np.abs(C.conj().T @ C - np.eye(C.shape[1]))))


def test_criterion_02_gauge_invariance(verdict):
    t0 = time.perf_counter()
    g = build_grid(SQ, 129)
    base = example3(50.0)
    A = sample_field(base, g)
    # g = x^2 - y^2 + xy, grad g = (2x + y, x - 2y)
    Ag = sample_field((f"{base[0]} + 2*x + y", f"{base[1]} + x - 2*y"), g)
    k = 5  # closes the degenerate pair near 167
    P = smallest_eigenpairs(assemble(g, A), k, tol=TOL)
    Q = smallest_eigenpairs(assemble(g, Ag), k, tol=TOL)
    sec = time.perf_counter() - t0
    dlam = max(abs(p.lam - q.lam) / max(p.lam, 1.0) for p, q in zip(P, Q))
    X, Y = g.interior_mesh()
    D = np.exp(1j * (X ** 2 - Y ** 2 + X * Y).ravel())
    lam = np.array([p.lam for p in P])
    dev, unit = 0.0, 0.0
    start = 0
    while start < k:
        stop = start + 1
        while stop < k and lam[stop] - lam[stop - 1] <= 1e-4 * lam[stop]:
            stop += 1
        Pc = np.column_stack([D * P[j].psi for j in range(start, stop)])
        Qc = np.column_stack([Q[j].psi for j in range(start, stop)])
        d, u = _match(Pc, Qc)
        dev, unit = max(dev, d), max(unit, u)
        start = stop
    ok = dlam <= 10 * TOL and dev <= 1e-6 and unit <= 1e-6 and sec < 120
    verdict(2, ok, f"max spectral gap {dlam:.1e} (limit {10 * TOL:.0e}), eigenfunction deviation "
                   f"after the gauge phase {dev:.1e}, {sec:.1f} s")


def test_criterion_03_example3(verdict, ex3):
    err = rel(ex3.lams, REF_EXAMPLE3)
    pair = ex3.lams[4] - ex3.lams[3]
    ok = err.max() <= 0.02 and ex3.seconds < 600
    verdict(3, ok, "lambda = " + ", ".join(f"{v:.2f}" for v in ex3.lams)
            + f"; max rel. error {100 * err.max():.2f}%, degenerate pair split {pair:.1e}, {ex3.seconds:.0f} s")


def test_criterion_04_example4(verdict, ex4):
    err = rel(ex4.lams, REF_EXAMPLE4)
    ok = err.max() <= 0.02 and ex4.seconds < 600
    verdict(4, ok, "lambda = " + ", ".join(f"{v:.2f}" for v in ex4.lams)
            + f"; max rel. error {100 * err.max():.2f}%, {ex4.seconds:.0f} s")


def test_criterion_05_example1_extrapolated(verdict, ex1):
    _, c, f = ex1
    sec = sum(s.seconds for s in ex1)
    # second-order scheme: lambda ~ lambda* + C h^2
    rich = (4.0 * f.lams - c.lams) / 3.0
    err = rel(rich, REF_EXAMPLE1)
    ok = err.max() <= 0.05 and sec < 1800
    verdict(5, ok, "Richardson lambda = " + ", ".join(f"{v:.2f}" for v in rich)
            + " vs " + ", ".join(f"{v:.2f}" for v in REF_EXAMPLE1)
            + f"; rel. errors " + ", ".join(f"{100 * e:.1f}%" for e in err) + f", {sec:.0f} s")


# --- Monte Carlo ------------------------------------------------------------------

def run_levy(workers):
    F = ("-0.5*y", "0.5*x")
    out = {}
    for t in (1.0, 0.05):
        spec = BridgeSpec((0, 0), (0, 0), t, n_steps=1024, n_paths=100_000, seed=6, key=("levy", str(t)))
        s = phase_expectation(spec, F, workers=workers)
        out[str(t)] = {"modulus": s.modulus, "stderr": s.stderr, "mean_phase": s.mean_phase}
    return out


def run_conservative(workers):
    x0, y = (0.0, 0.0), (0.5, 0.5)
    target = (y[0] ** 2 - y[1] ** 2) / 2 - (x0[0] ** 2 - x0[1] ** 2) / 2
    out = {}
    for n in (256, 1024, 4096):
        spec = BridgeSpec(x0, y, 0.1, n_steps=n, n_paths=10_000, seed=7, key=("conservative",))
        D = path_integral_samples(spec, ("x", "-y"), workers) - target
        out[str(n)] = {"std": float(np.std(D, ddof=1)), "mean": float(np.mean(D))}
    return out


def run_theorem(ex3, parts, workers):
    ground = ex3.pairs[0]
    mc = MCParams(n_paths=10_000, n_steps=256, seed=8, workers=workers)
    return {str(c): verify_theorem(ground, parts, c / ground.lam, mc, m=15, grid=ex3.grid).to_dict()
            for c in (0.25, 1.0)}


def run_corollary1(ex3, parts, workers):
    ground = ex3.pairs[0]
    x0 = localization_point(ground, ex3.grid)
    t = 0.01 / ground.lam
    mc = MCParams(n_paths=10_000, n_steps=256, seed=9, workers=workers)
    frac, rows = near_deterministic_fraction(x0, t, parts.f, mc, domain=ex3.grid)
    return {"fraction": frac, "t": t, "x0": list(x0),
            "targets": [{"y": list(r.y), "window_mass": r.window_mass, "modulus": r.modulus,
                         "survival": r.survival} for r in rows]}


def run_rotation(workers):
    s1, s2, ratio = rotational_scaling_probe(1.0, 1.0, MCParams(n_paths=100_000, n_steps=256, seed=10,
                                                                 workers=workers))
    return {"spread_t": s1, "spread_2t": s2, "ratio": ratio}


def test_criterion_06_levy_oracle(verdict):
    t0 = time.perf_counter()
    res = run_levy(1)
    sec = time.perf_counter() - t0
    MC_JSON[6] = dumps(res)
    big, small = res["1.0"], res["0.05"]
    e_big = abs(big["modulus"] - levy_characteristic(1.0, 1.0))
    e_small = abs(small["modulus"] - (1 - 0.05 ** 2 / 6))
    ok = e_big <= 3 * big["stderr"] and e_small <= 3 * small["stderr"] and sec < 60
    verdict(6, ok, f"|E| = {big['modulus']:.5f} vs 1/sinh(1) = {1 / math.sinh(1):.5f} "
                   f"({e_big / big['stderr']:.2f} se); t=0.05: {small['modulus']:.6f} vs "
                   f"{1 - 0.05 ** 2 / 6:.6f} ({e_small / small['stderr']:.2f} se), {sec:.0f} s")


def test_criterion_07_conservative_determinism(verdict):
    t0 = time.perf_counter()
    res = run_conservative(1)
    sec = time.perf_counter() - t0
    MC_JSON[7] = dumps(res)
    n = np.array([256, 1024, 4096])
    std = np.array([res[str(k)]["std"] for k in n])
    slope = float(np.polyfit(np.log(n), np.log(std), 1)[0])
    var_slope = float(np.polyfit(np.log(n), np.log(std ** 2), 1)[0])
    ok = abs(slope + 1) <= 0.3 and sec < 120
    verdict(7, ok, f"std " + ", ".join(f"{v:.2e}" for v in std) + f": log-log slope {slope:.3f} "
                   f"(target -1 +- 0.3; variance slope {var_slope:.3f}), {sec:.0f} s")


def test_criterion_08_theorem(verdict, ex3, ex3_theorem):
    parts, dec = ex3_theorem
    t0 = time.perf_counter()
    res = run_theorem(ex3, parts, 1)
    sec = time.perf_counter() - t0 + dec
    MC_JSON[8] = dumps(res)
    q, o = res["0.25"], res["1.0"]
    ok = q["pass"] and o["pass"] and q["rhs"] == pytest.approx(math.exp(-0.25), rel=1e-12) and sec < 900
    verdict(8, ok, f"t=0.25/lam: lhs {q['lhs']:.4f} +- {q['lhs_error_budget']:.4f} vs rhs {q['rhs']:.4f} "
                   f"(pass={q['pass']}); t=1/lam: lhs {o['lhs']:.4f} +- {o['lhs_error_budget']:.4f} vs "
                   f"rhs {o['rhs']:.4f} (pass={o['pass']}), {sec:.0f} s")


def test_criterion_09_corollary1(verdict, ex3, ex3_theorem):
    parts, _ = ex3_theorem
    t0 = time.perf_counter()
    res = run_corollary1(ex3, parts, 1)
    sec = time.perf_counter() - t0
    MC_JSON[9] = dumps(res)
    ok = res["fraction"] >= 0.9 and sec < 900
    verdict(9, ok, f"near-deterministic fraction {res['fraction']:.3f} over {len(res['targets'])} targets "
                   f"at t = 0.01/lambda, {sec:.0f} s")


def test_criterion_10_rotational_scaling(verdict):
    t0 = time.perf_counter()
    res = run_rotation(1)
    sec = time.perf_counter() - t0
    MC_JSON[10] = dumps(res)
    ok = abs(res["ratio"] - 4) <= 0.4 and sec < 60
    verdict(10, ok, f"spread(t) {res['spread_t']:.4f}, spread(2t) {res['spread_2t']:.4f}, "
                    f"ratio {res['ratio']:.3f} (target 4 +- 10%; std of Levy area scales like t), {sec:.0f} s")


# --- landscape and prediction --------------------------------------------------------

def test_criterion_11_landscape(verdict, ex1, ex3, ex4):
    worst = {}
    for name, s in (("example1 n=513", ex1[1]), ("example1 n=1025", ex1[2]), ("example3", ex3),
                    ("example4", ex4)):
        worst[name] = max(landscape_check(s.pairs, torsion(s.grid)).ratios)
    top = max(worst.values())
    ok = top <= 1 + 1e-6
    verdict(11, ok, "max ratios " + ", ".join(f"{k} {v:.4f}" for k, v in worst.items()))


def test_criterion_12_torsion_identity(verdict):
    t0 = time.perf_counter()
    g = build_grid(SQ, 65)
    K = 100
    pairs = smallest_eigenpairs(assemble(g), K, tol=1e-10)
    exact = dirichlet_spectrum(g)[0][:K]
    eig_err = rel([p.lam for p in pairs], exact).max()
    info = {}
    v = torsion(g, info=info)
    checks = torsion_identity(pairs, v, probe_points(g), v_error=info["torsion"].error_bound)
    sec = time.perf_counter() - t0
    centre = min(checks, key=lambda c: abs(c.x[0]) + abs(c.x[1]))
    # the truncation remainder is exact, so gap ~ remainder; what is left over is solver error
    closure = max(abs(c.modal + c.remainder - c.v) for c in checks)
    ok = all(c.ok for c in checks) and centre.budget < 0.01 * centre.v and sec < 300
    verdict(12, ok, f"{sum(c.ok for c in checks)}/9 probes within budget, worst gap/budget "
                    f"{max(c.gap / c.budget for c in checks):.7f} (closure |modal + remainder - v| {closure:.1e}, "
                    f"solver budget >= {min(c.solver_budget for c in checks):.1e}), "
                    f"centre budget {100 * centre.budget / centre.v:.3f}% "
                    f"of v = {centre.v:.5f}, eigenvalues vs closed form {eig_err:.1e}, {sec:.0f} s")


def test_criterion_13_improved_bound(verdict):
    t0 = time.perf_counter()
    g = build_grid(SQ, 129)
    v = torsion(g)
    dp = dirichlet_pairs(g, 100)
    mc = MCParams(n_paths=400, n_steps=64, seed=13)
    rows = []
    for label, expr in (("example3", example3(50.0)), ("F=0", ("0", "0"))):
        A = sample_field(expr, g)
        parts = helmholtz_decompose(A)
        pair = smallest_eigenpairs(assemble(g, A), 1, tol=TOL)[0]
        for x in probe_points(g):
            b = improved_landscape_bound(x, pair, parts, dp, mc, v=v, n_t=16, targets=7)
            coincide = abs(b.improved - b.original) <= b.budget if label == "F=0" else True
            rows.append((label, b, coincide))
    sec = time.perf_counter() - t0
    ordered = all(b.ordered for _, b, _ in rows)
    coincide = all(c for *_, c in rows)
    ex = [b.improved / b.original for lab, b, _ in rows if lab == "example3"]
    ok = ordered and coincide and sec < 1200
    verdict(13, ok, f"ordered at {sum(b.ordered for _, b, _ in rows)}/{len(rows)} probes; example3 "
                    f"improved/original in [{min(ex):.3f}, {max(ex):.3f}]; F=0 coincides within budget: "
                    f"{coincide}, {sec:.0f} s")


def test_criterion_14_curl_predictor(verdict, ex1):
    s = ex1[2]
    rep = corollary2_report(s.pairs, s.A, 0.1)
    finite = all(math.isfinite(r.ratio) for r in rep.rows)
    ok = all(r.in_sublevel for r in rep.rows) and finite
    verdict(14, ok, "x0 = " + "; ".join(f"({r.x0[0]:.3f}, {r.x0[1]:.3f}) pct {r.percentile:.2f}" for r in rep.rows)
            + f"; |curl A(x0)|/lambda^2 max {rep.max_ratio:.3g}")


# --- determinism -----------------------------------------------------------------------

def test_criterion_15_determinism(verdict, ex3, ex3_theorem):
    parts, _ = ex3_theorem
    runs = {6: run_levy, 7: run_conservative, 10: run_rotation,
            8: lambda w: run_theorem(ex3, parts, w), 9: lambda w: run_corollary1(ex3, parts, w)}
    same = {}
    for k, fn in runs.items():
        ref = MC_JSON.get(k) or dumps(fn(1))
        same[k] = all(dumps(fn(w)) == ref for w in (4, 8))
    ok = all(same.values())
    verdict(15, ok, "byte-identical JSON under 1/4/8 workers: "
                    + ", ".join(f"criterion {k} {'yes' if v else 'no'}" for k, v in sorted(same.items())))
