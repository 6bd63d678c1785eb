"""The numbered acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, repeated in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from conftest import record_criterion
from oracles import cell_counting_weights, indicator, primal_entropy_weights

from medcal.basis import power_basis_for
from medcal.calibration import CalibrationProblem, calibrate, solve_dual
from medcal.estimators import PANELS, cbk_mu_many, cbs_mu_many, fit_mediation
from medcal.inference import influence_functions, variance_cbs
from medcal.kernels import KernelSpec
from medcal.simlab import (
    DgpSpec,
    McConfig,
    Scenario,
    TrueNuisances,
    eif_binary,
    generate,
    rng_for,
    run_mc,
    true_mu,
)
from medcal.tuning import tune

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEED = 20240101
BAND = 0.35

# Target 10^3 x ARMSE per panel (direct_at_t, direct_at_tprime, indirect_at_t, indirect_at_tprime).
TABLE1 = {
    ("cbs", "I", 500): (71.89, 65.69, 31.37, 27.52),
    ("cbs", "II", 500): (93.08, 104.05, 44.47, 26.40),
    ("cbs", "III", 500): (100.59, 113.00, 50.33, 27.80),
    ("cbs", "I", 1000): (56.35, 51.27, 24.87, 21.52),
    ("cbs", "II", 1000): (81.89, 91.69, 39.39, 19.22),
    ("cbs", "III", 1000): (88.79, 98.58, 43.76, 20.43),
    ("cbk", "I", 500): (99.32, 95.10, 32.50, 23.02),
    ("cbk", "II", 500): (122.37, 123.70, 29.95, 23.73),
    ("cbk", "III", 500): (129.99, 127.95, 38.18, 24.76),
    ("cbk", "I", 1000): (81.58, 78.41, 24.22, 17.17),
    ("cbk", "II", 1000): (90.83, 92.07, 22.92, 17.40),
    ("cbk", "III", 1000): (98.23, 96.20, 28.67, 17.88),
}
TABLE2 = {
    ("cbs", 500): (124.44, 122.47, 95.33, 43.33),
    ("cbs", 1000): (83.28, 84.43, 66.47, 29.90),
    ("ipw", 500): (125.53, 123.59, 94.83, 43.72),
    ("ipw", 1000): (85.16, 85.95, 66.80, 30.22),
}
CORNERS = ((0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0))


def within_band(value, target):
    return abs(value - target) <= BAND * target


@pytest.fixture(scope="module")
def table1_report():
    cfg = McConfig(scenarios=("I", "II", "III"), sizes=(500, 1000), trials=200, methods=("cbs", "cbk"),
                   seed=SEED, keep_trials=True)
    return run_mc(cfg)


@pytest.fixture(scope="module")
def binary4000_report():
    cfg = McConfig(scenarios=("binary",), sizes=(4000,), trials=200, methods=("cbs", "ipw"), seed=SEED,
                   grid=(1.0,), points=CORNERS)
    return run_mc(cfg)


# --------------------------------------------------------------------------


def test_criterion_1_discrete_cells():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    instances = 0
    while instances < 50:
        n = int(rng.integers(8, 201))
        t = rng.integers(0, 2, n).astype(float)
        z = rng.integers(0, 2, n).astype(float)
        if not all(np.any((t == a) & (z == b)) for a in (0, 1) for b in (0, 1)):
            continue
        fit = calibrate(indicator((0, 1)), indicator((0, 1)), t, z)
        worst = max(worst, float(np.max(np.abs(fit.in_sample_weights - cell_counting_weights(t, z)))))
        instances += 1
    ok = worst <= 1e-6
    record_criterion(1, ok, f"{instances} binary/binary samples, max |w - N_t N_z/(N N_tz)| = {worst:.2e} (tol 1e-6)")
    assert ok


def _primal_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 31))
    z = rng.uniform(-1, 1, n)
    t = 0.5 * z + rng.normal(size=n)
    return CalibrationProblem.from_data(power_basis_for(t, 2), power_basis_for(z, 2), t, z)


def test_criterion_2_dual_primal():
    worst = 0.0
    for seed in range(25):
        prob = _primal_instance(SEED + seed)
        fit = solve_dual(prob)
        primal = primal_entropy_weights(prob.features(), prob.target())
        worst = max(worst, float(np.max(np.abs(fit.in_sample_weights - primal))))
    ok = worst <= 1e-4
    record_criterion(2, ok, f"25 instances (N <= 30, k1 = kZ = 2), max |dual - primal| = {worst:.2e} (tol 1e-4)")
    assert ok


def test_criterion_3_balancing():
    fits = []
    for seed in range(10):
        for scenario in Scenario:
            data = generate(DgpSpec(scenario, 500), rng_for(SEED, 3, seed, list(Scenario).index(scenario)))
            for dims in ((2, 2, 2), (3, 3, 3), (4, 3, 2)):
                try:
                    f = fit_mediation(data, *dims, 4)
                except Exception:  # noqa: BLE001 - only converged fits are in scope
                    continue
                fits += [f.fit_x, f.fit_mx]
            tr = tune(data)
            f = fit_mediation(data, tr.k1, tr.kx, tr.kmx, tr.k0)
            fits += [f.fit_x, f.fit_mx]
    for seed in range(25):
        fits.append(solve_dual(_primal_instance(SEED + seed)))
    converged = [f for f in fits if f.converged]
    bal = max(f.balance_residual for f in converged)
    norm = max(abs(f.in_sample_weights.mean() - 1.0) for f in converged)
    ok = bal <= 1e-6 and norm <= 1e-6
    record_criterion(3, ok, f"{len(converged)} converged fits, max balance residual {bal:.2e}, "
                            f"max |mean(pi) - 1| {norm:.2e} (tol 1e-6)")
    assert ok


def test_criterion_4_constant_outcome():
    worst = {"cbs": 0.0, "cbk": 0.0}
    grid = np.linspace(-1.5, 1.5, 31)
    for scenario in ("I", "II", "III"):
        for c in (-2.5, 0.0, 3.0):
            data = generate(DgpSpec(scenario, 500), rng_for(SEED, 4)).with_outcome(np.full(500, c))
            fit = fit_mediation(data, 3, 3, 3, 3)
            worst["cbs"] = max(worst["cbs"], float(np.max(np.abs(cbs_mu_many(fit, grid, grid) - c))))
            kernel = KernelSpec("epanechnikov2", 2.34 * 500 ** -0.25, standardized=True)
            for tp in (0.0, 1.0):
                vals = cbk_mu_many(fit, grid, np.full(grid.size, tp), kernel)
                worst["cbk"] = max(worst["cbk"], float(np.max(np.abs(vals - c))))
    ok = max(worst.values()) <= 1e-10
    record_criterion(4, ok, f"max error CBS {worst['cbs']:.1e}, CBK {worst['cbk']:.1e} (tol 1e-10)")
    assert ok


def test_criterion_5_table1(table1_report):
    rep = table1_report
    misses = []
    lines = []
    for (method, scenario, n), targets in TABLE1.items():
        got = [rep.value(scenario, n, method, p) for p in PANELS]
        lines.append(f"{method} {scenario:>3} N={n:<4} " + " ".join(f"{g:7.2f}/{t:7.2f}" for g, t in zip(got, targets)))
        for p, g, t in zip(PANELS, got, targets):
            if not within_band(g, t):
                misses.append(f"{method}-{scenario}-{n}-{p}: {g:.1f} vs {t:.2f}")
    not_shrinking = [
        f"{s}-{p}"
        for s in ("I", "II", "III")
        for p in PANELS
        if not rep.value(s, 1000, "cbs", p) < rep.value(s, 500, "cbs", p)
    ]
    failures = sum(rep.failures.values())
    print("\n".join(lines))
    ok = not misses and not not_shrinking
    detail = (f"200 trials x 6 designs, {48 - len(misses)}/48 cells within +-35%, "
              f"CBS ARMSE(1000) < ARMSE(500) in {12 - len(not_shrinking)}/12, {failures} failed trials")
    if misses:
        detail += "; outside band: " + "; ".join(misses)
    if not_shrinking:
        detail += "; not shrinking: " + ", ".join(not_shrinking)
    record_criterion(5, ok, detail)
    assert ok


def test_criterion_6_table2():
    cfg = McConfig(scenarios=("binary",), sizes=(500, 1000), trials=200, methods=("cbs", "ipw"), seed=SEED)
    rep = run_mc(cfg)
    misses = []
    for (method, n), targets in TABLE2.items():
        for p, t in zip(PANELS, targets):
            g = rep.value("binary", n, method, p)
            if not within_band(g, t):
                misses.append(f"{method}-{n}-{p}: {g:.1f} vs {t:.2f}")
    ok = not misses
    got = {k: [round(rep.value("binary", k[1], k[0], p), 1) for p in PANELS] for k in TABLE2}
    record_criterion(6, ok, f"200 trials, {16 - len(misses)}/16 cells within +-35%; {got}"
                            + ("; outside band: " + "; ".join(misses) if misses else ""))
    assert ok


def test_criterion_7_point_estimates(binary4000_report):
    est = binary4000_report.point_estimates[("binary", 4000, "cbs")]
    truths = np.array([true_mu("binary", a, b) for a, b in CORNERS])
    bias = est.mean(axis=0) - truths
    ok = est.shape[0] >= 200 and bool(np.all(np.abs(bias) < 0.02))
    record_criterion(7, ok, f"{est.shape[0]} trials at N=4000, mean - truth = "
                            + ", ".join(f"{b:+.4f}" for b in bias) + " (tol 0.02)")
    assert ok


def test_criterion_8_coverage():
    hits = 0
    trials = 300
    for r in range(trials):
        data = generate(DgpSpec("binary", 1000), rng_for(SEED, 8, r))
        tr = tune(data)
        fit = fit_mediation(data, tr.k1, tr.kx, tr.kmx, tr.k0)
        mu = cbs_mu_many(fit, [1.0], [0.0])[0]
        se = variance_cbs(fit, 1.0, 0.0).se
        hits += abs(mu - 0.55) <= 1.959963984540054 * se
    cover = hits / trials
    ok = 0.90 <= cover <= 0.98
    record_criterion(8, ok, f"{trials} trials at N=1000, coverage of mu(1,0) = {cover:.3f} (band [0.90, 0.98])")
    assert ok


def test_criterion_9_eif():
    big = generate(DgpSpec("binary", 1_000_000), rng_for(SEED, 9, 0))
    oracle = float(np.mean(eif_binary(big, 1.0, 0.0) ** 2))
    vals = []
    for r in range(20):
        data = generate(DgpSpec("binary", 4000), rng_for(SEED, 9, r + 1))
        tr = tune(data)
        fit = fit_mediation(data, tr.k1, tr.kx, tr.kmx, tr.k0)
        psi, _ = influence_functions(fit, [1.0], [0.0], TrueNuisances(data))
        vals.append(float(np.mean(psi[:, 0] ** 2)))
    plug = float(np.mean(vals))
    rel = plug / oracle - 1.0
    ok = abs(rel) <= 0.25
    record_criterion(9, ok, f"true-nuisance N^-1 sum psi^2 = {plug:.3f} (mean of 20 samples, N=4000) vs "
                            f"E[S^2] = {oracle:.3f}: {rel:+.1%} (tol 25%)")
    assert ok


def test_criterion_10_oracle_efficiency():
    cfg = McConfig(scenarios=("II",), sizes=(1000,), trials=300, methods=("cbs", "oracle"), seed=SEED,
                   grid=(1.0,), points=((1.0, 0.0),))
    rep = run_mc(cfg)
    v_cbs = float(np.var(rep.point_estimates[("II", 1000, "cbs")][:, 0], ddof=1))
    v_orc = float(np.var(rep.point_estimates[("II", 1000, "oracle")][:, 0], ddof=1))
    ok = v_cbs <= 1.1 * v_orc
    record_criterion(10, ok, f"300 trials, Var(CBS) = {v_cbs:.5f}, Var(oracle) = {v_orc:.5f}, "
                             f"ratio {v_cbs / v_orc:.3f} (limit 1.1)")
    assert ok


def test_criterion_11_property_suites(table1_report, binary4000_report):
    here = Path(__file__).parent
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-m", "property", "-p", "no:cacheprovider", str(here)],
        capture_output=True, text=True, cwd=here.parent,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    # pointwise RMSE of CBS shrinks from N=500 to N=1000 at >= 80% of grid points
    truth_grid = table1_report.config.grid_for(Scenario.I)
    shares = {}
    for s in ("I", "II", "III"):
        est = {n: table1_report.panel_estimates[(s, n, "cbs")] for n in (500, 1000)}
        from medcal.estimators import panel_pairs, panels_from_mu

        ts, tps = panel_pairs(truth_grid, 0.0)
        truth = panels_from_mu(true_mu(s, ts, tps), truth_grid.size)
        better = []
        for p in PANELS:
            r = {n: np.sqrt(np.mean((est[n][p] - truth[p]) ** 2, axis=0)) for n in est}
            better.append(r[1000] <= r[500])
        shares[s] = float(np.mean(better))
    # bias of every estimator at N=4000 on the binary design, (t, t') = (1, 0)
    biases = {
        m: float(binary4000_report.point_estimates[("binary", 4000, m)][:, 2].mean() - 0.55) for m in ("cbs", "ipw")
    }
    ok = proc.returncode == 0 and min(shares.values()) >= 0.8 and max(abs(b) for b in biases.values()) < 0.02
    record_criterion(11, ok, f"property suite: {summary}; pointwise RMSE shrink share "
                             + ", ".join(f"{k} {v:.2f}" for k, v in shares.items())
                             + "; N=4000 bias at (1,0) " + ", ".join(f"{k} {v:+.4f}" for k, v in biases.items()))
    assert ok
