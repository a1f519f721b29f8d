"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see conftest) before asserting.
"""

import json
import time

import numpy as np

from robust_forward.bsde import (
    SigmaModel,
    driver_estimates_check,
    logistic_vol_map,
    solve_bsde_deterministic_sigma,
    solve_bsde_lsmc,
)
from robust_forward.cli import main
from robust_forward.market import MarketSpec
from robust_forward.preferences import LambdaSpec, build_preferences, check_condition_1, solve_Y_closed_form
from robust_forward.saddle import solve_saddle_G_1d, solve_saddle_G_nd
from robust_forward.verify import Deviation, drift_path, make_scenario, run_martingale_test, sample_deviation_signs

FIGS = {"fig1": (0.0, 0.2, 0.1), "fig2": (0.8, 0.3, 0.12), "fig3": (-0.5, 0.1, 0.1171875)}


def fig_market(b_lo, b_hi):
    return MarketSpec.one_dim(0.2, b_lo, b_hi, 0.1, 0.5, -0.5, 1.5)


def drift_market():
    return MarketSpec.one_dim(0.2, 0.3, 0.8, 0.5, 0.5, -0.5, 1.5)


def _reproduce(tmp_path):
    t0 = time.perf_counter()
    code = main(["reproduce-figures", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    docs = {n: json.loads((tmp_path / n / "saddle.json").read_text()) for n in FIGS}
    return code, elapsed, docs


def test_criterion_1_figure_saddle_points(tmp_path, report_criterion):
    code, elapsed, docs = _reproduce(tmp_path)
    errs = []
    for name, (p, b, _) in FIGS.items():
        d = docs[name]
        errs += [abs(d["p_star"][0] - p), abs(d["b_star"][0] - b), abs(d["sigma_star"][0][0] - 0.5)]
    # the deterministic fig1 path
    rows = (tmp_path / "fig1" / "paths.csv").read_text().splitlines()[1:]
    t, x1 = np.array([[float(v) for v in r.split(",")[:2]] for r in rows]).T
    path_err = float(np.max(np.abs(x1 / (50 * np.exp(0.2 * t)) - 1)))
    ok = code == 0 and max(errs) <= 1e-12 and elapsed < 1.0 and path_err <= 1e-12
    report_criterion(1, ok, f"max |err|={max(errs):.1e}, fig1 path rel err={path_err:.1e}, runtime={elapsed:.2f}s")
    assert ok


def test_criterion_2_figure_saddle_values(tmp_path, report_criterion):
    _, _, docs = _reproduce(tmp_path)
    errs = {n: abs(docs[n]["G"] - FIGS[n][2]) for n in FIGS}
    ok = max(errs.values()) <= 1e-12
    report_criterion(2, ok, "G errors " + ", ".join(f"{n}={e:.1e}" for n, e in errs.items()))
    assert ok


def test_criterion_3_numeric_minimax_matches_closed_form(report_criterion):
    rng = np.random.default_rng(12345)
    instances = []
    for _ in range(100):
        r = rng.uniform(0.0, 0.3)
        b_lo, b_hi = np.sort(rng.uniform(-0.3, 0.8, 2))
        s_lo, s_hi = np.sort(rng.uniform(0.05, 0.8, 2))
        spec = MarketSpec.one_dim(r, b_lo, b_hi, s_lo, s_hi, -rng.uniform(0, 2), rng.uniform(0, 2))
        instances.append((spec, rng.uniform(0.1, 0.9)))
    t0 = time.perf_counter()
    gaps = [abs(solve_saddle_G_nd(s, d).value - solve_saddle_G_1d(s, d).value) for s, d in instances]
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-6 and elapsed < 10.0
    report_criterion(3, ok, f"100 instances, max |dG|={max(gaps):.1e}, runtime={elapsed:.2f}s")
    assert ok


def test_criterion_4_ode_residual_second_order(report_criterion):
    delta, G, beta = 0.5, 0.12, 0.75
    lam = LambdaSpec.exponential(1.0, beta, rate_base=G)
    t = np.linspace(0.5, 10.0, 200)
    Yt = solve_Y_closed_form(0.0, G, lam, delta, t)
    rhs = -(G + (1 - delta) * lam(t) ** 2 * np.exp(-2 * Yt))

    def resid(h):
        dY = (solve_Y_closed_form(0.0, G, lam, delta, t + h) - solve_Y_closed_form(0.0, G, lam, delta, t - h)) / (2 * h)
        return float(np.max(np.abs(dY - rhs)))

    ratios = [resid(h) / resid(h / 2) for h in (0.04, 0.02, 0.01)]
    ok = all(3.2 <= r <= 4.8 for r in ratios)
    report_criterion(4, ok, "halving ratios " + ", ".join(f"{r:.3f}" for r in ratios))
    assert ok


def test_criterion_5_condition_1_crossing(report_criterion):
    rep = check_condition_1(0.0, 0.12, LambdaSpec.exponential(4.0, 0.5, rate_base=0.12), 0.5, 1.0)
    err = abs(rep.first_violation_time - np.log(16 / 15)) if rep.first_violation_time is not None else np.inf
    ok = (not rep.holds) and err <= 1e-6
    report_criterion(5, ok, f"first violation {rep.first_violation_time!r}, |err|={err:.1e}")
    assert ok


def test_criterion_6_martingale_suite(report_criterion):
    t0 = time.perf_counter()
    scn = make_scenario(fig_market(0.3, 0.8), 0.5, 50.0, 3.0, label="fig2")
    grid = np.linspace(0.0, 3.0, 3001)
    drift0 = float(np.max(np.abs(drift_path(scn, Deviation(), grid))))
    signs = sample_deviation_signs(scn, n=1000, seed=6)
    checks = [
        (Deviation(), "martingale-consistent"),
        (Deviation("strategy", p=(0.2,)), "supermartingale-consistent"),
        (Deviation("parameter", b=(0.5,)), "submartingale-consistent"),
    ]
    verdicts = []
    for k, (dev, want) in enumerate(checks):
        rep = run_martingale_test(scn, dev, n_paths=100_000, dt=1e-3, seed=100 + k, confidence=0.99)
        verdicts.append((rep.verdict, want, rep.z_score))
    elapsed = time.perf_counter() - t0
    ok = (
        drift0 <= 1e-10
        and signs.strategy_violations == 0
        and signs.parameter_violations == 0
        and all(v == w for v, w, _ in verdicts)
        and elapsed < 120.0
    )
    detail = (
        f"saddle drift max={drift0:.1e}, sign violations={signs.strategy_violations}/{signs.parameter_violations}, "
        + "MC " + ", ".join(f"{v} (z={z:.2f})" for v, _, z in verdicts)
        + f", runtime={elapsed:.0f}s"
    )
    report_criterion(6, ok, detail)
    assert ok


def test_criterion_7_bsde_truncation(report_criterion):
    rho = 0.1
    model = SigmaModel.constant_sigma([[0.5]])
    Y0 = {T: solve_bsde_deterministic_sigma(model, drift_market(), 0.5, rho, T, 0.01).Y0 for T in (10.0, 20.0, 25.0, 40.0, 50.0)}
    errs = [abs(Y0[T] - 1.2 * (1 - np.exp(-rho * T))) for T in (10.0, 25.0, 50.0)]
    shrink = [abs(Y0[2 * T] - 1.2) / abs(Y0[T] - 1.2) / np.exp(-rho * T) - 1 for T in (10.0, 20.0)]
    ok = max(errs) <= 1e-8 and max(abs(s) for s in shrink) <= 0.05
    report_criterion(7, ok, f"max closed-form err={max(errs):.1e}, doubling ratio deviation={max(abs(s) for s in shrink):.1e}")
    assert ok


def test_criterion_8_lsmc_vs_ode(report_criterion):
    spec, rho, T, dt = drift_market(), 0.1, 10.0, 0.01
    t0 = time.perf_counter()
    flat = SigmaModel.markov_factor(1.0, 0.0, 0.0, 0.0, logistic_vol_map(0.5, 0.5), d=1)
    sol = solve_bsde_lsmc(flat, spec, 0.5, rho, T, dt, n_paths=100_000, n_basis=4, seed=0)
    elapsed = time.perf_counter() - t0
    ref = solve_bsde_deterministic_sigma(SigmaModel.constant_sigma([[0.5]]), spec, 0.5, rho, T, dt).Y0
    gap = abs(sol.Y0 - ref)
    tol = max(3 * sol.diagnostics["Y0_std_err"], 1e-3)
    ok = gap <= tol and elapsed < 300.0
    report_criterion(8, ok, f"T={T:g}, |LSMC - ODE|={gap:.1e} <= {tol:.1e}, runtime={elapsed:.0f}s")
    assert ok


def test_criterion_9_driver_estimates(report_criterion):
    rep = driver_estimates_check(SigmaModel.constant_sigma([[0.5]]), drift_market(), 0.5, 0.1, n_samples=10_000, seed=9)
    ok = rep.ok
    report_criterion(
        9, ok,
        f"K={rep.K:.3g}, Lipschitz violations={rep.lipschitz_violations}, bound violations={rep.bound_violations}, "
        f"affinity err={rep.monotonicity_max_error:.1e}",
    )
    assert ok


def test_criterion_10_preference_ratio_asymptotics(report_criterion):
    delta, G, beta, t = 0.5, 0.12, 0.75, 40.0
    pp = build_preferences("drift_vol", delta, LambdaSpec.exponential(1.0, beta, rate_base=G), Y0=0.0, G=G, horizon=t)
    x, C = 3.0, 2.0
    ratio = float((pp.U(x, t) / x**delta) / (pp.Uc(C, t) / C**delta))
    ok = abs(ratio - 1.0) <= 1e-6
    report_criterion(10, ok, f"ratio at t=40 is {ratio:.6g}, |ratio - 1|={abs(ratio - 1):.3g}")
    assert ok
