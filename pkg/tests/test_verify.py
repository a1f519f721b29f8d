import numpy as np
import pytest

from robust_forward.market import MarketSpec
from robust_forward.preferences import LambdaSpec, build_preferences
from robust_forward.verify import (
    Deviation,
    drift_integrand,
    drift_path,
    make_drift_only_scenario,
    make_scenario,
    run_martingale_test,
    sample_deviation_signs,
)

DELTA = 0.5


def fig_market(b_lo, b_hi):
    return MarketSpec.one_dim(0.2, b_lo, b_hi, 0.1, 0.5, -0.5, 1.5)


def fig2(lam=None, horizon=3.0):
    return make_scenario(fig_market(0.3, 0.8), DELTA, 50.0, horizon, lam=lam, label="fig2")


def test_integrand_zero_at_saddle():
    scn = fig2()
    v = scn.drift_at(0.0, scn.p_star, 0.0, scn.b_star, scn.Sigma_star)
    assert abs(v) <= 1e-15
    dr = drift_path(scn, Deviation(), np.linspace(0, 3, 301))
    assert np.max(np.abs(dr)) <= 1e-10


def test_integrand_hand_values():
    scn = fig2()
    # G(0.2; 0.3, 0.25) = -0.00125 + 0.01 + 0.1 = 0.10875
    assert scn.drift_at(0.0, [0.2], 0.0, scn.b_star, scn.Sigma_star) == pytest.approx(-0.01125, abs=1e-14)
    assert scn.drift_at(0.0, scn.p_star, 0.0, [0.5], scn.Sigma_star) == pytest.approx(0.08, abs=1e-14)


def test_integrand_consumption_terms():
    spec = fig_market(0.3, 0.8)
    # with c = lambda^q e^{-L q} the consumption terms cancel
    lam, Y = 0.7, -0.2
    c = lam**2 * np.exp(-2 * Y)
    v = drift_integrand(spec, DELTA, 0.12, [0.8], c, [0.3], [[0.25]], Y, 0.0, lam)
    assert abs(v) <= 1e-14
    assert drift_integrand(spec, DELTA, 0.12, [0.8], 1.5 * c, [0.3], [[0.25]], Y, 0.0, lam) < 0
    with pytest.raises(ValueError):
        drift_integrand(spec, DELTA, 0.12, [0.8], -1.0, [0.3], [[0.25]], Y, 0.0, lam)


@pytest.mark.parametrize("box", [(0.1, 0.5), (0.3, 0.8), (-0.1, 0.1)])
@pytest.mark.parametrize("with_lambda", [False, True])
def test_deviation_signs(box, with_lambda):
    G = make_scenario(fig_market(*box), DELTA, 50.0, 3.0).value
    lam = LambdaSpec.exponential(1.0, 0.75, rate_base=G) if with_lambda else None
    scn = make_scenario(fig_market(*box), DELTA, 50.0, 3.0, lam=lam)
    rep = sample_deviation_signs(scn, n=300, seed=1)
    assert rep.strategy_violations == 0 and rep.parameter_violations == 0
    assert rep.strategy_max <= 1e-12 and rep.parameter_min >= -1e-12


def test_deviation_signs_2d():
    spec = MarketSpec(
        r=0.05,
        b_lo=[0.0, 0.1],
        b_hi=[0.2, 0.3],
        cov_vertices=(np.diag([0.04, 0.09]), np.array([[0.09, 0.02], [0.02, 0.04]])),
        p_lo=[-1, -1],
        p_hi=[2, 2],
    )
    scn = make_scenario(spec, 0.4, 1.0, 2.0)
    rep = sample_deviation_signs(scn, n=300, seed=2, tol=1e-8)
    assert rep.strategy_violations == 0 and rep.parameter_violations == 0


def test_deviation_validation():
    scn = fig2()
    with pytest.raises(ValueError):
        Deviation("strategy", b=(0.4,))
    with pytest.raises(ValueError):
        Deviation("parameter", p=(0.1,))
    with pytest.raises(ValueError):
        drift_path(scn, Deviation("strategy", p=(3.0,)), [0.0])
    with pytest.raises(ValueError):
        drift_path(scn, Deviation("parameter", b=(0.9,)), [0.0])
    d = Deviation("parameter", b=(0.5,), Sigma=(0.1,))
    assert Deviation.from_dict(d.to_dict()) == d
    assert Deviation.from_dict(None) == Deviation()


def drift_only_scn():
    spec = MarketSpec.one_dim(0.2, 0.3, 0.8, 0.5, 0.5, -0.5, 1.5)
    T = np.linspace(0, 5, 51)
    Y = 1.2 * (1 - np.exp(-0.1 * (20 - T)))
    prefs = build_preferences(
        "drift_only", DELTA, LambdaSpec.zero(), horizon=5, rho=0.1, Y_path=(T, Y), Z_path=(T, np.zeros(51))
    )
    return make_drift_only_scenario(spec, DELTA, 50.0, 3.0, [[0.5]], prefs)


def test_drift_only_scenario_signs():
    scn = drift_only_scn()
    assert scn.value == pytest.approx(0.12)
    rep = sample_deviation_signs(scn, n=200, seed=3)
    assert rep.strategy_violations == 0 and rep.parameter_violations == 0
    with pytest.raises(ValueError):
        drift_path(scn, Deviation("parameter", Sigma=(0.1,)), [0.0])


def test_mc_saddle_is_martingale():
    rep = run_martingale_test(fig2(), n_paths=20_000, dt=1e-2, seed=0)
    assert rep.verdict == "martingale-consistent"
    assert rep.R0 == pytest.approx(2 * np.sqrt(50), abs=1e-12)
    assert rep.qv_ratio == pytest.approx(1.0, abs=0.05)


def test_mc_deviations():
    scn = fig2()
    sup = run_martingale_test(scn, Deviation("strategy", p=(0.2,)), n_paths=20_000, dt=1e-2, seed=1)
    assert sup.verdict == "supermartingale-consistent" and sup.significant
    assert sup.drift_max < 0
    sub = run_martingale_test(scn, Deviation("parameter", b=(0.5,)), n_paths=20_000, dt=1e-2, seed=2)
    assert sub.verdict == "submartingale-consistent" and sub.significant
    assert sub.drift_min > 0


def test_mc_bond_only_exact():
    # fig1 saddle holds no stock, so R is deterministic and the estimate is exactly 0 up to rounding
    scn = make_scenario(fig_market(0.1, 0.5), DELTA, 50.0, 3.0)
    rep = run_martingale_test(scn, n_paths=50, dt=1e-2, seed=0)
    assert abs(rep.estimate) < 1e-10 and rep.verdict == "martingale-consistent"
    assert rep.qv_ratio is None


def test_mc_with_consumption():
    G = 0.12
    scn = fig2(lam=LambdaSpec.exponential(1.0, 0.75, rate_base=G), horizon=1.0)
    rep = run_martingale_test(scn, n_paths=20_000, dt=1e-3, seed=4)
    assert rep.verdict == "martingale-consistent"
    over = run_martingale_test(scn, Deviation("strategy", c=5.0), n_paths=20_000, dt=1e-3, seed=4)
    assert over.verdict == "supermartingale-consistent" and over.significant


def test_mc_seed_determinism_and_csv(tmp_path):
    scn = fig2()
    a = run_martingale_test(scn, n_paths=500, dt=1e-2, seed=5, chunk_size=100)
    b = run_martingale_test(scn, n_paths=500, dt=1e-2, seed=5, chunk_size=37, n_jobs=2)
    assert a.estimate == b.estimate and np.array_equal(a.sample_R, b.sample_R)
    a.paths_to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("path_id")
    assert a.to_dict()["verdict"] == a.verdict
