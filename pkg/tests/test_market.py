import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_forward.exceptions import AdmissibilityError
from robust_forward.market import (
    MarketSpec,
    StrategyPath,
    iter_wealth_chunks,
    power_wealth_functional,
    sigma_from_cov,
    simulate_wealth,
)


def fig_market(b_lo=0.3, b_hi=0.8):
    return MarketSpec.one_dim(0.2, b_lo, b_hi, 0.1, 0.5, -0.5, 1.5)


def test_spec_validation_rejects_bad_inputs():
    with pytest.raises(ValueError):
        MarketSpec(r=-0.1, b_lo=[0.0], b_hi=[1.0], cov_vertices=(np.eye(1),), p_lo=[-1], p_hi=[1])
    with pytest.raises(ValueError):
        MarketSpec(r=0.1, b_lo=[1.0], b_hi=[0.0], cov_vertices=(np.eye(1),), p_lo=[-1], p_hi=[1])
    with pytest.raises(ValueError):  # 0 must lie in Pi
        MarketSpec(r=0.1, b_lo=[0.0], b_hi=[1.0], cov_vertices=(np.eye(1),), p_lo=[0.5], p_hi=[1])
    with pytest.raises(ValueError):  # not PSD
        MarketSpec(r=0.1, b_lo=[0.0], b_hi=[1.0], cov_vertices=(-np.eye(1),), p_lo=[-1], p_hi=[1])
    with pytest.raises(ValueError):  # no positive definite vertex
        MarketSpec(r=0.1, b_lo=[0, 0], b_hi=[1, 1], cov_vertices=(np.diag([1.0, 0.0]),), p_lo=[-1, -1], p_hi=[1, 1])
    with pytest.raises(ValueError):  # asymmetric
        MarketSpec(r=0.1, b_lo=[0, 0], b_hi=[1, 1], cov_vertices=(np.array([[1.0, 0.5], [0.0, 1.0]]),), p_lo=[-1, -1], p_hi=[1, 1])


def test_spec_roundtrip_with_infinite_bounds(tmp_path):
    spec = MarketSpec(
        r=0.05,
        b_lo=[0.0, 0.1],
        b_hi=[0.2, 0.3],
        cov_vertices=(np.eye(2) * 0.04, np.array([[0.09, 0.01], [0.01, 0.04]])),
        p_lo=[-np.inf, -1.0],
        p_hi=[np.inf, 2.0],
    )
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"market": spec.to_dict()}))
    back = MarketSpec.from_json(path)
    assert back.d == 2
    assert np.isinf(back.p_lo[0]) and np.isinf(back.p_hi[0])
    np.testing.assert_array_equal(back.cov_vertices[1], spec.cov_vertices[1])


def test_cov_hull_membership():
    spec = fig_market()
    assert spec.in_cov_hull(np.array([[0.1]]))
    assert not spec.in_cov_hull(np.array([[0.3]]))
    spec2 = MarketSpec(r=0.0, b_lo=[0, 0], b_hi=[0, 0], cov_vertices=(np.eye(2), 2 * np.eye(2)), p_lo=[-1, -1], p_hi=[1, 1])
    assert spec2.in_cov_hull(1.5 * np.eye(2))
    assert not spec2.in_cov_hull(np.diag([1.0, 2.0]))


def test_bond_only_growth_is_deterministic():
    spec = fig_market(0.1, 0.5)
    strat = StrategyPath.constant(3.0, 0.01, [0.0], 0.0, [0.2], [[0.5]])
    sim = simulate_wealth(spec, 50.0, strat, n_paths=5, seed=1)
    np.testing.assert_allclose(sim.X[:, -1], 50 * np.exp(0.6), rtol=1e-13)
    assert np.all(sim.X[:, 0] == 50.0)


def test_consumption_decay_per_step():
    spec = fig_market()
    strat = StrategyPath.constant(1.0, 0.1, [0.0], 1.0, [0.3], [[0.5]])
    sim = simulate_wealth(spec, 50.0, strat, n_paths=2, seed=3)
    ratios = sim.X[0, 1:] / sim.X[0, :-1]
    np.testing.assert_allclose(ratios, np.exp((0.2 - 1.0) * 0.1), rtol=1e-13)


def test_lognormal_mean_matches():
    spec = fig_market()
    t = 1.0
    strat = StrategyPath.constant(t, 0.05, [0.8], 0.0, [0.3], [[0.5]])
    sim = simulate_wealth(spec, 50.0, strat, n_paths=100_000, seed=11)
    xT = sim.X[:, -1]
    se = xT.std(ddof=1) / np.sqrt(xT.size)
    assert abs(xT.mean() - 50 * np.exp((0.2 + 0.8 * 0.1) * t)) < 3 * se


def test_log_wealth_moments():
    spec = fig_market()
    p, s, t = 0.8, 0.5, 2.0
    strat = StrategyPath.constant(t, 0.1, [p], 0.05, [0.3], [[s]])
    sim = simulate_wealth(spec, 1.0, strat, n_paths=100_000, seed=5)
    lx = np.log(sim.X[:, -1])
    mean = (0.2 + p * 0.1 - 0.05 - 0.5 * (s * p) ** 2) * t
    var = (s * p) ** 2 * t
    n = lx.size
    assert abs(lx.mean() - mean) < 4 * np.sqrt(var / n)
    assert abs(lx.var(ddof=1) - var) < 4 * var * np.sqrt(2 / (n - 1))


@pytest.mark.parametrize("n_jobs,chunk", [(1, 7), (3, 7), (2, 1000)])
def test_seed_determinism_independent_of_parallelism(n_jobs, chunk):
    spec = fig_market()
    strat = StrategyPath.constant(1.0, 0.1, [0.8], 0.0, [0.3], [[0.5]])
    ref = simulate_wealth(spec, 50.0, strat, n_paths=40, seed=9)
    other = simulate_wealth(spec, 50.0, strat, n_paths=40, seed=9, n_jobs=n_jobs, chunk_size=chunk)
    assert np.array_equal(ref.X, other.X)
    assert np.array_equal(ref.dW, other.dW)
    streamed = np.concatenate([X for _, _, X in iter_wealth_chunks(spec, 50.0, strat, 40, 9, chunk_size=chunk)])
    assert np.array_equal(ref.X, streamed)


def test_inadmissible_strategy_rejected():
    spec = fig_market()
    with pytest.raises(AdmissibilityError):
        simulate_wealth(spec, 50.0, StrategyPath.constant(1.0, 0.1, [2.0], 0.0, [0.3], [[0.5]]), 2, 0)
    with pytest.raises(AdmissibilityError):
        simulate_wealth(spec, 50.0, StrategyPath.constant(1.0, 0.1, [0.5], 0.0, [0.9], [[0.5]]), 2, 0)
    with pytest.raises(AdmissibilityError):
        simulate_wealth(spec, 50.0, StrategyPath.constant(1.0, 0.1, [0.5], 0.0, [0.3], [[0.6]]), 2, 0)
    with pytest.raises(ValueError):
        simulate_wealth(spec, -1.0, StrategyPath.constant(1.0, 0.1, [0.5], 0.0, [0.3], [[0.5]]), 2, 0)


def test_power_wealth_functional_bond_only():
    spec = fig_market(0.1, 0.5)
    strat = StrategyPath.constant(3.0, 0.01, [0.0], 0.0, [0.2], [[0.5]])
    pw = power_wealth_functional(simulate_wealth(spec, 50.0, strat, 3, 0), 0.5)
    np.testing.assert_allclose(pw.x_pow[:, -1], np.sqrt(50) * np.exp(0.3), rtol=1e-12)
    assert np.isclose(np.sqrt(50) * np.exp(0.3), 9.5448, atol=1e-4)
    assert np.all(pw.consumption_integral == 0.0)


def test_sim_csv(tmp_path):
    spec = fig_market()
    strat = StrategyPath.constant(0.2, 0.1, [0.8], 0.0, [0.3], [[0.5]])
    sim = simulate_wealth(spec, 50.0, strat, 2, 0)
    sim.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "path_id,t,X"
    assert len(lines) == 1 + 2 * 3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=2, max_size=2))
def test_sigma_from_cov_squares_back(eigs):
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    S = rot @ np.diag(eigs) @ rot.T
    root = sigma_from_cov(S)
    np.testing.assert_allclose(root @ root.T, S, atol=1e-12)
