"""Robust forward CRRA investment and consumption preferences under drift
and volatility uncertainty: saddle points, closed-form preference ODEs, an
infinite-horizon BSDE solver, wealth simulation and martingale checks."""

from .bsde import (
    BsdeSolution,
    SigmaModel,
    driver,
    driver_estimates_check,
    solve_bsde_deterministic_sigma,
    solve_bsde_lsmc,
)
from .exceptions import AdmissibilityError, ConditionViolation, ConvergenceError, UnboundedSaddleError
from .market import MarketSpec, SimResult, StrategyPath, power_wealth_functional, simulate_wealth
from .preferences import (
    LambdaSpec,
    PreferencePair,
    build_preferences,
    check_condition_1,
    check_condition_2,
    consumption_star_dv,
    solve_g_closed_form,
    solve_Y_closed_form,
)
from .saddle import (
    SaddleSolutionG,
    SaddleSolutionH,
    eval_G,
    eval_H,
    inner_min_G,
    project_onto_sigma_pi,
    solve_saddle_G,
    solve_saddle_G_1d,
    solve_saddle_G_nd,
    solve_saddle_H,
)
from .verify import Deviation, MartingaleReport, drift_integrand, make_scenario, run_martingale_test

__version__ = "0.1.0"
