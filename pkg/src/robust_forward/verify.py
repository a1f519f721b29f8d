"""Checks of the super-/sub-martingale sub-optimality and martingale
optimality principles on the criterion process

    R_s = X_s^delta / delta * exp(Y_s - g_s) + int_0^s (c_u X_u)^delta / delta * lambda_u du.

Its drift is R-scale times ``drift_integrand``. With deterministic
coefficients the integrand's sign is exact evidence; Monte Carlo on
E[R_T] - R_0 corroborates it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .market import MarketSpec, StrategyPath, iter_wealth_chunks, sigma_from_cov, uniform_grid
from .preferences import LambdaSpec, PreferencePair, build_preferences
from .saddle import eval_G, eval_H, solve_saddle_G, solve_saddle_H


def drift_integrand(
    spec: MarketSpec,
    delta: float,
    value: float,
    p,
    c,
    b,
    Sigma,
    Y_t,
    g_t,
    lambda_t,
    mode: str = "drift_vol",
    z=None,
):
    """Bracketed ds-coefficient of R.

    drift_vol: G(p; b, Sigma) - G + (c^delta lambda e^{-L} - delta c)
               - (1 - delta) lambda^q e^{-L / (1 - delta)},  L = Y - g (g = 0).
    drift_only: the same with H(t, z; p; b) - H(t, z); ``Sigma`` is then the
    volatility matrix sigma itself and ``z`` the BSDE's Z_t.
    ``value`` is the saddle value G or H(t, z).
    """
    q = 1.0 / (1.0 - delta)
    L = float(Y_t) - float(g_t)
    if mode == "drift_vol":
        gain = eval_G(spec, delta, p, b, Sigma) - value
    elif mode == "drift_only":
        zz = np.zeros(spec.d) if z is None else z
        gain = eval_H(spec, delta, Sigma, zz, p, b) - value
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if c < 0:
        raise ValueError("consumption rate must be >= 0")
    cons = c**delta * lambda_t * np.exp(-L) - delta * c
    return float(gain + cons - (1.0 - delta) * lambda_t**q * np.exp(-L * q))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Market, saddle and preferences with deterministic coefficients.

    drift_only scenarios are restricted to constant sigma, where Z = 0 and
    the saddle is constant in time.
    """

    label: str
    mode: str
    spec: MarketSpec
    delta: float
    x0: float
    horizon: float
    prefs: PreferencePair
    p_star: np.ndarray
    b_star: np.ndarray
    Sigma_star: np.ndarray
    value: float
    sigma: Optional[np.ndarray] = None

    @property
    def sigma_star(self) -> np.ndarray:
        return self.sigma if self.sigma is not None else sigma_from_cov(self.Sigma_star)

    def drift_at(self, t, p, c, b, Sigma) -> float:
        S = self.sigma if self.mode == "drift_only" else Sigma
        return drift_integrand(
            self.spec, self.delta, self.value, p, c, b, S,
            self.prefs.Y(t), self.prefs.g(t), float(self.prefs.lam(t)), mode=self.mode,
        )

    def c_star(self, t) -> float:
        return float(self.prefs.c_star(t))


def make_scenario(
    spec: MarketSpec,
    delta: float,
    x0: float,
    horizon: float,
    lam: LambdaSpec | None = None,
    Y0: float = 0.0,
    label: str = "custom",
) -> Scenario:
    """drift_vol scenario: saddle of G, closed-form Y."""
    sol = solve_saddle_G(spec, delta)
    prefs = build_preferences("drift_vol", delta, lam, horizon=horizon, Y0=Y0, G=sol.value)
    return Scenario(label, "drift_vol", spec, float(delta), float(x0), float(horizon), prefs,
                    sol.p_star, sol.b_star, sol.Sigma_star, sol.value)


def make_drift_only_scenario(
    spec: MarketSpec,
    delta: float,
    x0: float,
    horizon: float,
    sigma,
    prefs: PreferencePair,
    label: str = "drift_only",
) -> Scenario:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    sol = solve_saddle_H(spec, delta, 0.0, sigma, np.zeros(spec.d))
    return Scenario(label, "drift_only", spec, float(delta), float(x0), float(horizon), prefs,
                    sol.p_star, sol.b_star, sigma @ sigma.T, sol.value, sigma=sigma)


# ---------------------------------------------------------------------------
# deviations and pointwise checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Deviation:
    """``none``, ``strategy`` (p and/or c replaced) or ``parameter`` (b and/or Sigma replaced)."""

    kind: str = "none"
    p: Optional[tuple] = None
    c: Optional[float] = None
    b: Optional[tuple] = None
    Sigma: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("none", "strategy", "parameter"):
            raise ValueError(f"unknown deviation kind {self.kind!r}")
        if self.kind == "strategy" and (self.b is not None or self.Sigma is not None):
            raise ValueError("strategy deviations cannot change market parameters")
        if self.kind == "parameter" and (self.p is not None or self.c is not None):
            raise ValueError("parameter deviations cannot change the strategy")

    @classmethod
    def from_dict(cls, d: dict | None) -> "Deviation":
        if not d:
            return cls()
        tup = lambda x: None if x is None else tuple(np.asarray(x, dtype=float).ravel())
        S = d.get("Sigma")
        return cls(d.get("kind", "none"), tup(d.get("p")), d.get("c"), tup(d.get("b")), tup(S))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k in ("p", "c", "b", "Sigma"):
            v = getattr(self, k)
            if v is not None:
                out[k] = list(v) if isinstance(v, tuple) else v
        return out


def _resolve(scn: Scenario, dev: Deviation):
    """Constant (p, b, Sigma) and the consumption rule c(t) under a deviation."""
    d = scn.spec.d
    p = scn.p_star if dev.p is None else np.asarray(dev.p, dtype=float)
    b = scn.b_star if dev.b is None else np.asarray(dev.b, dtype=float)
    Sigma = scn.Sigma_star if dev.Sigma is None else np.asarray(dev.Sigma, dtype=float).reshape(d, d)
    if dev.c is None:
        c_fn = lambda t: np.asarray(scn.prefs.c_star(t), dtype=float)
    else:
        c_fn = lambda t, c=float(dev.c): np.full(np.shape(t), c)
    if not scn.spec.in_pi(p):
        raise ValueError("deviation strategy lies outside the investment set")
    if not scn.spec.in_drift_box(b):
        raise ValueError("deviation drift lies outside the drift box")
    if scn.mode == "drift_only":
        if dev.Sigma is not None and not np.allclose(Sigma, scn.Sigma_star, atol=1e-12):
            raise ValueError("volatility is not uncertain in drift-only scenarios")
    elif not scn.spec.in_cov_hull(Sigma):
        raise ValueError("deviation covariance lies outside the covariance hull")
    return p, b, Sigma, c_fn


def drift_path(scn: Scenario, dev: Deviation, times) -> np.ndarray:
    p, b, Sigma, c_fn = _resolve(scn, dev)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    c = np.atleast_1d(c_fn(times)).astype(float)
    # (p, b, Sigma) are constant, so only the consumption terms vary in time
    gain = scn.drift_at(0.0, p, 0.0, b, Sigma) - scn.drift_at(0.0, scn.p_star, 0.0, scn.b_star, scn.Sigma_star)
    delta = scn.delta
    q = 1.0 / (1.0 - delta)
    L = np.asarray(scn.prefs.Y(times), dtype=float) - np.asarray(scn.prefs.g(times), dtype=float)
    lam = np.asarray(scn.prefs.lam(times), dtype=float)
    cons = c**delta * lam * np.exp(-L) - delta * c
    return gain + cons - (1.0 - delta) * lam**q * np.exp(-L * q)


@dataclass
class SignReport:
    n_strategy: int
    n_parameter: int
    strategy_violations: int
    parameter_violations: int
    strategy_max: float
    parameter_min: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sample_deviation_signs(
    scn: Scenario, n: int = 1000, seed: int = 0, times=None, tol: float = 1e-12, box: float = 5.0
) -> SignReport:
    """Random constant deviations: strategy ones must give drift <= 0,
    parameter ones drift >= 0, at every probe time."""
    rng = np.random.default_rng(seed)
    spec = scn.spec
    times = np.linspace(0.0, scn.horizon, 7) if times is None else np.asarray(times, dtype=float)
    lo = np.where(np.isfinite(spec.p_lo), spec.p_lo, -box)
    hi = np.where(np.isfinite(spec.p_hi), spec.p_hi, box)
    c_top = 2.0 * float(np.max(scn.prefs.c_star(times))) + 1.0
    s_viol = p_viol = 0
    s_max, p_min = -np.inf, np.inf
    K = len(spec.cov_vertices)
    for _ in range(n):
        dev = Deviation("strategy", p=tuple(rng.uniform(lo, hi)), c=float(rng.uniform(0, c_top)) if rng.random() < 0.5 else None)
        dr = drift_path(scn, dev, times)
        s_max = max(s_max, float(dr.max()))
        s_viol += bool(dr.max() > tol)
    for _ in range(n):
        b = rng.uniform(spec.b_lo, spec.b_hi)
        if scn.mode == "drift_only":
            S = None
        else:
            w = rng.dirichlet(np.ones(K))
            S = tuple(sum(wk * v for wk, v in zip(w, spec.cov_vertices)).ravel())
        dr = drift_path(scn, Deviation("parameter", b=tuple(b), Sigma=S), times)
        p_min = min(p_min, float(dr.min()))
        p_viol += bool(dr.min() < -tol)
    return SignReport(n, n, s_viol, p_viol, s_max, p_min)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class MartingaleReport:
    label: str
    deviation: dict
    R0: float
    estimate: float
    std_err: float
    z_score: float
    confidence: float
    verdict: str
    significant: bool
    drift_min: float
    drift_max: float
    drift_frac_nonneg: float
    qv_ratio: Optional[float]
    n_paths: int
    horizon: float
    dt: float
    seed: int
    sample_R: np.ndarray = field(default=None, repr=False)
    times: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("sample_R", "times")}
        for k, v in out.items():
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                out[k] = v.item()
        return out

    def paths_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "t", "R"])
            for i, row in enumerate(self.sample_R):
                for t, r in zip(self.times, row):
                    w.writerow([i, repr(float(t)), repr(float(r))])


def run_martingale_test(
    scn: Scenario,
    deviation: Deviation | None = None,
    n_paths: int = 100_000,
    dt: float = 1e-3,
    seed: int = 0,
    confidence: float = 0.99,
    horizon: float | None = None,
    n_qv: int = 200,
    n_store: int = 2,
    chunk_size: int = 2048,
    n_jobs: int = 1,
) -> MartingaleReport:
    """Simulate R under the (possibly deviated) strategy and market and test
    the matching principle on E[R_T] - R_0.

    none: two-sided test of E[R_T] = R_0.
    strategy: the principle says E[R_T] <= R_0; it is rejected when the
    estimate exceeds zero at the given confidence. ``significant`` marks a
    strict decrease detected at that confidence.
    parameter: mirror image with E[R_T] >= R_0.
    """
    dev = Deviation() if deviation is None else deviation
    T = scn.horizon if horizon is None else float(horizon)
    p, b, Sigma, c_fn = _resolve(scn, dev)
    sigma = scn.sigma if scn.mode == "drift_only" else sigma_from_cov(Sigma)
    times = uniform_grid(T, dt)
    c_grid = np.atleast_1d(c_fn(times)).astype(float)
    strat = StrategyPath.constant(T, dt, p, c_grid[:-1], b, sigma)
    strat.check_admissible(scn.spec)

    delta = scn.delta
    scale = np.exp(np.asarray(scn.prefs.Y(times), dtype=float) - np.asarray(scn.prefs.g(times), dtype=float))
    lam = np.asarray(scn.prefs.lam(times), dtype=float)
    h = np.diff(times)
    R0 = float(scn.prefs.U(scn.x0, 0.0))

    drift = drift_path(scn, dev, times)
    vol = float(np.linalg.norm(sigma.T @ p))

    RT = np.empty(n_paths)
    qv_num = qv_den = 0.0
    stored = []
    for ids, _, X in iter_wealth_chunks(scn.spec, scn.x0, strat, n_paths, seed, chunk_size, n_jobs):
        W = X**delta / delta * scale
        if np.any(lam > 0):
            f = (c_grid * X) ** delta / delta * lam
            cons = np.concatenate([np.zeros((X.shape[0], 1)), np.cumsum(0.5 * h * (f[:, 1:] + f[:, :-1]), axis=1)], axis=1)
        else:
            cons = 0.0
        R = W + cons
        RT[ids] = R[:, -1]
        m = int(np.clip(n_qv - ids[0], 0, ids.size))
        if m > 0 and vol > 0:
            qv_num += float(np.sum(np.diff(W[:m], axis=1) ** 2))
            qv_den += float(np.sum((delta * vol * W[:m, :-1]) ** 2 * h))
        k = int(np.clip(n_store - ids[0], 0, ids.size))
        if k > 0:
            stored.append(np.broadcast_to(R, X.shape)[:k].copy())

    est = float(np.mean(RT) - R0)
    se = float(np.std(RT, ddof=1) / np.sqrt(n_paths))
    if se > 0:
        z = est / se
    else:
        z = 0.0 if abs(est) <= 1e-12 * max(1.0, abs(R0)) else np.sign(est) * np.inf
    one = norm.ppf(confidence)
    two = norm.ppf(0.5 + 0.5 * confidence)
    if dev.kind == "none":
        ok, sig = abs(z) <= two, abs(z) > two
        verdict = "martingale-consistent" if ok else "violation"
    elif dev.kind == "strategy":
        ok, sig = z <= one, z < -one
        verdict = "supermartingale-consistent" if ok else "violation"
    else:
        ok, sig = z >= -one, z > one
        verdict = "submartingale-consistent" if ok else "violation"

    return MartingaleReport(
        label=scn.label,
        deviation=dev.to_dict(),
        R0=R0,
        estimate=est,
        std_err=se,
        z_score=float(z),
        confidence=float(confidence),
        verdict=verdict,
        significant=bool(sig),
        drift_min=float(drift.min()),
        drift_max=float(drift.max()),
        drift_frac_nonneg=float(np.mean(drift >= 0)),
        qv_ratio=(qv_num / qv_den) if qv_den > 0 else None,
        n_paths=int(n_paths),
        horizon=float(T),
        dt=float(dt),
        seed=int(seed),
        sample_R=np.concatenate(stored) if stored else np.zeros((0, times.size)),
        times=times,
    )
