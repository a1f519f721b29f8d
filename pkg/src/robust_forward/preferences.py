"""Closed-form robust forward CRRA preferences.

Two constructions are covered:

* ``drift_vol``: zero-volatility preferences U(x, t) = x^delta / delta * e^{Y_t}
  with Y solving Y' = -(G + (1 - delta) lambda^q e^{-Y / (1 - delta)}),
  q = 1 / (1 - delta), solved through the linearizing transform e^{Y / (1 - delta)}.
* ``drift_only``: U(x, t) = x^delta / delta * e^{Y_t - g_t} with Y from the
  infinite-horizon BSDE and g' = rho Y + (1 - delta) lambda^q e^{(g - Y) / (1 - delta)}.

In both cases U^c(C, t) = C^delta / delta * lambda_t.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .exceptions import ConditionViolation

QUAD_TOL = 1e-10
_GL_LO = np.polynomial.legendre.leggauss(8)
_GL_HI = np.polynomial.legendre.leggauss(16)


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return delta


# ---------------------------------------------------------------------------
# lambda
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaSpec:
    """Deterministic consumption weight lambda_t >= 0.

    ``exponential``: alpha * exp(-(rate_base + beta) t).
    ``tabulated``: piecewise-linear through (grid, values), held constant
    beyond the last knot.
    """

    kind: str = "zero"
    alpha: float = 0.0
    beta: float = 0.0
    rate_base: float = 0.0
    grid: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("zero", "exponential", "tabulated"):
            raise ValueError(f"unknown lambda kind {self.kind!r}")
        if self.kind == "exponential":
            if not (self.alpha >= 0 and np.isfinite(self.alpha)):
                raise ValueError("alpha must be finite and >= 0")
            if not (self.beta > 0 and np.isfinite(self.beta)):
                raise ValueError("beta must be finite and > 0")
            if not np.isfinite(self.rate_base):
                raise ValueError("rate_base must be finite")
        if self.kind == "tabulated":
            g = np.asarray(self.grid, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if g.ndim != 1 or g.shape != v.shape or g.size < 1:
                raise ValueError("tabulated lambda needs matching 1-D grid and values")
            if g[0] != 0.0 or np.any(np.diff(g) <= 0):
                raise ValueError("tabulated grid must start at 0 and strictly increase")
            if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
                raise ValueError("tabulated lambda values must be finite and >= 0")
            object.__setattr__(self, "grid", tuple(float(x) for x in g))
            object.__setattr__(self, "values", tuple(float(x) for x in v))

    @classmethod
    def zero(cls) -> "LambdaSpec":
        return cls("zero")

    @classmethod
    def exponential(cls, alpha: float, beta: float, rate_base: float = 0.0) -> "LambdaSpec":
        return cls("exponential", alpha=float(alpha), beta=float(beta), rate_base=float(rate_base))

    @classmethod
    def tabulated(cls, grid, values) -> "LambdaSpec":
        return cls("tabulated", grid=tuple(grid), values=tuple(values))

    @classmethod
    def from_csv(cls, path) -> "LambdaSpec":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls.tabulated(data[:, 0], data[:, 1])

    @classmethod
    def from_dict(cls, d: dict) -> "LambdaSpec":
        kind = d.get("kind", "zero")
        if kind == "zero":
            return cls.zero()
        if kind == "exponential":
            return cls.exponential(d["alpha"], d["beta"], d.get("rate_base", 0.0))
        if kind == "tabulated":
            if "table" in d:
                return cls.from_csv(d["table"])
            return cls.tabulated(d["grid"], d["values"])
        raise ValueError(f"unknown lambda kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "exponential":
            return {"kind": "exponential", "alpha": self.alpha, "beta": self.beta, "rate_base": self.rate_base}
        return {"kind": "tabulated", "grid": list(self.grid), "values": list(self.values)}

    @property
    def is_zero(self) -> bool:
        if self.kind == "zero":
            return True
        if self.kind == "exponential":
            return self.alpha == 0.0
        return not any(self.values)

    @property
    def knots(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=float) if self.kind == "tabulated" else np.zeros(0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(t)
        if self.kind == "exponential":
            return self.alpha * np.exp(-(self.rate_base + self.beta) * t)
        return np.interp(t, self.grid, self.values)


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------


def _gl(f, a: np.ndarray, b: np.ndarray, rule) -> np.ndarray:
    x, w = rule
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s = mid[:, None] + half[:, None] * x[None, :]
    return half * (f(s) * w[None, :]).sum(axis=1)


def _segment_integrals(f: Callable, edges: np.ndarray, tol: float = QUAD_TOL, max_depth: int = 30) -> np.ndarray:
    """Integral of a vectorized ``f`` over each [edges[k], edges[k+1]].

    Gauss-Legendre with an embedded error estimate (8 vs 16 nodes); segments
    whose estimate exceeds their share of ``tol`` are bisected.
    """
    a, b = edges[:-1], edges[1:]
    out = np.zeros(a.shape[0])
    idx = np.arange(a.shape[0])
    share = tol / max(1, a.shape[0])
    for _ in range(max_depth):
        if idx.size == 0:
            return out
        lo = _gl(f, a, b, _GL_LO)
        hi = _gl(f, a, b, _GL_HI)
        done = np.abs(hi - lo) <= max(share, 1e-15) * np.maximum(1.0, np.abs(hi))
        np.add.at(out, idx[done], hi[done])
        keep = ~done
        m = 0.5 * (a[keep] + b[keep])
        a = np.concatenate([a[keep], m])
        b = np.concatenate([m, b[keep]])
        idx = np.concatenate([idx[keep], idx[keep]])
        share *= 0.5
    # depth exhausted; accept the high-order estimate
    np.add.at(out, idx, _gl(f, a, b, _GL_HI))
    return out


def _cumulative(f: Callable, edges: np.ndarray, tol: float = QUAD_TOL) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(_segment_integrals(f, edges, tol))])


def _merge_grid(horizon: float, n_grid: int, extra=()) -> np.ndarray:
    if not (horizon > 0 and np.isfinite(horizon)):
        raise ValueError("horizon must be positive and finite")
    if n_grid < 2:
        raise ValueError("n_grid must be at least 2")
    g = np.linspace(0.0, horizon, int(n_grid))
    extra = np.asarray(extra, dtype=float)
    extra = extra[(extra > 0) & (extra < horizon)]
    return np.union1d(g, extra)


@dataclass
class ConditionReport:
    """Outcome of an admissibility check on lambda.

    ``holds`` is the verdict on the checked horizon. ``sufficient_holds`` is
    the strict analytic sufficient condition for exponential lambda (``None``
    when not applicable); the two may disagree in the boundary case.
    """

    holds: bool
    margin: float
    first_violation_time: Optional[float]
    horizon: float
    threshold: float
    analytic_sup: Optional[float] = None
    sufficient_holds: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "holds": bool(self.holds),
            "margin": float(self.margin),
            "first_violation_time": None if self.first_violation_time is None else float(self.first_violation_time),
            "horizon": float(self.horizon),
            "threshold": float(self.threshold),
            "analytic_sup": None if self.analytic_sup is None else float(self.analytic_sup),
            "sufficient_holds": self.sufficient_holds,
        }


# ---------------------------------------------------------------------------
# drift and volatility uncertainty: Y
# ---------------------------------------------------------------------------


def _exp_rate(G: float, lam: LambdaSpec, delta: float) -> float:
    return (G - lam.rate_base - lam.beta) / (1.0 - delta)


def lambda_integral_1(G: float, lam: LambdaSpec, delta: float, t) -> np.ndarray:
    """I(t) = int_0^t exp(G s / (1 - delta)) lambda_s^q ds, q = 1 / (1 - delta)."""
    delta = _check_delta(delta)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("times must be >= 0")
    if lam.is_zero:
        return np.zeros_like(t)
    q = 1.0 / (1.0 - delta)
    if lam.kind == "exponential":
        k = _exp_rate(G, lam, delta)
        aq = lam.alpha**q
        if k == 0.0:
            return aq * t
        return aq * np.expm1(k * t) / k
    flat = np.atleast_1d(t).ravel()
    order = np.argsort(flat)
    edges = np.union1d(np.concatenate([[0.0], flat]), lam.knots[lam.knots < flat.max()])
    cum = _cumulative(lambda s: np.exp(G * s * q) * lam(s) ** q, edges)
    out = np.empty_like(flat)
    out[order] = np.interp(flat[order], edges, cum)  # flat values are edges, so this is a lookup
    return out.reshape(t.shape)


def check_condition_1(
    Y0: float, G: float, lam: LambdaSpec, delta: float, horizon: float, n_grid: int = 1001
) -> ConditionReport:
    """Check exp(Y0 / (1 - delta)) > I(t) on [0, horizon]."""
    delta = _check_delta(delta)
    q = 1.0 / (1.0 - delta)
    E = float(np.exp(Y0 * q))
    grid = _merge_grid(horizon, n_grid, lam.knots)
    I = lambda_integral_1(G, lam, delta, grid)
    margin = float(np.min(_gap_1(E, G, lam, delta, grid)))
    first = None
    analytic_sup = sufficient = None
    if lam.kind == "exponential" and not lam.is_zero:
        k = _exp_rate(G, lam, delta)
        aq = lam.alpha**q
        analytic_sup = aq / -k if k < 0 else float("inf")
        sufficient = bool(E > analytic_sup)
        tv = None
        if aq == 0.0:  # alpha^q underflowed, nothing to cross
            pass
        elif k == 0.0:
            tv = E / aq
        else:
            arg = 1.0 + k * E / aq
            tv = np.log(arg) / k if arg > 0 else None
        if tv is not None and tv <= horizon:
            first = float(tv)
    elif margin <= 0:
        j = int(np.argmax(I >= E))
        a, base = grid[j - 1], I[j - 1]
        f = lambda s: np.exp(G * s * q) * lam(s) ** q

        def gap(s):
            return base + quad(f, a, s, epsabs=1e-13, epsrel=1e-13)[0] - E

        first = float(brentq(gap, a, grid[j], xtol=1e-14)) if gap(grid[j]) > 0 else float(grid[j])
    holds = margin > 0 and first is None
    return ConditionReport(holds, margin, first, float(horizon), E, analytic_sup, sufficient)


def _gap_1(E: float, G: float, lam: LambdaSpec, delta: float, t: np.ndarray) -> np.ndarray:
    """E - I(t), grouped so that the boundary case E = sup I has no cancellation."""
    if lam.kind == "exponential":
        k = _exp_rate(G, lam, delta)
        aq = lam.alpha ** (1.0 / (1.0 - delta))
        if k != 0.0:
            return (E + aq / k) - aq / k * np.exp(k * t)
    return E - lambda_integral_1(G, lam, delta, t)


def solve_Y_closed_form(Y0: float, G: float, lam: LambdaSpec, delta: float, t):
    """Y_t = -G t + (1 - delta) ln(exp(Y0 / (1 - delta)) - I(t))."""
    delta = _check_delta(delta)
    t = np.asarray(t, dtype=float)
    if lam.is_zero:
        out = Y0 - G * t
        return float(out) if out.ndim == 0 else out
    E = np.exp(Y0 / (1.0 - delta))
    gap = _gap_1(E, G, lam, delta, t)
    if np.any(gap <= 0):
        bad = float(np.min(np.where(gap <= 0, t, np.inf)))
        raise ConditionViolation(f"condition on lambda violated by t = {bad:.6g}", condition="condition_1", time=bad)
    out = np.where(t == 0, Y0, -G * t + (1.0 - delta) * np.log(gap))
    return float(out) if out.ndim == 0 else out


def consumption_star_dv(Y0: float, G: float, lam: LambdaSpec, delta: float, t):
    """Optimal consumption rate lambda_t^q exp(-Y_t / (1 - delta))."""
    delta = _check_delta(delta)
    Y = solve_Y_closed_form(Y0, G, lam, delta, t)
    out = lam(t) ** (1.0 / (1.0 - delta)) * np.exp(-np.asarray(Y) / (1.0 - delta))
    return float(out) if np.ndim(out) == 0 else out


def Y_ode_rhs(G: float, lam: LambdaSpec, delta: float, t, Y):
    """Right-hand side of the Y equation."""
    q = 1.0 / (1.0 - delta)
    return -(G + (1.0 - delta) * lam(t) ** q * np.exp(-np.asarray(Y) * q))


# ---------------------------------------------------------------------------
# drift uncertainty only: g
# ---------------------------------------------------------------------------


class YPath:
    """Piecewise-linear Y on a grid with its exact running integral."""

    def __init__(self, times, values):
        t = np.asarray(times, dtype=float)
        y = np.asarray(values, dtype=float)
        if t.ndim != 1 or t.shape != y.shape or t.size < 2:
            raise ValueError("Y path needs matching 1-D times and values")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("Y path grid must start at 0 and strictly increase")
        if not np.all(np.isfinite(y)):
            raise ValueError("Y path must be finite")
        self.t, self.y = t, y
        self.cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))])

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    def __call__(self, s):
        return np.interp(s, self.t, self.y)

    def integral(self, s):
        """int_0^s Y, exact for the linear interpolant."""
        s = np.asarray(s, dtype=float)
        k = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, self.t.size - 2)
        h = s - self.t[k]
        slope = (self.y[k + 1] - self.y[k]) / (self.t[k + 1] - self.t[k])
        return self.cum[k] + self.y[k] * h + 0.5 * slope * h * h


def _as_ypath(Y_path) -> YPath:
    if isinstance(Y_path, YPath):
        return Y_path
    times, values = Y_path
    return YPath(times, values)


def lambda_integral_2(Y_path, rho: float, lam: LambdaSpec, delta: float, t) -> np.ndarray:
    """J(t) = int_0^t exp((rho int_0^s Y - Y_s) / (1 - delta)) lambda_s^q ds."""
    delta = _check_delta(delta)
    yp = _as_ypath(Y_path)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0) or np.any(t > yp.horizon * (1 + 1e-12)):
        raise ValueError("Y path does not cover the requested times")
    if lam.is_zero:
        return np.zeros_like(t)
    q = 1.0 / (1.0 - delta)

    def f(s):
        return np.exp((rho * yp.integral(s) - yp(s)) * q) * lam(s) ** q

    top = float(t.max())
    knots = np.concatenate([yp.t, lam.knots])
    edges = np.union1d(np.concatenate([[0.0], t]), knots[knots < top])
    cum = _cumulative(f, edges)
    return np.interp(t, edges, cum)


def check_condition_2(
    g0: float, Y_path, rho: float, lam: LambdaSpec, delta: float, horizon: float, n_grid: int = 1001,
    Y_bound: float | None = None,
) -> ConditionReport:
    """Check exp(-g0 / (1 - delta)) > J(t) on [0, horizon].

    For exponential lambda the analytic sufficient condition is evaluated with
    ``Y_bound`` (default: max |Y| on the path).
    """
    delta = _check_delta(delta)
    yp = _as_ypath(Y_path)
    if horizon > yp.horizon * (1 + 1e-12):
        raise ValueError(f"Y path covers [0, {yp.horizon}] but horizon is {horizon}")
    q = 1.0 / (1.0 - delta)
    E = float(np.exp(-g0 * q))
    grid = _merge_grid(horizon, n_grid, np.concatenate([yp.t, lam.knots]))
    J = lambda_integral_2(yp, rho, lam, delta, grid)
    margin = E - float(J.max())
    first = None
    if margin <= 0:
        j = int(np.argmax(J >= E))
        a, base = grid[j - 1], J[j - 1]

        def f(s):
            return float(np.exp((rho * yp.integral(s) - yp(s)) * q) * lam(s) ** q)

        def gap(s):
            return base + quad(f, a, s, epsabs=1e-13, epsrel=1e-13)[0] - E

        first = float(brentq(gap, a, grid[j], xtol=1e-14)) if gap(grid[j]) > 0 else float(grid[j])
    analytic_sup = sufficient = None
    if lam.kind == "exponential" and not lam.is_zero:
        C = float(np.max(np.abs(yp.y))) if Y_bound is None else float(Y_bound)
        analytic_sup = (1.0 - delta) / lam.beta * lam.alpha**q * np.exp(C * q)
        sufficient = bool(E > analytic_sup)
    return ConditionReport(margin > 0, margin, first, float(horizon), E, analytic_sup, sufficient)


def solve_g_closed_form(g0: float, Y_path, rho: float, lam: LambdaSpec, delta: float, t):
    """g_t = rho int_0^t Y - (1 - delta) ln(exp(-g0 / (1 - delta)) - J(t))."""
    delta = _check_delta(delta)
    yp = _as_ypath(Y_path)
    t_arr = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t_arr)
    E = np.exp(-g0 / (1.0 - delta))
    gap = E - lambda_integral_2(yp, rho, lam, delta, flat)
    if np.any(gap <= 0):
        bad = float(np.min(np.where(gap <= 0, flat, np.inf)))
        raise ConditionViolation(f"condition on lambda violated by t = {bad:.6g}", condition="condition_2", time=bad)
    out = np.where(flat == 0, g0, rho * yp.integral(flat) - (1.0 - delta) * np.log(gap))
    return float(out[0]) if t_arr.ndim == 0 else out.reshape(t_arr.shape)


def g_ode_rhs(rho: float, lam: LambdaSpec, delta: float, t, Y, g):
    q = 1.0 / (1.0 - delta)
    return rho * np.asarray(Y) + (1.0 - delta) * lam(t) ** q * np.exp((np.asarray(g) - np.asarray(Y)) * q)


# ---------------------------------------------------------------------------
# preference pair
# ---------------------------------------------------------------------------


@dataclass
class PreferencePair:
    mode: str
    delta: float
    lam: LambdaSpec
    Y0: float = 0.0
    G: float | None = None
    g0: float = 0.0
    rho: float | None = None
    Y_path: YPath | None = None
    Z_times: np.ndarray | None = None
    Z_values: np.ndarray | None = None
    condition: ConditionReport | None = None
    _g_cache: dict = field(default_factory=dict, repr=False)

    def Y(self, t):
        if self.mode == "drift_vol":
            return solve_Y_closed_form(self.Y0, self.G, self.lam, self.delta, t)
        out = self.Y_path(np.asarray(t, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def g(self, t):
        if self.mode == "drift_vol":
            return 0.0 * np.asarray(t, dtype=float) if np.ndim(t) else 0.0
        return solve_g_closed_form(self.g0, self.Y_path, self.rho, self.lam, self.delta, t)

    def log_scale(self, t):
        """Y_t - g_t."""
        return np.asarray(self.Y(t)) - np.asarray(self.g(t))

    def U(self, x, t):
        x = np.asarray(x, dtype=float)
        return x**self.delta / self.delta * np.exp(self.log_scale(t))

    def Uc(self, C, t):
        C = np.asarray(C, dtype=float)
        return C**self.delta / self.delta * self.lam(t)

    def c_star(self, t):
        q = 1.0 / (1.0 - self.delta)
        return self.lam(t) ** q * np.exp(-self.log_scale(t) * q)

    def Z(self, t):
        if self.mode == "drift_vol":
            return np.zeros(np.shape(t))
        if self.Z_values is None:
            raise ValueError("drift-only preferences were built without a Z path")
        z = np.atleast_2d(self.Z_values.T).T if self.Z_values.ndim == 1 else self.Z_values
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.Z_times, z[:, i]) for i in range(z.shape[1])], axis=-1)

    def a(self, x, t):
        """Volatility process of U; vector valued in drift-only mode."""
        u = np.asarray(self.U(x, t))
        if self.mode == "drift_vol":
            return np.zeros_like(u)
        return u[..., None] * self.Z(t)

    def wealth_consumption_ratio(self, t):
        """(U(x, t) / x^delta) / (U^c(C, t) / C^delta) = exp(Y_t - g_t) / lambda_t."""
        return np.exp(self.log_scale(t)) / self.lam(t)

    def to_csv(self, path, times, x: float = 1.0, C: float = 1.0) -> None:
        times = np.asarray(times, dtype=float)
        Y = np.atleast_1d(self.Y(times))
        g = np.atleast_1d(self.g(times))
        cs = np.atleast_1d(self.c_star(times))
        U = np.atleast_1d(self.U(x, times))
        Uc = np.atleast_1d(self.Uc(C, times))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "Y", "g", "c_star", "U_at_x", "Uc_at_C"])
            for row in zip(times, Y, g, cs, U, Uc):
                w.writerow([repr(float(v)) for v in row])


def build_preferences(
    mode: str,
    delta: float,
    lam: LambdaSpec | None = None,
    *,
    horizon: float = 1.0,
    n_grid: int = 1001,
    Y0: float = 0.0,
    G: float | None = None,
    rho: float | None = None,
    g0: float = 0.0,
    Y_path=None,
    Z_path=None,
) -> PreferencePair:
    """Assemble (U, U^c) after checking the relevant condition on lambda.

    drift_vol needs ``G`` (saddle value) and ``Y0``. drift_only needs ``rho``,
    ``g0``, ``Y_path`` as (times, values) and ``Z_path`` as (times, values of
    shape (n,) or (n, d)).
    """
    delta = _check_delta(delta)
    lam = LambdaSpec.zero() if lam is None else lam
    if mode == "drift_vol":
        if G is None:
            raise ValueError("drift_vol preferences need the saddle value G")
        rep = check_condition_1(Y0, G, lam, delta, horizon, n_grid)
        if not rep.holds:
            raise ConditionViolation(
                f"condition on lambda fails at t = {rep.first_violation_time}",
                condition="condition_1",
                time=rep.first_violation_time,
            )
        return PreferencePair("drift_vol", delta, lam, Y0=float(Y0), G=float(G), condition=rep)
    if mode == "drift_only":
        if rho is None or not rho > 0:
            raise ValueError("drift_only preferences need rho > 0")
        if Y_path is None:
            raise ValueError("drift_only preferences need a Y path")
        if Z_path is None:
            raise ValueError("drift_only preferences need a Z path")
        yp = _as_ypath(Y_path)
        horizon = min(horizon, yp.horizon)
        rep = check_condition_2(g0, yp, rho, lam, delta, horizon, n_grid)
        if not rep.holds:
            raise ConditionViolation(
                f"condition on lambda fails at t = {rep.first_violation_time}",
                condition="condition_2",
                time=rep.first_violation_time,
            )
        zt, zv = Z_path
        return PreferencePair(
            "drift_only",
            delta,
            lam,
            Y0=float(yp.y[0]),
            g0=float(g0),
            rho=float(rho),
            Y_path=yp,
            Z_times=np.asarray(zt, dtype=float),
            Z_values=np.asarray(zv, dtype=float),
            condition=rep,
        )
    raise ValueError(f"unknown mode {mode!r}")
