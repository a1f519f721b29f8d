"""Uncertain market model and exact simulation of proportional-strategy wealth."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import nnls

from .exceptions import AdmissibilityError

FEASIBILITY_TOL = 1e-9
PSD_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MarketSpec:
    """Bond rate, drift box, covariance polytope and investment box.

    ``cov_vertices`` are the vertices of the covariance set; its convex hull
    is the set of admissible ``sigma @ sigma.T``. ``p_lo``/``p_hi`` may hold
    infinite entries for unbounded positions.
    """

    r: float
    b_lo: np.ndarray
    b_hi: np.ndarray
    cov_vertices: tuple
    p_lo: np.ndarray
    p_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", float(self.r))
        b_lo = _frozen(np.atleast_1d(self.b_lo))
        b_hi = _frozen(np.atleast_1d(self.b_hi))
        d = b_lo.shape[0]
        verts = tuple(_frozen(np.atleast_2d(v)) for v in self.cov_vertices)
        p_lo = _frozen(np.atleast_1d(self.p_lo))
        p_hi = _frozen(np.atleast_1d(self.p_hi))
        object.__setattr__(self, "b_lo", b_lo)
        object.__setattr__(self, "b_hi", b_hi)
        object.__setattr__(self, "cov_vertices", verts)
        object.__setattr__(self, "p_lo", p_lo)
        object.__setattr__(self, "p_hi", p_hi)
        self._validate(d)

    def _validate(self, d: int) -> None:
        if not np.isfinite(self.r) or self.r < 0:
            raise ValueError(f"risk-free rate must be finite and >= 0, got {self.r}")
        if self.b_hi.shape != (d,) or self.p_lo.shape != (d,) or self.p_hi.shape != (d,):
            raise ValueError("b_lo, b_hi, p_lo, p_hi must all have length d")
        if not (np.all(np.isfinite(self.b_lo)) and np.all(np.isfinite(self.b_hi))):
            raise ValueError("drift box must be finite (compact)")
        if np.any(self.b_lo > self.b_hi):
            raise ValueError("b_lo must be <= b_hi componentwise")
        if np.any(np.isnan(self.p_lo)) or np.any(np.isnan(self.p_hi)):
            raise ValueError("investment bounds must not be NaN")
        if np.any(self.p_lo > 0) or np.any(self.p_hi < 0):
            raise ValueError("investment box must contain the origin (p_lo <= 0 <= p_hi)")
        if not self.cov_vertices:
            raise ValueError("cov_vertices must be non-empty")
        has_pd = False
        for k, v in enumerate(self.cov_vertices):
            if v.shape != (d, d):
                raise ValueError(f"cov vertex {k} has shape {v.shape}, expected {(d, d)}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"cov vertex {k} is not finite")
            if not np.allclose(v, v.T, atol=1e-12, rtol=0):
                raise ValueError(f"cov vertex {k} is not symmetric")
            eig = np.linalg.eigvalsh(v)
            if eig[0] < -PSD_TOL:
                raise ValueError(f"cov vertex {k} is not positive semi-definite (min eig {eig[0]:.3g})")
            has_pd = has_pd or eig[0] > PSD_TOL
        if not has_pd:
            raise ValueError("at least one covariance vertex must be positive definite")

    @property
    def d(self) -> int:
        return self.b_lo.shape[0]

    @property
    def excess_lo(self) -> np.ndarray:
        return self.b_lo - self.r

    @property
    def excess_hi(self) -> np.ndarray:
        return self.b_hi - self.r

    # -- membership -------------------------------------------------------

    def in_pi(self, p, tol: float = FEASIBILITY_TOL) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.p_lo - tol) and np.all(p <= self.p_hi + tol))

    def in_drift_box(self, b, tol: float = FEASIBILITY_TOL) -> bool:
        b = np.asarray(b, dtype=float)
        return bool(np.all(b >= self.b_lo - tol) and np.all(b <= self.b_hi + tol))

    def in_cov_hull(self, S, tol: float = FEASIBILITY_TOL) -> bool:
        """Whether ``S`` lies in the convex hull of ``cov_vertices``."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape != (self.d, self.d):
            return False
        if len(self.cov_vertices) == 1:
            return bool(np.max(np.abs(S - self.cov_vertices[0])) <= tol)
        if self.d == 1:
            vals = [v[0, 0] for v in self.cov_vertices]
            return min(vals) - tol <= S[0, 0] <= max(vals) + tol
        # barycentric weights by NNLS with a heavily weighted sum-to-one row
        A = np.column_stack([v.ravel() for v in self.cov_vertices])
        scale = 1e6 * max(1.0, np.max(np.abs(A)))
        A_aug = np.vstack([A, scale * np.ones(A.shape[1])])
        rhs = np.concatenate([S.ravel(), [scale]])
        w, _ = nnls(A_aug, rhs)
        recon = (A @ w).reshape(self.d, self.d)
        return bool(np.max(np.abs(recon - S)) <= tol and abs(w.sum() - 1.0) <= 1e-8)

    def clip_pi(self, p) -> np.ndarray:
        return np.clip(np.asarray(p, dtype=float), self.p_lo, self.p_hi)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        def vec(a):
            return [float(x) for x in a]

        def bound(a):
            return [float(x) if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in a]

        return {
            "r": self.r,
            "d": self.d,
            "b_lo": vec(self.b_lo),
            "b_hi": vec(self.b_hi),
            "cov_vertices": [[vec(row) for row in v] for v in self.cov_vertices],
            "p_lo": bound(self.p_lo),
            "p_hi": bound(self.p_hi),
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "MarketSpec":
        missing = {"r", "b_lo", "b_hi", "cov_vertices", "p_lo", "p_hi"} - set(cfg)
        if missing:
            raise ValueError(f"market config missing keys: {sorted(missing)}")
        d = cfg.get("d")
        b_lo = np.atleast_1d(np.asarray(cfg["b_lo"], dtype=float))
        if d is None:
            d = b_lo.shape[0]
        verts = []
        for v in cfg["cov_vertices"]:
            v = np.asarray(v, dtype=float)
            # accept scalars (d=1) and flat row-major lists
            verts.append(v.reshape(d, d))
        return cls(
            r=cfg["r"],
            b_lo=b_lo,
            b_hi=cfg["b_hi"],
            cov_vertices=tuple(verts),
            p_lo=[_parse_bound(x) for x in np.atleast_1d(cfg["p_lo"])],
            p_hi=[_parse_bound(x) for x in np.atleast_1d(cfg["p_hi"])],
        )

    @classmethod
    def from_json(cls, path) -> "MarketSpec":
        with open(path) as fh:
            cfg = json.load(fh)
        return cls.from_dict(cfg.get("market", cfg))

    @classmethod
    def one_dim(cls, r, b_lo, b_hi, sigma_lo, sigma_hi, p_lo=-np.inf, p_hi=np.inf) -> "MarketSpec":
        """Single-asset market with a volatility interval ``[sigma_lo, sigma_hi]``."""
        verts = sorted({float(sigma_lo) ** 2, float(sigma_hi) ** 2})
        return cls(
            r=r,
            b_lo=[b_lo],
            b_hi=[b_hi],
            cov_vertices=tuple(np.array([[v]]) for v in verts),
            p_lo=[p_lo],
            p_hi=[p_hi],
        )


def _parse_bound(x) -> float:
    # JSON has no infinity literal; accept "inf"/"-inf" strings
    if x is None:
        raise ValueError("use 'inf'/'-inf' for unbounded investment entries")
    return float(x)


def sigma_from_cov(S) -> np.ndarray:
    """Symmetric PSD square root; the non-negative root in one dimension."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    w, V = np.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class StrategyPath:
    """Piecewise-constant proportional strategy and realized parameters.

    Arrays are per step: ``p`` and ``b`` have shape (N, d), ``c`` shape (N,),
    ``sigma`` shape (N, d, d); step ``k`` covers ``[times[k], times[k+1])``.
    """

    times: np.ndarray
    p: np.ndarray
    c: np.ndarray
    b: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times)
        n = times.shape[0] - 1
        if times.ndim != 1 or n < 1:
            raise ValueError("time grid needs at least two points")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("time grid must start at 0 and be strictly increasing")
        p = _frozen(np.atleast_2d(self.p))
        d = p.shape[1]
        b = _frozen(np.atleast_2d(self.b))
        c = _frozen(np.atleast_1d(self.c))
        sigma = _frozen(np.asarray(self.sigma, dtype=float).reshape(-1, d, d))
        for name, arr, shape in (("p", p, (n, d)), ("b", b, (n, d)), ("c", c, (n,)), ("sigma", sigma, (n, d, d))):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        for name, arr in (("times", times), ("p", p), ("b", b), ("c", c), ("sigma", sigma)):
            object.__setattr__(self, name, arr)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def d(self) -> int:
        return self.p.shape[1]

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @classmethod
    def constant(cls, horizon: float, dt: float, p, c, b, sigma) -> "StrategyPath":
        """Constant (p, b, sigma) on a uniform grid; ``c`` may be a scalar,
        a per-step array or a callable of time evaluated at step starts."""
        times = uniform_grid(horizon, dt)
        n = times.shape[0] - 1
        p = np.atleast_1d(np.asarray(p, dtype=float))
        d = p.shape[0]
        b = np.atleast_1d(np.asarray(b, dtype=float))
        sigma = np.asarray(sigma, dtype=float).reshape(d, d)
        if callable(c):
            c_steps = np.asarray(c(times[:-1]), dtype=float) * np.ones(n)
        else:
            c_steps = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
        return cls(
            times=times,
            p=np.tile(p, (n, 1)),
            c=c_steps,
            b=np.tile(b, (n, 1)),
            sigma=np.tile(sigma, (n, 1, 1)),
        )

    def check_admissible(self, spec: MarketSpec, tol: float = FEASIBILITY_TOL) -> None:
        if self.d != spec.d:
            raise AdmissibilityError(f"strategy dimension {self.d} != market dimension {spec.d}")
        if np.any(self.p < spec.p_lo - tol) or np.any(self.p > spec.p_hi + tol):
            raise AdmissibilityError("investment proportions leave the investment box")
        if np.any(self.c < -tol):
            raise AdmissibilityError("consumption rates must be non-negative")
        if np.any(self.b < spec.b_lo - tol) or np.any(self.b > spec.b_hi + tol):
            raise AdmissibilityError("realized drift leaves the drift box")
        # distinct sigma matrices only; constant strategies repeat one
        uniq = np.unique(self.sigma.reshape(self.n_steps, -1), axis=0)
        for s in uniq:
            s = s.reshape(self.d, self.d)
            if not spec.in_cov_hull(s @ s.T, tol=max(tol, 1e-9)):
                raise AdmissibilityError("realized sigma sigma^T leaves the covariance set")


def uniform_grid(horizon: float, dt: float) -> np.ndarray:
    if not (np.isfinite(horizon) and horizon > 0):
        raise ValueError("horizon must be positive and finite")
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError("dt must be positive and finite")
    n = max(1, int(round(horizon / dt)))
    return np.linspace(0.0, horizon, n + 1)


# -- random streams ---------------------------------------------------------


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, path index)."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed: int, path_ids: Sequence[int], dts: np.ndarray, d: int) -> np.ndarray:
    """Brownian increments of shape (len(path_ids), N, d)."""
    dts = np.asarray(dts, dtype=float)
    out = np.empty((len(path_ids), dts.shape[0], d))
    sq = np.sqrt(dts)[:, None]
    for j, pid in enumerate(path_ids):
        out[j] = path_rng(seed, pid).standard_normal((dts.shape[0], d)) * sq
    return out


def _log_growth(spec: MarketSpec, strat: StrategyPath):
    """Per-step log-drift and the volatility vector sigma^T p."""
    vol = np.einsum("kij,ki->kj", strat.sigma, strat.p)
    mu = spec.r + np.einsum("ki,ki->k", strat.p, strat.b - spec.r) - strat.c
    drift = (mu - 0.5 * np.einsum("kj,kj->k", vol, vol)) * strat.dts
    return drift, vol


def _simulate_chunk(spec, x0, strat, seed, path_ids):
    dW = brownian_increments(seed, path_ids, strat.dts, strat.d)
    drift, vol = _log_growth(spec, strat)
    stoch = np.einsum("nkj,kj->nk", dW, vol)
    logx = np.zeros((len(path_ids), strat.n_steps + 1))
    np.cumsum(drift[None, :] + stoch, axis=1, out=logx[:, 1:])
    return dW, x0 * np.exp(logx)


def _validate_sim_inputs(spec, x0, strat, n_paths, dt):
    if not (np.isfinite(x0) and x0 > 0):
        raise ValueError("initial wealth must be positive and finite")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if dt is not None:
        if not (np.isfinite(dt) and dt > 0):
            raise ValueError("dt must be positive")
        if not np.allclose(strat.dts, dt, rtol=1e-9, atol=0):
            raise ValueError("dt does not match the strategy grid")
    strat.check_admissible(spec)


def iter_wealth_chunks(
    spec: MarketSpec,
    x0: float,
    strat: StrategyPath,
    n_paths: int,
    seed: int,
    chunk_size: int = 2048,
    n_jobs: int = 1,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(path_ids, dW, X)`` in path-index order.

    Chunks are independent of ``n_jobs``; each path owns its random stream,
    so the concatenated output does not depend on scheduling.
    """
    _validate_sim_inputs(spec, x0, strat, n_paths, None)
    bounds = [(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]

    def work(bd):
        ids = np.arange(*bd)
        dW, X = _simulate_chunk(spec, x0, strat, seed, ids)
        return ids, dW, X

    if n_jobs == 1:
        for bd in bounds:
            yield work(bd)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            # map preserves submission order
            yield from ex.map(work, bounds)


@dataclass(frozen=True)
class SimResult:
    seed: int
    times: np.ndarray
    x0: float
    strategy: StrategyPath
    dW: np.ndarray  # (n_paths, N, d)
    X: np.ndarray  # (n_paths, N + 1)
    drift_integral: np.ndarray  # per path: int (mu - |sigma^T p|^2 / 2) ds
    stochastic_integral: np.ndarray  # per path: int p^T sigma dW
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dt(self) -> float:
        return float(self.strategy.dts[0])

    def to_csv(self, path) -> None:
        """Long-format CSV with columns ``path_id, t, X``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "t", "X"])
            for i in range(self.n_paths):
                for t, x in zip(self.times, self.X[i]):
                    w.writerow([i, repr(float(t)), repr(float(x))])


def simulate_wealth(
    spec: MarketSpec,
    x0: float,
    strat: StrategyPath,
    n_paths: int,
    seed: int,
    dt: float | None = None,
    n_jobs: int = 1,
    chunk_size: int = 2048,
) -> SimResult:
    """Exact log-space simulation of the wealth SDE for a proportional strategy.

    With piecewise-constant coefficients the exponential representation is
    exact on the grid, so every path stays strictly positive.
    """
    _validate_sim_inputs(spec, x0, strat, n_paths, dt)
    dWs, Xs = [], []
    for _, dW, X in iter_wealth_chunks(spec, x0, strat, n_paths, seed, chunk_size, n_jobs):
        dWs.append(dW)
        Xs.append(X)
    dW = np.concatenate(dWs)
    X = np.concatenate(Xs)
    drift, vol = _log_growth(spec, strat)
    stoch = np.einsum("nkj,kj->n", dW, vol)
    return SimResult(
        seed=int(seed),
        times=strat.times,
        x0=float(x0),
        strategy=strat,
        dW=dW,
        X=X,
        drift_integral=np.full(n_paths, drift.sum()),
        stochastic_integral=stoch,
        diagnostics={"min_X": float(X.min()), "max_X": float(X.max())},
    )


@dataclass(frozen=True)
class PowerWealth:
    x_pow: np.ndarray  # (n_paths, N + 1): X_t^delta
    consumption_integral: np.ndarray  # (n_paths, N + 1): int_0^t (c_s X_s)^delta ds
    max_x_pow: float
    var_x_pow: np.ndarray  # sample variance over paths at each grid time
    max_var_x_pow: float


def power_wealth_functional(sim: SimResult, delta: float) -> PowerWealth:
    """Power-utility integrands plus moment diagnostics.

    The uniform-integrability requirement on ``X_tau^delta`` is not testable
    from finite samples; the sample max and variance are reported instead.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    x_pow = sim.X ** delta
    c = sim.strategy.c
    # left-point rule, consistent with piecewise-constant consumption
    incr = (c[None, :] * sim.X[:, :-1]) ** delta * sim.strategy.dts[None, :]
    cons = np.zeros_like(x_pow)
    np.cumsum(incr, axis=1, out=cons[:, 1:])
    var = x_pow.var(axis=0, ddof=1) if sim.n_paths > 1 else np.zeros(x_pow.shape[1])
    return PowerWealth(
        x_pow=x_pow,
        consumption_integral=cons,
        max_x_pow=float(x_pow.max()),
        var_x_pow=var,
        max_var_x_pow=float(var.max()),
    )


def load_market(path: str | Path) -> MarketSpec:
    return MarketSpec.from_json(path)
