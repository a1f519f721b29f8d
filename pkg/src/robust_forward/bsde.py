"""Infinite-horizon BSDE dY = -(H(t, Z) + |Z|^2 / 2 - rho Y) dt + Z'dW.

The equation is truncated at a finite horizon T with Y_T = 0; the
truncation error decays like exp(-rho (T - t)).

* Deterministic sigma: Z = 0 solves the truncated equation and Y solves a
  linear ODE, integrated backward by an exponential integrator.
* Markov-factor sigma: least-squares Monte Carlo over a one-dimensional
  Ornstein-Uhlenbeck factor.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .market import MarketSpec, uniform_grid
from .saddle import H_lipschitz_constant, saddle_H_diagonal, solve_saddle_H

log = logging.getLogger(__name__)

COND_MAX = 1e10
_GL2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


# ---------------------------------------------------------------------------
# volatility models
# ---------------------------------------------------------------------------


def logistic_vol_map(s_lo, s_hi, d: int | None = None) -> Callable:
    """Diagonal map V -> s_lo + (s_hi - s_lo) / (1 + exp(-V)), bounded above and away from 0."""
    s_lo = np.atleast_1d(np.asarray(s_lo, dtype=float))
    s_hi = np.atleast_1d(np.asarray(s_hi, dtype=float))
    if d is not None:
        s_lo, s_hi = np.broadcast_to(s_lo, (d,)), np.broadcast_to(s_hi, (d,))
    if np.any(s_lo <= 0) or np.any(s_hi < s_lo):
        raise ValueError("need 0 < s_lo <= s_hi")

    def sigma_map(V):
        V = np.asarray(V, dtype=float)
        return s_lo + (s_hi - s_lo) / (1.0 + np.exp(-V[..., None]))

    sigma_map.inv_bound = float(1.0 / s_lo.min())
    return sigma_map


@dataclass(frozen=True)
class SigmaModel:
    """Volatility of the drift-only market.

    ``deterministic``: ``sigma_fn(t)`` returns an invertible (d, d) matrix.
    ``markov_factor``: dV = kappa (theta - V) dt + eta dW^1 with V_0 = v0 and
    ``sigma_map(V)``; with ``diagonal=True`` the map returns the diagonal,
    shape (n, d), otherwise full matrices (n, d, d).
    """

    kind: str
    d: int
    sigma_fn: Optional[Callable] = None
    constant: bool = False
    kappa: float = 0.0
    theta: float = 0.0
    eta: float = 0.0
    v0: float = 0.0
    sigma_map: Optional[Callable] = None
    diagonal: bool = True
    inv_bound: Optional[float] = None

    def __post_init__(self):
        if self.kind == "deterministic":
            if self.sigma_fn is None:
                raise ValueError("deterministic model needs sigma_fn")
        elif self.kind == "markov_factor":
            if self.sigma_map is None:
                raise ValueError("markov_factor model needs sigma_map")
            if self.kappa < 0 or self.eta < 0:
                raise ValueError("kappa and eta must be >= 0")
            for name in ("kappa", "theta", "eta", "v0"):
                if not np.isfinite(getattr(self, name)):
                    raise ValueError(f"{name} must be finite")
        else:
            raise ValueError(f"unknown sigma model kind {self.kind!r}")

    @classmethod
    def constant_sigma(cls, sigma) -> "SigmaModel":
        s = np.atleast_2d(np.asarray(sigma, dtype=float))
        s.setflags(write=False)
        inv = float(np.linalg.norm(np.linalg.inv(s), 2))
        return cls("deterministic", s.shape[0], sigma_fn=lambda t: s, constant=True, inv_bound=inv)

    @classmethod
    def deterministic(cls, sigma_fn: Callable, d: int, inv_bound: float | None = None) -> "SigmaModel":
        return cls("deterministic", d, sigma_fn=sigma_fn, inv_bound=inv_bound)

    @classmethod
    def markov_factor(
        cls, kappa, theta, eta, v0, sigma_map: Callable, d: int, diagonal: bool = True, inv_bound=None
    ) -> "SigmaModel":
        if inv_bound is None:
            inv_bound = getattr(sigma_map, "inv_bound", None)
        return cls(
            "markov_factor", d, kappa=float(kappa), theta=float(theta), eta=float(eta), v0=float(v0),
            sigma_map=sigma_map, diagonal=diagonal, inv_bound=inv_bound,
        )

    def sigma_at(self, t: float, v: float | None = None) -> np.ndarray:
        """Volatility matrix at time t (and factor value v for the Markov model)."""
        if self.kind == "deterministic":
            return np.atleast_2d(np.asarray(self.sigma_fn(t), dtype=float))
        v = self.v0 if v is None else v
        s = np.asarray(self.sigma_map(np.array([v])), dtype=float)[0]
        return np.diag(s) if self.diagonal else s


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def driver(t, y, z, sigma_model: SigmaModel, spec: MarketSpec, delta: float, rho: float, v=None) -> float:
    """F(t, y, z) = H(t, z) + |z|^2 / 2 - rho y."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    sigma = sigma_model.sigma_at(t, v)
    H = solve_saddle_H(spec, delta, t, sigma, z).value
    return float(H + 0.5 * z @ z - rho * y)


def driver_constant(sigma_model: SigmaModel, spec: MarketSpec, delta: float, inv_bound: float | None = None) -> float:
    s = inv_bound if inv_bound is not None else sigma_model.inv_bound
    if s is None:
        raise ValueError("a bound on |sigma^-1| is required")
    return H_lipschitz_constant(spec, delta, s)


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------


@dataclass
class BsdeSolution:
    T: float
    times: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    sup_bound: float
    tail_estimate: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def Y0(self) -> float:
        return float(self.Y[0])

    @property
    def z_energy(self) -> float:
        """sum |Z_k|^2 dt over the grid."""
        return float(np.sum(np.sum(self.Z[:-1] ** 2, axis=1) * np.diff(self.times)))

    def z_energy_weighted(self, rho: float) -> float:
        """sum exp(-2 rho t_k) |Z_k|^2 dt."""
        w = np.exp(-2.0 * rho * self.times[:-1])
        return float(np.sum(w * np.sum(self.Z[:-1] ** 2, axis=1) * np.diff(self.times)))

    def to_csv(self, path) -> None:
        d = self.Z.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "Y"] + [f"Z_{i + 1}" for i in range(d)] + ["tail_estimate"])
            for k in range(self.times.size):
                row = [self.times[k], self.Y[k], *self.Z[k], self.tail_estimate[k]]
                w.writerow([repr(float(v)) for v in row])

    def summary(self) -> dict:
        out = {
            "T": float(self.T),
            "Y0": self.Y0,
            "n_steps": int(self.times.size - 1),
            "sup_bound": float(self.sup_bound),
            "tail_estimate_0": float(self.tail_estimate[0]),
            "method": self.method,
            "z_energy": self.z_energy,
        }
        for k, v in self.diagnostics.items():
            if isinstance(v, (int, float, str, bool)) or v is None:
                out[k] = v
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _check_common(delta, rho, T, dt):
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if not (rho > 0 and np.isfinite(rho)):
        raise ValueError("rho must be positive")
    if not (T > 0 and dt > 0 and np.isfinite(T) and np.isfinite(dt)):
        raise ValueError("T and dt must be positive")


def solve_bsde_deterministic_sigma(
    sigma_model: SigmaModel, spec: MarketSpec, delta: float, rho: float, T: float, dt: float
) -> BsdeSolution:
    """Truncated BSDE with deterministic volatility (Z = 0).

    Y_k = exp(-rho h) Y_{k+1} + int_{t_k}^{t_{k+1}} exp(-rho (s - t_k)) H(s, 0) ds,
    the integral by two-point Gauss-Legendre inside each step (fourth order,
    and exact up to rounding for H piecewise constant between grid points).
    """
    if sigma_model.kind != "deterministic":
        raise ValueError("expected a deterministic sigma model")
    _check_common(delta, rho, T, dt)
    times = uniform_grid(T, dt)
    n = times.size - 1
    d = sigma_model.d
    z0 = np.zeros(d)

    if sigma_model.constant:
        H_const = solve_saddle_H(spec, delta, 0.0, sigma_model.sigma_at(0.0), z0).value
        H_of = lambda s: H_const
    else:
        H_of = lambda s: solve_saddle_H(spec, delta, s, sigma_model.sigma_at(s), z0).value

    Y = np.zeros(n + 1)
    H_sup = 0.0
    for k in range(n - 1, -1, -1):
        h = times[k + 1] - times[k]
        acc = 0.0
        for node in _GL2:
            Hs = H_of(times[k] + node * h)
            H_sup = max(H_sup, abs(Hs))
            acc += 0.5 * h * np.exp(-rho * node * h) * Hs
        Y[k] = np.exp(-rho * h) * Y[k + 1] + acc
    sup_bound = H_sup / rho
    tail = sup_bound * np.exp(-rho * (T - times))
    sol = BsdeSolution(T, times, Y, np.zeros((n + 1, d)), sup_bound, tail, "deterministic_sigma")
    sol.diagnostics.update(z_energy_weighted=0.0, H_sup=H_sup)
    return sol


# ---------------------------------------------------------------------------
# least-squares Monte Carlo
# ---------------------------------------------------------------------------


def _step_normals(seed: int, k: int, n: int, d: int) -> np.ndarray:
    # one counter-based stream per (seed, step) so the backward pass can regenerate increments
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, k], dtype=np.uint64)))
    return gen.standard_normal((n, d))


def _basis(V: np.ndarray, n_basis: int):
    """Normalized monomials, dropping degrees until the design is well conditioned."""
    mu = float(V.mean())
    sd = float(V.std())
    if sd <= 1e-12 * max(1.0, abs(mu)):
        return np.ones((V.size, 1)), (mu, 1.0, 1)
    x = (V - mu) / sd
    for deg in range(n_basis - 1, 0, -1):
        Phi = np.vander(x, deg + 1, increasing=True)
        Q, R = np.linalg.qr(Phi)
        if np.linalg.cond(R) <= COND_MAX:
            return (Q, R), (mu, sd, deg + 1)
    return np.ones((V.size, 1)), (mu, 1.0, 1)


def _regress(design, y: np.ndarray):
    """Fitted values and coefficients of y (n,) or (n, m) on the design."""
    if isinstance(design, tuple):
        Q, R = design
        qy = Q.T @ y
        return Q @ qy, np.linalg.solve(R, qy)
    m = y.mean(axis=0)
    return np.broadcast_to(m, y.shape).copy(), np.atleast_1d(m)[None, ...]


def _euler_factor(model: SigmaModel, V: np.ndarray, dW1: np.ndarray, dt: float) -> np.ndarray:
    return V + model.kappa * (model.theta - V) * dt + model.eta * dW1


def _H_batch(spec, delta, model: SigmaModel, V, Z):
    if model.diagonal:
        H, _, _ = saddle_H_diagonal(spec, delta, model.sigma_map(V), Z)
        return H
    sig = model.sigma_map(V)
    return np.array([solve_saddle_H(spec, delta, 0.0, sig[i], Z[i]).value for i in range(V.size)])


def solve_bsde_lsmc(
    sigma_model: SigmaModel,
    spec: MarketSpec,
    delta: float,
    rho: float,
    T: float,
    dt: float,
    n_paths: int,
    n_basis: int = 4,
    seed: int = 0,
    n_store: int = 4,
) -> BsdeSolution:
    """Regression Monte Carlo for the truncated BSDE with a Markov factor.

    Backward step, with Phi the basis at V_k:
      Yhat = E[Y_{k+1} | V_k],  Z = E[(Y_{k+1} - Yhat) dW_k | V_k] / dt,
      Y_k = (Yhat + dt (H(t_k, Z) + |Z|^2 / 2)) / (1 + rho dt).
    Subtracting Yhat before the Z regression leaves its conditional mean
    unchanged and removes the dominant noise term.

    ``Y`` and ``Z`` in the result are path means per time; the diagnostics
    hold the standard error of Y_0, a few stored sample paths and the
    regression coefficients.
    """
    if sigma_model.kind != "markov_factor":
        raise ValueError("expected a markov_factor sigma model")
    _check_common(delta, rho, T, dt)
    if n_basis < 2:
        raise ValueError("n_basis must be at least 2")
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    times = uniform_grid(T, dt)
    N = times.size - 1
    d = sigma_model.d
    n = int(n_paths)
    n_store = min(n_store, n)

    # forward pass: checkpoints of the factor every `block` steps
    block = max(1, int(np.ceil(np.sqrt(N))))
    checkpoints = {0: np.full(n, sigma_model.v0)}
    V = checkpoints[0].copy()
    for k in range(N):
        dW = _step_normals(seed, k, n, d) * np.sqrt(times[k + 1] - times[k])
        V = _euler_factor(sigma_model, V, dW[:, 0], times[k + 1] - times[k])
        if (k + 1) % block == 0 and k + 1 < N:
            checkpoints[k + 1] = V.copy()

    Y_next = np.zeros(n)
    Y_mean = np.zeros(N + 1)
    Z_mean = np.zeros((N + 1, d))
    store_Y = np.zeros((N + 1, n_store))
    store_Z = np.zeros((N + 1, n_store, d))
    store_V = np.zeros((N + 1, n_store))
    coefs = [None] * N
    H_sup0 = 0.0
    reduced = 0
    se0 = 0.0

    starts = sorted(checkpoints)
    for b_start in reversed(starts):
        b_end = min(b_start + block, N)
        Vs = [checkpoints[b_start]]
        dWs = []
        for k in range(b_start, b_end):
            h = times[k + 1] - times[k]
            dW = _step_normals(seed, k, n, d) * np.sqrt(h)
            dWs.append(dW)
            Vs.append(_euler_factor(sigma_model, Vs[-1], dW[:, 0], h))
        if b_end == N:
            store_V[N] = Vs[-1][:n_store]
        for j in range(b_end - b_start - 1, -1, -1):
            k = b_start + j
            h = times[k + 1] - times[k]
            Vk, dW = Vs[j], dWs[j]
            design, (mu, sd, used) = _basis(Vk, n_basis)
            reduced += used < n_basis
            Yhat, cy = _regress(design, Y_next)
            Zhat, cz = _regress(design, (Y_next - Yhat)[:, None] * dW / h)
            H = _H_batch(spec, delta, sigma_model, Vk, Zhat)
            H0 = _H_batch(spec, delta, sigma_model, Vk[:1], np.zeros((1, d)))
            H_sup0 = max(H_sup0, float(np.abs(H0).max()))
            Yk = (Yhat + h * (H + 0.5 * np.sum(Zhat**2, axis=1))) / (1.0 + rho * h)
            if k == 0:
                target = (Y_next + h * (H + 0.5 * np.sum(Zhat**2, axis=1))) / (1.0 + rho * h)
                se0 = float(target.std(ddof=1) / np.sqrt(n))
            coefs[k] = {"center": mu, "scale": sd, "Y": np.asarray(cy).ravel().tolist(), "Z": np.asarray(cz).tolist()}
            Y_mean[k] = Yk.mean()
            Z_mean[k] = Zhat.mean(axis=0)
            store_Y[k], store_Z[k], store_V[k] = Yk[:n_store], Zhat[:n_store], Vk[:n_store]
            Y_next = Yk

    K = driver_constant(sigma_model, spec, delta) if sigma_model.inv_bound is not None else 0.0
    sup_bound = (H_sup0 + K) / rho
    tail = sup_bound * np.exp(-rho * (T - times))
    sol = BsdeSolution(T, times, Y_mean, Z_mean, sup_bound, tail, "lsmc")
    sol.diagnostics.update(
        Y0_std_err=se0,
        n_paths=n,
        n_basis=int(n_basis),
        seed=int(seed),
        basis_reductions=int(reduced),
        H0_sup=H_sup0,
        sample_Y=store_Y,
        sample_Z=store_Z,
        sample_V=store_V,
        coefficients=coefs,
    )
    if reduced:
        log.info("basis reduced at %d of %d steps", reduced, N)
    return sol


# ---------------------------------------------------------------------------
# driver estimates
# ---------------------------------------------------------------------------


@dataclass
class DriverEstimatesReport:
    K: float
    n_samples: int
    lipschitz_violations: int
    bound_violations: int
    monotonicity_max_error: float
    max_ratio: float

    @property
    def ok(self) -> bool:
        return self.lipschitz_violations == 0 and self.bound_violations == 0 and self.monotonicity_max_error <= 1e-12

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "n_samples": self.n_samples,
            "lipschitz_violations": self.lipschitz_violations,
            "bound_violations": self.bound_violations,
            "monotonicity_max_error": self.monotonicity_max_error,
            "max_ratio": self.max_ratio,
            "ok": self.ok,
        }


def driver_estimates_check(
    sigma_model: SigmaModel, spec: MarketSpec, delta: float, rho: float, n_samples: int = 10_000, seed: int = 0,
    t_max: float = 10.0, z_scale: float = 2.0,
) -> DriverEstimatesReport:
    """Sample (t, y, z1, z2) and test the quadratic-growth Lipschitz bound,
    |F(t, 0, 0)| <= K, and the exact affinity of F in y.

    z magnitudes are drawn log-uniformly over several decades around
    ``z_scale`` so both the linear and quadratic regimes are exercised.
    """
    rng = np.random.default_rng(seed)
    K = driver_constant(sigma_model, spec, delta)
    d = sigma_model.d
    lip_bad = bound_bad = 0
    mono_err = 0.0
    max_ratio = 0.0
    for _ in range(n_samples):
        t = rng.uniform(0.0, t_max)
        v = None
        if sigma_model.kind == "markov_factor":
            spread = sigma_model.eta / np.sqrt(2 * sigma_model.kappa) if sigma_model.kappa > 0 else sigma_model.eta
            v = rng.normal(sigma_model.theta, 3 * spread + 1e-12)
        sig = sigma_model.sigma_at(t, v)

        def F(y, z):
            H = solve_saddle_H(spec, delta, t, sig, z).value
            return H + 0.5 * z @ z - rho * y

        mags = z_scale * 10.0 ** rng.uniform(-3, 1, size=2)
        z1 = rng.standard_normal(d)
        z1 *= mags[0] / np.linalg.norm(z1)
        z2 = z1 + rng.standard_normal(d) * mags[1] * rng.choice([1e-3, 1e-1, 1.0])
        y = rng.normal(0, 5)
        lhs = abs(F(y, z1) - F(y, z2))
        rhs = K * (1 + np.linalg.norm(z1) + np.linalg.norm(z2)) * np.linalg.norm(z1 - z2)
        if lhs > rhs * (1 + 1e-12) + 1e-14:
            lip_bad += 1
        if rhs > 0:
            max_ratio = max(max_ratio, lhs / rhs)
        if abs(F(0.0, np.zeros(d))) > K:
            bound_bad += 1
        y2 = rng.normal(0, 5)
        lhs_m = (y - y2) * (F(y, z1) - F(y2, z1))
        mono_err = max(mono_err, abs(lhs_m + rho * (y - y2) ** 2) / max(1.0, (y - y2) ** 2))
    return DriverEstimatesReport(float(K), int(n_samples), lip_bad, bound_bad, float(mono_err), float(max_ratio))
