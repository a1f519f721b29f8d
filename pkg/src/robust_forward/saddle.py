"""Saddle points of the CRRA market value functions G (drift and volatility
uncertainty) and H (drift uncertainty only, stochastic volatility).

G(p; b, S) = 0.5 delta (delta - 1) p'Sp + delta p'(b - r) + delta r
H(t, z; p; b) = 0.5 delta (delta - 1) |sigma'p|^2 + delta p'(b - r)
                + delta p' sigma z + delta r

Both are concave in ``p`` and affine in the uncertain parameters, so the
inner minimization is attained at box corners / covariance vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .exceptions import ConvergenceError, UnboundedSaddleError
from .market import MarketSpec, sigma_from_cov

ARG_TOL = 1e-6
VALUE_TOL = 1e-8
FEAS_TOL = 1e-9
TIE_TOL = 1e-9


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return delta


def _vec(x, d: int, name: str) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (d,):
        raise ValueError(f"{name} has shape {x.shape}, expected ({d},)")
    return x


# ---------------------------------------------------------------------------
# G: drift and volatility uncertainty
# ---------------------------------------------------------------------------


@dataclass
class SaddleSolutionG:
    p_star: np.ndarray
    b_star: np.ndarray
    Sigma_star: np.ndarray
    value: float
    iterations: int = 0
    residual: float = 0.0
    method: str = "closed_form"
    ties: tuple = ()

    @property
    def sigma_star(self) -> np.ndarray:
        # PSD square root; in 1-D the non-negative root of the two admissible signs
        return sigma_from_cov(self.Sigma_star)

    def to_dict(self) -> dict:
        return {
            "p_star": [float(x) for x in self.p_star],
            "b_star": [float(x) for x in self.b_star],
            "Sigma_star": [[float(x) for x in row] for row in self.Sigma_star],
            "sigma_star": [[float(x) for x in row] for row in self.sigma_star],
            "value": float(self.value),
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "method": self.method,
            "ties": [int(i) for i in self.ties],
        }


def eval_G(spec: MarketSpec, delta: float, p, b, Sigma) -> float:
    delta = _check_delta(delta)
    d = spec.d
    p = _vec(p, d, "p")
    b = _vec(b, d, "b")
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape != (d, d):
        raise ValueError(f"Sigma has shape {Sigma.shape}, expected {(d, d)}")
    return float(0.5 * delta * (delta - 1.0) * p @ Sigma @ p + delta * p @ (b - spec.r) + delta * spec.r)


class InnerMin(NamedTuple):
    b: np.ndarray
    Sigma: np.ndarray
    value: float
    ties: tuple
    vertex: int


def inner_min_G(spec: MarketSpec, delta: float, p) -> InnerMin:
    """Worst-case (b, Sigma) for a fixed strategy ``p``.

    G decreases in p'Sp (negative coefficient), so the minimizing vertex is
    the one with the *largest* quadratic form. Coordinates with p_i = 0 leave
    b_i undetermined; the interval midpoint is returned and the index flagged.
    """
    delta = _check_delta(delta)
    p = _vec(p, spec.d, "p")
    b = np.where(p > 0, spec.b_lo, np.where(p < 0, spec.b_hi, 0.5 * (spec.b_lo + spec.b_hi)))
    ties = tuple(int(i) for i in np.flatnonzero(p == 0))
    quads = [float(p @ v @ p) for v in spec.cov_vertices]
    k = int(np.argmax(quads))  # first vertex on ties
    Sigma = spec.cov_vertices[k]
    return InnerMin(b, np.array(Sigma), eval_G(spec, delta, p, b, Sigma), ties, k)


def solve_saddle_G_1d(spec: MarketSpec, delta: float) -> SaddleSolutionG:
    """Explicit saddle point for a single risky asset."""
    delta = _check_delta(delta)
    if spec.d != 1:
        raise ValueError("closed-form saddle requires d = 1")
    r = spec.r
    p_lo, p_hi = float(spec.p_lo[0]), float(spec.p_hi[0])
    b_lo, b_hi = float(spec.b_lo[0]), float(spec.b_hi[0])
    s_hi = max(float(v[0, 0]) for v in spec.cov_vertices)
    scale = (1.0 - delta) * s_hi

    p = 0.0
    if r <= b_lo:
        p += min(p_hi, (b_lo - r) / scale)
    if r >= b_hi:
        p += max(p_lo, (b_hi - r) / scale)
    if r <= b_lo:
        b = b_lo
    elif r >= b_hi:
        b = b_hi
    else:
        b = r
    merton = (b - r) / scale
    dist = max(p_lo - merton, 0.0, merton - p_hi)
    G = (
        0.5 * delta * (delta - 1.0) * s_hi * dist**2
        + 0.5 * delta / (1.0 - delta) * (b - r) ** 2 / s_hi
        + delta * r
    )
    ties = (0,) if p == 0.0 else ()
    return SaddleSolutionG(
        p_star=np.array([p]),
        b_star=np.array([b]),
        Sigma_star=np.array([[s_hi]]),
        value=float(G),
        method="closed_form",
        ties=ties,
    )


def _phi(spec: MarketSpec, delta: float, p: np.ndarray) -> float:
    """Inner minimum of G over (b, Sigma) in closed form."""
    quad = max(float(p @ v @ p) for v in spec.cov_vertices)
    lin = np.minimum(p * spec.excess_lo, p * spec.excess_hi).sum()
    return -0.5 * delta * (1.0 - delta) * quad + delta * lin + delta * spec.r


def _supergradient(spec: MarketSpec, delta: float, p: np.ndarray) -> np.ndarray:
    quads = [float(p @ v @ p) for v in spec.cov_vertices]
    S = spec.cov_vertices[int(np.argmax(quads))]
    # at p_i = 0 the superdifferential is delta [b_lo - r, b_hi - r]; take its least-norm element
    e = np.where(p > 0, spec.excess_lo, np.where(p < 0, spec.excess_hi, np.clip(0.0, spec.excess_lo, spec.excess_hi)))
    return -delta * (1.0 - delta) * S @ p + delta * e


def _box_qp_max(Q: np.ndarray, c: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """max_p -0.5 p'Qp + c'p over a box, via bounded least squares."""
    d = c.shape[0]
    fixed = lo >= hi
    if np.any(fixed):
        # pinned coordinates drop out; solve the reduced problem over the free ones
        p = np.where(fixed, lo, 0.0)
        free = ~fixed
        if np.any(free):
            c_red = c[free] - Q[np.ix_(free, fixed)] @ p[fixed]
            p[free], _ = _box_qp_max(Q[np.ix_(free, free)], c_red, lo[free], hi[free])
        return p, float(-0.5 * p @ Q @ p + c @ p)
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        ridge = 1e-13 * max(1.0, float(np.trace(Q)))
        L = np.linalg.cholesky(Q + ridge * np.eye(d))
    target = np.linalg.solve(L, c)
    if np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
        p = np.linalg.solve(L.T, target)
    else:
        res = lsq_linear(L.T, target, bounds=(lo, hi), method="bvls", tol=1e-15)
        p = np.clip(res.x, lo, hi)
    return p, float(-0.5 * p @ Q @ p + c @ p)


def _dual_value(spec: MarketSpec, delta: float, b: np.ndarray, w: np.ndarray):
    """Upper bound max_p G(p; b, sum_k w_k S_k) and its gradient in (b, w)."""
    S = sum(wk * v for wk, v in zip(w, spec.cov_vertices))
    a = delta * (1.0 - delta)
    p, val = _box_qp_max(a * S, delta * (b - spec.r), spec.p_lo, spec.p_hi)
    grad_b = delta * p
    grad_w = np.array([-0.5 * a * p @ v @ p for v in spec.cov_vertices])
    return val + delta * spec.r, grad_b, grad_w, p


def _solve_dual(spec: MarketSpec, delta: float, p_hint: np.ndarray):
    d, K = spec.d, len(spec.cov_vertices)
    inner = inner_min_G(spec, delta, p_hint)
    b0 = np.where(p_hint == 0, np.clip(spec.r, spec.b_lo, spec.b_hi), inner.b)
    w0 = np.zeros(K)
    if np.any(p_hint != 0):
        w0[inner.vertex] = 1.0
    else:
        w0[int(np.argmax([np.trace(v) for v in spec.cov_vertices]))] = 1.0
    if K == 1 and np.all(spec.b_lo == spec.b_hi):
        val, *_ = _dual_value(spec, delta, spec.b_lo.copy(), w0)
        return spec.b_lo.copy(), w0, val

    def fun(y):
        val, gb, gw, _ = _dual_value(spec, delta, y[:d], y[d:])
        return val, np.concatenate([gb, gw])

    cons = [{"type": "eq", "fun": lambda y: y[d:].sum() - 1.0, "jac": lambda y: np.concatenate([np.zeros(d), np.ones(K)])}]
    bounds = list(zip(spec.b_lo, spec.b_hi)) + [(0.0, 1.0)] * K
    res = minimize(
        fun,
        np.concatenate([b0, w0]),
        jac=True,
        method="SLSQP",
        bounds=bounds,
        constraints=cons,
        options={"ftol": 1e-16, "maxiter": 500},
    )
    best = [(fun(np.concatenate([b0, w0]))[0], b0, w0)]
    b = np.clip(res.x[:d], spec.b_lo, spec.b_hi)
    w = np.clip(res.x[d:], 0.0, None)
    w = w / w.sum() if w.sum() > 0 else w0
    best.append((_dual_value(spec, delta, b, w)[0], b, w))
    val, b, w = min(best, key=lambda x: x[0])
    return b, w, val


def _polish_primal(spec: MarketSpec, delta: float, p0: np.ndarray) -> np.ndarray:
    """Epigraph QCQP solved by SQP from the ascent iterate."""
    d = spec.d
    a = delta * (1.0 - delta)
    el, eh = spec.excess_lo, spec.excess_hi
    eye = np.eye(d)
    cons = []
    for v in spec.cov_vertices:
        cons.append(
            {
                "type": "ineq",
                "fun": lambda x, v=v: -0.5 * a * x[:d] @ v @ x[:d] + delta * x[d : 2 * d].sum() + delta * spec.r - x[-1],
                "jac": lambda x, v=v: np.concatenate([-a * v @ x[:d], delta * np.ones(d), [-1.0]]),
            }
        )
    for e in (el, eh):
        cons.append(
            {
                "type": "ineq",
                "fun": lambda x, e=e: x[:d] * e - x[d : 2 * d],
                "jac": lambda x, e=e: np.hstack([eye * e, -eye, np.zeros((d, 1))]),
            }
        )
    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None) for lo, hi in zip(spec.p_lo, spec.p_hi)]
    bounds += [(None, None)] * (d + 1)
    u0 = np.minimum(p0 * el, p0 * eh)
    x0 = np.concatenate([p0, u0, [_phi(spec, delta, p0)]])
    res = minimize(
        lambda x: (-x[-1], np.concatenate([np.zeros(2 * d), [-1.0]])),
        x0,
        jac=True,
        method="SLSQP",
        bounds=bounds,
        constraints=cons,
        options={"ftol": 1e-16, "maxiter": 500},
    )
    return spec.clip_pi(res.x[:d])


def solve_saddle_G_nd(
    spec: MarketSpec,
    delta: float,
    tol: float = 1e-9,
    max_iter: int = 300,
    target_value: float | None = None,
) -> SaddleSolutionG:
    """Numeric max-min of G over the investment box.

    The concave outer objective (inner minimum in closed form) is ascended by
    projected supergradient steps, normalized with a 1/sqrt(k) schedule or a
    Polyak step when ``target_value`` is supplied. The iterate is then
    polished by SQP on the epigraph formulation. A feasible dual point
    (b, convex weights on the covariance vertices) gives an upper bound; the
    gap is returned as ``residual``.
    """
    delta = _check_delta(delta)
    d = spec.d
    unbounded = np.isinf(spec.p_lo) | np.isinf(spec.p_hi)

    # start from the Merton ratio of the best-conditioned vertex, clipped
    pd_vertex = max(spec.cov_vertices, key=lambda v: np.linalg.eigvalsh(v)[0])
    mid = 0.5 * (spec.excess_lo + spec.excess_hi)
    p = spec.clip_pi(np.linalg.solve(pd_vertex, mid) / (1.0 - delta))
    best_p, best_val = p.copy(), _phi(spec, delta, p)
    step0 = 0.5 * max(1.0, float(np.linalg.norm(p)))
    limit = 1e8 * max(1.0, float(np.linalg.norm(p)))

    it = 0
    for it in range(1, max_iter + 1):
        g = _supergradient(spec, delta, p)
        gn = float(np.linalg.norm(g))
        if gn < 1e-15:
            break
        if target_value is not None:
            step = max(target_value - _phi(spec, delta, p), 0.0) / gn**2
            p = spec.clip_pi(p + step * g)
        else:
            p = spec.clip_pi(p + step0 / np.sqrt(it) * g / gn)
        if np.any(unbounded) and np.linalg.norm(p) > limit:
            raise UnboundedSaddleError("unbounded saddle problem")
        val = _phi(spec, delta, p)
        if val > best_val:
            best_p, best_val = p.copy(), val

    try:
        polished = _polish_primal(spec, delta, best_p)
        if _phi(spec, delta, polished) >= best_val:
            best_p, best_val = polished, _phi(spec, delta, polished)
    except (ValueError, np.linalg.LinAlgError):
        pass

    best_p = np.where(np.abs(best_p) <= TIE_TOL * 1e-3, 0.0, best_p)
    best_val = _phi(spec, delta, best_p)
    b_dual, w_dual, upper = _solve_dual(spec, delta, best_p)
    residual = max(upper - best_val, 0.0)
    Sigma = sum(wk * v for wk, v in zip(w_dual, spec.cov_vertices))
    sol = SaddleSolutionG(
        p_star=best_p,
        b_star=b_dual,
        Sigma_star=np.asarray(Sigma),
        value=float(best_val),
        iterations=it,
        residual=float(residual),
        method="supergradient+sqp",
        ties=tuple(int(i) for i in np.flatnonzero(np.abs(best_p) <= TIE_TOL)),
    )
    if residual > tol:
        raise ConvergenceError(f"duality gap {residual:.3e} exceeds tol {tol:.1e}", residual=residual, partial=sol)
    return sol


def solve_saddle_G(spec: MarketSpec, delta: float, **kw) -> SaddleSolutionG:
    """Closed form when available, numeric minimax otherwise."""
    if spec.d == 1:
        return solve_saddle_G_1d(spec, delta)
    return solve_saddle_G_nd(spec, delta, **kw)


# ---------------------------------------------------------------------------
# projection onto sigma' Pi
# ---------------------------------------------------------------------------


def _check_sigma(sigma, d: int) -> np.ndarray:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (d, d):
        raise ValueError(f"sigma has shape {sigma.shape}, expected {(d, d)}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("sigma must be finite")
    if np.linalg.cond(sigma) > 1e12:
        raise ValueError("sigma is singular")
    return sigma


def _is_diagonal(m: np.ndarray) -> bool:
    return not np.any(m - np.diag(np.diag(m)))


def project_onto_sigma_pi(sigma, p_lo, p_hi, v, tol: float = 1e-12, max_iter: int = 200_000):
    """argmin over p in the box of |sigma' p - v|^2, with the image sigma' p.

    Projected gradient with step 1/lambda_max(sigma sigma'); stops when the
    gradient-mapping norm falls below ``tol``.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    d = v.shape[0]
    sigma = _check_sigma(sigma, d)
    lo = np.broadcast_to(np.asarray(p_lo, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(p_hi, dtype=float), (d,))
    if _is_diagonal(sigma):
        p = np.clip(v / np.diag(sigma), lo, hi)
        return p, sigma.T @ p
    M = sigma @ sigma.T
    L = float(np.linalg.eigvalsh(M)[-1])
    p = np.clip(np.linalg.solve(sigma.T, v), lo, hi)
    for _ in range(max_iter):
        grad = sigma @ (sigma.T @ p - v)
        p_new = np.clip(p - grad / L, lo, hi)
        gm = L * float(np.linalg.norm(p_new - p))
        p = p_new
        if gm <= tol:
            break
    else:
        raise ConvergenceError("projection onto sigma' Pi did not converge", residual=gm)
    return p, sigma.T @ p


# ---------------------------------------------------------------------------
# H: drift uncertainty only
# ---------------------------------------------------------------------------


@dataclass
class SaddleSolutionH:
    t: float
    z: np.ndarray
    p_star: np.ndarray
    b_star: np.ndarray
    value: float
    tie_report: tuple = ()
    iterations: int = 0
    sign_consistent: bool = True
    method: str = "closed_form"
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "z": [float(x) for x in self.z],
            "p_star": [float(x) for x in self.p_star],
            "b_star": [float(x) for x in self.b_star],
            "value": float(self.value),
            "tie_report": [int(i) for i in self.tie_report],
            "iterations": int(self.iterations),
            "sign_consistent": bool(self.sign_consistent),
            "method": self.method,
        }


def eval_H(spec: MarketSpec, delta: float, sigma, z, p, b) -> float:
    delta = _check_delta(delta)
    d = spec.d
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    p, b, z = _vec(p, d, "p"), _vec(b, d, "b"), _vec(z, d, "z")
    q = sigma.T @ p
    return float(0.5 * delta * (delta - 1.0) * q @ q + delta * p @ (b - spec.r) + delta * q @ z + delta * spec.r)


def saddle_H_diagonal(spec: MarketSpec, delta: float, sig_diag, z):
    """Vectorized saddle of H for diagonal volatility.

    ``sig_diag`` and ``z`` have shape (n, d). With diagonal sigma the problem
    separates by coordinate: the worst drift pushes the effective excess
    return ``b - r + sigma_i z_i`` toward zero and the strategy is its
    clipped Merton ratio. Returns (value, p, b), shapes (n,), (n, d), (n, d).
    """
    s = np.asarray(sig_diag, dtype=float)
    z = np.asarray(z, dtype=float)
    tilt = s * z
    b = np.clip(spec.r - tilt, spec.b_lo, spec.b_hi)
    e = b - spec.r + tilt
    p = np.clip(e / ((1.0 - delta) * s * s), spec.p_lo, spec.p_hi)
    value = delta * spec.r + np.sum(delta * p * e - 0.5 * delta * (1.0 - delta) * (s * p) ** 2, axis=-1)
    return value, p, b


def _psi(spec, delta, sigma, sigma_inv, z, b, tol):
    """max over p of H(t, z; p; b) in distance form, with its maximizer."""
    v = sigma_inv @ (b - spec.r) + z
    target = v / (1.0 - delta)
    p, img = project_onto_sigma_pi(sigma, spec.p_lo, spec.p_hi, target, tol=tol)
    dist2 = float((img - target) @ (img - target))
    val = -0.5 * delta * (1.0 - delta) * dist2 + 0.5 * delta / (1.0 - delta) * float(v @ v) + delta * spec.r
    return val, p


def solve_saddle_H(
    spec: MarketSpec,
    delta: float,
    t: float,
    sigma_t,
    z,
    tol: float = 1e-12,
    max_iter: int = 200_000,
    method: str = "auto",
) -> SaddleSolutionH:
    """Saddle point of H(t, z; ., .) for an invertible volatility matrix.

    ``method="auto"`` uses the separable closed form when ``sigma_t`` is
    diagonal; ``"iterative"`` always minimizes the convex envelope
    psi(b) = max_p H over the drift box by projected gradient, using
    delta * p*(b) as its gradient.
    """
    delta = _check_delta(delta)
    d = spec.d
    sigma = _check_sigma(sigma_t, d)
    z = _vec(z, d, "z")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if method not in ("auto", "iterative", "closed_form"):
        raise ValueError(f"unknown method {method!r}")

    if method != "iterative" and _is_diagonal(sigma):
        val, p, b = saddle_H_diagonal(spec, delta, np.diag(sigma)[None, :], z[None, :])
        p, b, it, how = p[0], b[0], 0, "closed_form"
        value = float(val[0])
    elif method == "closed_form":
        raise ValueError("closed form requires diagonal sigma")
    else:
        sigma_inv = np.linalg.inv(sigma)
        L = delta / (1.0 - delta) * float(np.linalg.norm(sigma_inv, 2)) ** 2
        b = np.clip(spec.r - sigma @ z, spec.b_lo, spec.b_hi)
        inner_tol = min(1e-13, tol)
        for it in range(1, max_iter + 1):
            _, p = _psi(spec, delta, sigma, sigma_inv, z, b, inner_tol)
            b_new = np.clip(b - delta * p / L, spec.b_lo, spec.b_hi)
            step = L * float(np.linalg.norm(b_new - b))
            b = b_new
            if step <= tol:
                break
        else:
            raise ConvergenceError("H saddle did not converge", residual=step)
        value, p = _psi(spec, delta, sigma, sigma_inv, z, b, inner_tol)
        how = "projected_gradient"

    ties = tuple(int(i) for i in np.flatnonzero(np.abs(p) <= TIE_TOL))
    consistent = True
    for i in range(d):
        if p[i] > TIE_TOL and abs(b[i] - spec.b_lo[i]) > FEAS_TOL:
            consistent = False
        if p[i] < -TIE_TOL and abs(b[i] - spec.b_hi[i]) > FEAS_TOL:
            consistent = False
    return SaddleSolutionH(
        t=float(t),
        z=z,
        p_star=p,
        b_star=b,
        value=float(value),
        tie_report=ties,
        iterations=it,
        sign_consistent=consistent,
        method=how,
    )


def H_lipschitz_constant(spec: MarketSpec, delta: float, sigma_inv_norm: float) -> float:
    """K with |F(t,y,z1) - F(t,y,z2)| <= K (1 + |z1| + |z2|) |z1 - z2| and |F(t,0,0)| <= K.

    F = H + |z|^2 / 2 - rho y. The z-gradient of H is delta sigma' p*, and
    |sigma' p*| <= 2 |v| / (1 - delta) with |v| <= s B + |z| (0 lies in
    sigma' Pi), where s bounds |sigma^-1| and B bounds |b - r|.
    """
    delta = _check_delta(delta)
    B = float(np.linalg.norm(np.maximum(np.abs(spec.excess_lo), np.abs(spec.excess_hi))))
    sB = sigma_inv_norm * B
    c = 2.0 * delta / (1.0 - delta)
    lip = max(c * sB, c + 1.0)
    bound0 = delta * spec.r + 0.5 * delta / (1.0 - delta) * sB**2
    return max(lip, bound0)
