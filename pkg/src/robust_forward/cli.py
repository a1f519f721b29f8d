"""Command-line entry point.

Configuration is a JSON document with one section per module (market,
preferences, simulate, saddle, bsde, verify). Precedence, lowest first:
built-in defaults, preset, ``--config`` file, command-line flags.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bsde import (
    SigmaModel,
    driver_estimates_check,
    logistic_vol_map,
    solve_bsde_deterministic_sigma,
    solve_bsde_lsmc,
)
from .exceptions import AdmissibilityError, ConditionViolation, ConvergenceError, UnboundedSaddleError
from .market import MarketSpec, StrategyPath, sigma_from_cov, simulate_wealth
from .preferences import LambdaSpec, build_preferences, check_condition_1, check_condition_2
from .saddle import eval_H, solve_saddle_G, solve_saddle_H
from .verify import Deviation, drift_path, make_drift_only_scenario, make_scenario, run_martingale_test

log = logging.getLogger("robust_forward")

EXIT_OK, EXIT_INVALID, EXIT_CONDITION, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

DEFAULTS = {
    "market": None,
    "preferences": {
        "delta": 0.5,
        "x0": 50.0,
        "Y0": 0.0,
        "horizon": 3.0,
        "lambda": {"kind": "zero"},
        "g0": 0.0,
        "rho": 0.1,
        "n_grid": 1001,
        "probe_C": 1.0,
    },
    "simulate": {"dt": 0.01, "n_paths": 2, "seed": 20240601, "n_jobs": 1},
    "saddle": {"tol": 1e-9, "max_iter": 300, "t": 0.0, "z": None, "sigma": None},
    "bsde": {
        "T": 50.0,
        "dt": 0.01,
        "sigma_model": {"kind": "constant", "sigma": [[0.5]]},
        "n_paths": 100000,
        "n_basis": 4,
        "seed": 7,
        "compare_deterministic": True,
    },
    "verify": {
        "deviation": {"kind": "none"},
        "n_paths": 100000,
        "dt": 0.001,
        "confidence": 0.99,
        "seed": 11,
        "n_jobs": 1,
    },
}

_FIG_DRIFT = {"fig1": (0.1, 0.5), "fig2": (0.3, 0.8), "fig3": (-0.1, 0.1)}
_FIG_LOCKED = (
    "market",
    "preferences.delta",
    "preferences.x0",
    "preferences.Y0",
    "preferences.horizon",
    "preferences.lambda",
)


def _fig_preset(name: str) -> dict:
    b_lo, b_hi = _FIG_DRIFT[name]
    return {
        "market": {
            "r": 0.2,
            "d": 1,
            "b_lo": [b_lo],
            "b_hi": [b_hi],
            "cov_vertices": [[[0.01]], [[0.25]]],
            "p_lo": [-0.5],
            "p_hi": [1.5],
        },
        "preferences": {"delta": 0.5, "x0": 50.0, "Y0": 0.0, "horizon": 3.0, "lambda": {"kind": "zero"}},
    }


def _drift_only_preset() -> dict:
    return {
        "market": {
            "r": 0.2,
            "d": 1,
            "b_lo": [0.3],
            "b_hi": [0.8],
            "cov_vertices": [[[0.25]]],
            "p_lo": [-0.5],
            "p_hi": [1.5],
        },
        "preferences": {"delta": 0.5, "x0": 50.0, "horizon": 50.0, "rho": 0.1, "g0": 0.0, "lambda": {"kind": "zero"}},
        "bsde": {"T": 50.0, "dt": 0.01, "sigma_model": {"kind": "constant", "sigma": [[0.5]]}},
    }


@dataclass
class ScenarioPreset:
    name: str
    config: dict
    locked: tuple = ()

    @classmethod
    def get(cls, name: str) -> "ScenarioPreset":
        if name in _FIG_DRIFT:
            return cls(name, _fig_preset(name), _FIG_LOCKED)
        if name == "drift_only_demo":
            return cls(name, _drift_only_preset(), ())
        if name == "custom":
            return cls(name, {}, ())
        raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = ("fig1", "fig2", "fig3", "drift_only_demo", "custom")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _get_path(cfg: dict, path: str):
    cur = cfg
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return cur


def _set_path(cfg: dict, path: str, value) -> None:
    parts = path.split(".")
    cur = cfg
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value


def _parse_set(item: str):
    if "=" not in item:
        raise ValueError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def effective_config(preset_name: str | None, config_path: str | None, overrides: list[tuple[str, object]]) -> dict:
    """Merge defaults, preset, config file and flag overrides.

    Locked preset fields may appear in the file or flags only with their
    preset values.
    """
    preset = ScenarioPreset.get(preset_name or "custom")
    cfg = _deep_merge(DEFAULTS, preset.config)
    user = {}
    if config_path:
        with open(config_path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ValueError("config file must hold a JSON object")
    for key, value in overrides:
        _set_path(user, key, value)
    merged = _deep_merge(cfg, user)
    for key in preset.locked:
        if _get_path(merged, key) != _get_path(cfg, key):
            raise ValueError(f"preset {preset.name} locks '{key}'; remove the override")
    merged["preset"] = preset.name
    if merged.get("market") is None:
        raise ValueError("no market given; use --preset or a config with a 'market' section")
    return merged


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.floating):
        return _jsonable(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _market(cfg) -> MarketSpec:
    return MarketSpec.from_dict(cfg["market"])


def _lambda(cfg) -> LambdaSpec:
    return LambdaSpec.from_dict(cfg["preferences"].get("lambda") or {"kind": "zero"})


def _sigma_model(cfg, d: int) -> SigmaModel:
    sm = cfg["bsde"]["sigma_model"]
    kind = sm.get("kind", "constant")
    if kind == "constant":
        return SigmaModel.constant_sigma(np.asarray(sm["sigma"], dtype=float).reshape(d, d))
    if kind == "markov_factor":
        vmap = logistic_vol_map(sm["s_lo"], sm["s_hi"], d)
        return SigmaModel.markov_factor(sm["kappa"], sm["theta"], sm["eta"], sm.get("v0", sm["theta"]), vmap, d)
    raise ValueError(f"unknown sigma model kind {kind!r}")


# ---------------------------------------------------------------------------
# scenario runs
# ---------------------------------------------------------------------------


def run_scenario(cfg: dict, out_dir) -> dict:
    """Saddle, preferences and two sample wealth paths for a drift_vol scenario."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = _market(cfg)
    pc, sc = cfg["preferences"], cfg["simulate"]
    delta, x0, T = float(pc["delta"]), float(pc["x0"]), float(pc["horizon"])
    sol = solve_saddle_G(spec, delta) if spec.d == 1 else solve_saddle_G(
        spec, delta, tol=cfg["saddle"]["tol"], max_iter=cfg["saddle"]["max_iter"]
    )
    lam = _lambda(cfg)
    prefs = build_preferences("drift_vol", delta, lam, horizon=T, n_grid=int(pc["n_grid"]), Y0=float(pc["Y0"]), G=sol.value)

    sigma = sol.sigma_star
    strat = StrategyPath.constant(T, float(sc["dt"]), sol.p_star, prefs.c_star, sol.b_star, sigma)
    sim = simulate_wealth(spec, x0, strat, 2, int(sc["seed"]), n_jobs=int(sc.get("n_jobs", 1)))
    t = sim.times
    X = sim.X
    U = prefs.U(X, t[None, :])
    Y = np.atleast_1d(prefs.Y(t))

    saddle_doc = {
        "p_star": sol.p_star,
        "b_star": sol.b_star,
        "sigma_star": sigma,
        "Sigma_star": sol.Sigma_star,
        "G": sol.value,
        "residual": sol.residual,
        "method": sol.method,
        "ties": list(sol.ties),
    }
    _write_json(out / "saddle.json", saddle_doc)
    _write_rows(out / "preference.csv", ["t", "Y", "U_1", "U_2"], zip(t, Y, U[0], U[1]))
    amounts = X[:, :, None] * sol.p_star[None, None, :]
    if spec.d == 1:
        header = ["t", "X_1", "X_2", "amount_1", "amount_2"]
        rows = zip(t, X[0], X[1], amounts[0, :, 0], amounts[1, :, 0])
    else:
        header = ["t", "X_1", "X_2"] + [f"amount_{k + 1}_{i + 1}" for k in range(2) for i in range(spec.d)]
        rows = (
            [t[j], X[0, j], X[1, j], *amounts[0, j], *amounts[1, j]] for j in range(t.size)
        )
    _write_rows(out / "paths.csv", header, rows)
    files = {name: _sha256(out / name) for name in ("saddle.json", "preference.csv", "paths.csv")}
    digest = hashlib.sha256("".join(files[k] for k in sorted(files)).encode()).hexdigest()
    summary = {
        "scenario": cfg.get("preset", "custom"),
        "G": sol.value,
        "p_star": sol.p_star,
        "b_star": sol.b_star,
        "sigma_star": sigma,
        "condition": prefs.condition.to_dict(),
        "files": files,
        "digest": digest,
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_pipeline_drift_only(cfg: dict, out_dir) -> dict:
    """BSDE, condition check, g, preferences and the drift-zero check at the saddle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = _market(cfg)
    pc, bc = cfg["preferences"], cfg["bsde"]
    delta, rho = float(pc["delta"]), float(pc["rho"])
    model = _sigma_model(cfg, spec.d)
    T, dt = float(bc["T"]), float(bc["dt"])
    result = {}
    if model.kind == "deterministic":
        sol = solve_bsde_deterministic_sigma(model, spec, delta, rho, T, dt)
    else:
        sol = solve_bsde_lsmc(model, spec, delta, rho, T, dt, int(bc["n_paths"]), int(bc["n_basis"]), int(bc["seed"]))
        if bc.get("compare_deterministic") and model.eta == 0.0:
            frozen = SigmaModel.constant_sigma(model.sigma_at(0.0, model.v0))
            ref = solve_bsde_deterministic_sigma(frozen, spec, delta, rho, T, dt)
            gap = abs(sol.Y0 - ref.Y0)
            result["deterministic_Y0"] = ref.Y0
            result["lsmc_gap"] = gap
            result["lsmc_within_tolerance"] = bool(gap <= max(3 * sol.diagnostics["Y0_std_err"], 1e-3))
    sol.to_csv(out / "bsde.csv")
    sol.to_json(out / "bsde.json")

    lam = _lambda(cfg)
    horizon = min(float(pc.get("horizon", T)), T)
    rep = check_condition_2(float(pc["g0"]), (sol.times, sol.Y), rho, lam, delta, horizon, int(pc["n_grid"]))
    if not rep.holds:
        raise ConditionViolation(
            f"condition on lambda fails at t = {rep.first_violation_time}", condition="condition_2", time=rep.first_violation_time
        )
    prefs = build_preferences(
        "drift_only", delta, lam, horizon=horizon, n_grid=int(pc["n_grid"]), rho=rho, g0=float(pc["g0"]),
        Y_path=(sol.times, sol.Y), Z_path=(sol.times, sol.Z),
    )
    grid = sol.times[sol.times <= horizon + 1e-12]
    prefs.to_csv(out / "preference.csv", grid, x=float(pc["x0"]), C=float(pc.get("probe_C", 1.0)))

    if model.kind == "deterministic":
        sigma = model.sigma_at(0.0)
        scn = make_drift_only_scenario(spec, delta, float(pc["x0"]), horizon, sigma, prefs)
        dr = drift_path(scn, Deviation(), grid)
        drift_max = float(np.max(np.abs(dr)))
        saddle = {"p_star": scn.p_star, "b_star": scn.b_star, "H": scn.value}
    else:
        # along stored sample paths: drift at the saddle evaluated with the regressed Z
        Zs = sol.diagnostics["sample_Z"][:-1]
        Vs = sol.diagnostics["sample_V"][:-1]
        drift_max = 0.0
        for k in range(0, Zs.shape[0], max(1, Zs.shape[0] // 50)):
            for j in range(Zs.shape[1]):
                sig = model.sigma_at(sol.times[k], Vs[k, j])
                s = solve_saddle_H(spec, delta, sol.times[k], sig, Zs[k, j])
                drift_max = max(drift_max, abs(eval_H(spec, delta, sig, Zs[k, j], s.p_star, s.b_star) - s.value))
        saddle = None
    verify_doc = {
        "Y0": sol.Y0,
        "T": T,
        "Z_max_abs": float(np.max(np.abs(sol.Z))),
        "condition": rep.to_dict(),
        "drift_zero_max_abs": drift_max,
        "drift_zero_pass": bool(drift_max <= 1e-10),
        "saddle_at_z0": saddle,
        **result,
    }
    _write_json(out / "verify.json", verify_doc)
    return verify_doc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_saddle_g(cfg, args):
    spec = _market(cfg)
    sc = cfg["saddle"]
    sol = solve_saddle_G(spec, cfg["preferences"]["delta"]) if spec.d == 1 else solve_saddle_G(
        spec, cfg["preferences"]["delta"], tol=sc["tol"], max_iter=sc["max_iter"]
    )
    doc = sol.to_dict()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "saddle.json", doc)
    return doc


def _cmd_saddle_h(cfg, args):
    spec = _market(cfg)
    sc = cfg["saddle"]
    d = spec.d
    sigma = sc.get("sigma")
    if sigma is None:
        if len(spec.cov_vertices) != 1:
            raise ValueError("saddle-h needs saddle.sigma when the covariance set is not a single matrix")
        sigma = sigma_from_cov(spec.cov_vertices[0])
    sigma = np.asarray(sigma, dtype=float).reshape(d, d)
    z = np.zeros(d) if sc.get("z") is None else np.asarray(sc["z"], dtype=float).reshape(d)
    sol = solve_saddle_H(spec, cfg["preferences"]["delta"], float(sc.get("t", 0.0)), sigma, z)
    doc = sol.to_dict()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "saddle_h.json", doc)
    return doc


def _cmd_ode(cfg, args):
    spec = _market(cfg)
    pc = cfg["preferences"]
    delta = float(pc["delta"])
    G = solve_saddle_G(spec, delta).value
    lam = _lambda(cfg)
    rep = check_condition_1(float(pc["Y0"]), G, lam, delta, float(pc["horizon"]), int(pc["n_grid"]))
    doc = {"G": G, "condition": rep.to_dict()}
    if not rep.holds:
        raise ConditionViolation(
            f"condition on lambda fails at t = {rep.first_violation_time}", condition="condition_1", time=rep.first_violation_time
        )
    prefs = build_preferences("drift_vol", delta, lam, horizon=float(pc["horizon"]), n_grid=int(pc["n_grid"]), Y0=float(pc["Y0"]), G=G)
    grid = np.linspace(0.0, float(pc["horizon"]), int(pc["n_grid"]))
    doc["Y_end"] = float(prefs.Y(grid[-1]))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        prefs.to_csv(Path(args.out) / "preference.csv", grid, x=float(pc["x0"]), C=float(pc.get("probe_C", 1.0)))
    return doc


def _cmd_bsde(cfg, args):
    spec = _market(cfg)
    pc, bc = cfg["preferences"], cfg["bsde"]
    model = _sigma_model(cfg, spec.d)
    delta, rho = float(pc["delta"]), float(pc["rho"])
    if model.kind == "deterministic":
        sol = solve_bsde_deterministic_sigma(model, spec, delta, rho, float(bc["T"]), float(bc["dt"]))
    else:
        sol = solve_bsde_lsmc(
            model, spec, delta, rho, float(bc["T"]), float(bc["dt"]), int(bc["n_paths"]), int(bc["n_basis"]), int(bc["seed"])
        )
    doc = sol.summary()
    if bc.get("check_driver"):
        doc["driver_estimates"] = driver_estimates_check(model, spec, delta, rho, int(bc["check_driver"])).to_dict()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        sol.to_csv(Path(args.out) / "bsde.csv")
        _write_json(Path(args.out) / "bsde.json", doc)
    return doc


def _cmd_simulate(cfg, args):
    spec = _market(cfg)
    pc, sc = cfg["preferences"], cfg["simulate"]
    delta = float(pc["delta"])
    scn = make_scenario(spec, delta, float(pc["x0"]), float(pc["horizon"]), _lambda(cfg), float(pc["Y0"]), cfg["preset"])
    strat = StrategyPath.constant(scn.horizon, float(sc["dt"]), scn.p_star, scn.prefs.c_star, scn.b_star, scn.sigma_star)
    sim = simulate_wealth(spec, scn.x0, strat, int(sc["n_paths"]), int(sc["seed"]), n_jobs=int(sc.get("n_jobs", 1)))
    doc = {
        "n_paths": sim.n_paths,
        "seed": sim.seed,
        "mean_X_T": float(np.mean(sim.X[:, -1])),
        "min_X": float(sim.X.min()),
        "p_star": scn.p_star,
        "b_star": scn.b_star,
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        sim.to_csv(Path(args.out) / "paths.csv")
    return doc


def _cmd_verify(cfg, args):
    spec = _market(cfg)
    pc, vc = cfg["preferences"], cfg["verify"]
    scn = make_scenario(spec, float(pc["delta"]), float(pc["x0"]), float(pc["horizon"]), _lambda(cfg), float(pc["Y0"]), cfg["preset"])
    rep = run_martingale_test(
        scn,
        Deviation.from_dict(vc.get("deviation")),
        n_paths=int(vc["n_paths"]),
        dt=float(vc["dt"]),
        seed=int(vc["seed"]),
        confidence=float(vc["confidence"]),
        n_jobs=int(vc.get("n_jobs", 1)),
    )
    doc = rep.to_dict()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "verify.json", doc)
        rep.paths_to_csv(Path(args.out) / "R_paths.csv")
    return doc


def _cmd_reproduce(cfg_unused, args):
    out = Path(args.out) if args.out else None
    docs = {}
    for name in ("fig1", "fig2", "fig3"):
        overrides = [("simulate.seed", args.seed)] if args.seed is not None else []
        cfg = effective_config(name, None, overrides)
        if out is None:
            with tempfile.TemporaryDirectory() as tmp:
                docs[name] = run_scenario(cfg, tmp)
        else:
            docs[name] = run_scenario(cfg, out / name)
    return docs


def _cmd_pipeline(cfg, args):
    if not args.out:
        raise ValueError("pipeline-drift-only needs --out")
    return run_pipeline_drift_only(cfg, args.out)


COMMANDS = {
    "saddle-g": (_cmd_saddle_g, "saddle point of G (drift and volatility uncertainty)"),
    "saddle-h": (_cmd_saddle_h, "saddle point of H (drift uncertainty) at given t, z"),
    "ode": (_cmd_ode, "closed-form Y and the condition on lambda"),
    "bsde": (_cmd_bsde, "truncated infinite-horizon BSDE"),
    "simulate": (_cmd_simulate, "wealth paths under the saddle strategy"),
    "verify": (_cmd_verify, "martingale principle test on the criterion process"),
    "reproduce-figures": (_cmd_reproduce, "saddle, preference and path files for fig1-fig3"),
    "pipeline-drift-only": (_cmd_pipeline, "bsde, g, preferences and verification for drift uncertainty"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-forward", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--preset", choices=PRESET_NAMES, default=None)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--json", action="store_true", help="print the result as JSON on stdout")
        p.add_argument("--dump-effective-config", action="store_true", help="print the merged config and exit")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. verify.seed=3")
        p.add_argument("--delta", type=float)
        p.add_argument("--horizon", type=float)
        p.add_argument("--x0", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--n-paths", type=int)
        p.add_argument("--dt", type=float)
        if name == "saddle-h":
            p.add_argument("--z", help="comma-separated z vector")
            p.add_argument("--t", type=float)
        if name in ("bsde", "pipeline-drift-only"):
            p.add_argument("--T", type=float, dest="T")
            p.add_argument("--rho", type=float)
    return parser


_SECTION = {
    "simulate": "simulate",
    "verify": "verify",
    "bsde": "bsde",
    "pipeline-drift-only": "bsde",
    "reproduce-figures": "simulate",
}


def _flag_overrides(args) -> list:
    out = [_parse_set(s) for s in args.set]
    sec = _SECTION.get(args.command, "simulate")
    for flag, key in (("delta", "preferences.delta"), ("horizon", "preferences.horizon"), ("x0", "preferences.x0")):
        if getattr(args, flag, None) is not None:
            out.append((key, getattr(args, flag)))
    for flag, key in (("seed", "seed"), ("n_paths", "n_paths"), ("dt", "dt")):
        if getattr(args, flag, None) is not None:
            out.append((f"{sec}.{key}", getattr(args, flag)))
    if getattr(args, "T", None) is not None:
        out.append(("bsde.T", args.T))
    if getattr(args, "rho", None) is not None:
        out.append(("preferences.rho", args.rho))
    if getattr(args, "z", None) is not None:
        out.append(("saddle.z", [float(v) for v in args.z.split(",")]))
    if getattr(args, "t", None) is not None:
        out.append(("saddle.t", args.t))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "reproduce-figures":
            if args.dump_effective_config:
                print(dumps({n: effective_config(n, None, []) for n in ("fig1", "fig2", "fig3")}))
                return EXIT_OK
            cfg = None
        else:
            cfg = effective_config(args.preset, args.config, _flag_overrides(args))
            if args.dump_effective_config:
                print(dumps(cfg))
                return EXIT_OK
        doc = COMMANDS[args.command][0](cfg, args)
    except ConditionViolation as exc:
        print(dumps({"error": "condition", "condition": exc.condition, "first_violation_time": exc.time, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONDITION
    except (ConvergenceError, UnboundedSaddleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, AdmissibilityError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.json or not args.out:
        print(dumps(doc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
