"""Command-line driver: ``rtspec <command> --config run.json [--out dir] [--workers N]``.

Every run reads one JSON document, fills in defaults, rejects unknown keys,
writes its CSV artifacts plus ``manifest.json`` to the output directory and
exits with 0 (success), 1 (bad config or unwritable output), 2 (profile
fails validation) or 3 (solver failure or NaN in the results).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._rk import StepSizeUnderflow
from .cocycle import local_exponents, max_buoyancy, mu_formula, standard_samples
from .evolution import EvolutionError, eigenmode_state, evolve, random_state, wavepacket_run
from .profiles import Grid1D, make_profile, validate_assumptions
from .rayleigh import ContinuationError, continue_in_eps, solve_hydrostatic

log = logging.getLogger("rtspec")

COMMANDS = ("validate", "mu", "eigen", "continue", "evolve", "wavepacket", "crosscheck")

DEFAULTS = {
    "profile": {"family": "P1", "params": [], "g": 1.0},
    "grid": {"L": 20.0, "n": 801},
    "validate": {"tol": 1e-6},
    "cocycle": {"T": 100.0, "T0": 25.0, "tol": 1e-10, "n_x2": 161, "n_angles": 32},
    "rayleigh": {"k": [1, 2, 4, 8, 16, 32], "continue_k": [1], "eps_target": 0.05, "d_eps": 0.01,
                 "dump_eigenfunctions": False},
    "evolution": {"k": 2, "T": 20.0, "dt": None, "init": "eigenmode", "project": True,
                  "filter": 1.0, "window": 0.5},
    "wavepacket": {"x20": None, "xi0": [1.0, 0.0], "b0": [0.0, 1.0, 0.0], "delta": [0.0625, 0.03125],
                   "T": 5.0},
    "crosscheck": {"pde_k": None, "pde_T": 40.0},
    "output_dir": "rtspec-out",
    "seed": 0,
}

# keys whose value may be null in the defaults but numeric when given
_NULLABLE = {"evolution.dt", "wavepacket.x20", "crosscheck.pde_k"}


class ConfigError(ValueError):
    pass


class ValidationFailed(RuntimeError):
    pass


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"config key '{path or '<root>'}' must be a JSON object")
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        full = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{full}'")
        ref = defaults[key]
        if isinstance(ref, dict):
            out[key] = _merge(ref, val, full)
        else:
            out[key] = _check_type(full, ref, val)
    return out


def _check_type(key, ref, val):
    if val is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"config key '{key}' must not be null")
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"config key '{key}' must be true or false")
        return val
    if isinstance(ref, list):
        if not isinstance(val, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                for v in val):
            raise ConfigError(f"config key '{key}' must be a list of numbers")
        return val
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"config key '{key}' must be a string")
        return val
    if ref is None or isinstance(ref, (int, float)):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number")
        if isinstance(ref, int) and not isinstance(ref, bool) and key not in _NULLABLE:
            if float(val) != int(val):
                raise ConfigError(f"config key '{key}' must be an integer")
            return int(val)
        return val
    return val


# (key, predicate, requirement) range checks applied after type checking
_RANGES = [
    ("grid.L", lambda v: v > 0, "positive"),
    ("grid.n", lambda v: v >= 5, "at least 5"),
    ("profile.g", lambda v: v > 0, "positive"),
    ("validate.tol", lambda v: v > 0, "positive"),
    ("cocycle.T", lambda v: v > 0, "positive"),
    ("cocycle.T0", lambda v: v > 0, "positive"),
    ("cocycle.tol", lambda v: 0 < v < 1, "in (0, 1)"),
    ("cocycle.n_x2", lambda v: v >= 1, "at least 1"),
    ("cocycle.n_angles", lambda v: v >= 1, "at least 1"),
    ("rayleigh.k", lambda v: len(v) > 0 and all(x >= 1 and x == int(x) for x in v),
     "a nonempty list of positive integers"),
    ("rayleigh.continue_k", lambda v: all(x >= 1 and x == int(x) for x in v), "a list of positive integers"),
    ("rayleigh.eps_target", lambda v: v >= 0, "nonnegative"),
    ("rayleigh.d_eps", lambda v: v > 0, "positive"),
    ("evolution.k", lambda v: v >= 1, "a positive integer"),
    ("evolution.T", lambda v: v > 0, "positive"),
    ("evolution.dt", lambda v: v is None or v > 0, "positive"),
    ("evolution.filter", lambda v: v >= 0, "nonnegative"),
    ("evolution.window", lambda v: 0.2 <= v <= 1.0, "in [0.2, 1]"),
    ("wavepacket.xi0", lambda v: len(v) == 2 and (v[0] != 0 or v[1] != 0), "a nonzero pair"),
    ("wavepacket.b0", lambda v: len(v) == 3, "a list of 3 numbers"),
    ("wavepacket.delta", lambda v: len(v) > 0 and all(0 < x <= 1 for x in v), "a list of values in (0, 1]"),
    ("wavepacket.T", lambda v: v > 0, "positive"),
    ("crosscheck.pde_k", lambda v: v is None or (v >= 1 and v == int(v)), "a positive integer"),
    ("crosscheck.pde_T", lambda v: v > 0, "positive"),
]


def load_config(text: str) -> dict:
    """Parse and resolve a run configuration (defaults filled in)."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    for key, ok, req in _RANGES:
        sect, name = key.split(".")
        if not ok(cfg[sect][name]):
            raise ConfigError(f"config key '{key}' must be {req}")
    if cfg["evolution"]["init"] not in ("eigenmode", "random"):
        raise ConfigError("config key 'evolution.init' must be 'eigenmode' or 'random'")
    try:
        cfg["_profile"] = make_profile(cfg["profile"]["family"], cfg["profile"]["params"], cfg["profile"]["g"])
    except ValueError as exc:
        raise ConfigError(f"config key 'profile': {exc}") from exc
    try:
        cfg["_grid"] = Grid1D(float(cfg["grid"]["L"]), cfg["grid"]["n"])
    except ValueError as exc:
        raise ConfigError(f"config key 'grid': {exc}") from exc
    return cfg


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return f"{x:.16e}"
    return str(x)


def emit_report(path, header, rows) -> bool:
    """Write a CSV with fixed 17-significant-digit floats.

    Returns True when any value is NaN (written literally as ``nan``).
    """
    has_nan = False
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            for v in row:
                if isinstance(v, (float, np.floating)) and math.isnan(v):
                    has_nan = True
            w.writerow([_fmt(v) for v in row])
    return has_nan


def _pool_map(fn, jobs, workers):
    jobs = list(jobs)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# individual commands ------------------------------------------------------

def _eigen_job(args):
    s, grid, k = args
    sol = solve_hydrostatic(s, grid, k)
    return sol


def _eigen_row(sol):
    lam = sol.lam
    return [sol.k, float(sol.eps), float(sol.c.real), float(sol.c.imag), float(lam.real), float(lam.imag),
            float(sol.residual)]


EIGEN_HEADER = ["k", "eps", "re_c", "im_c", "lambda_re", "lambda_im", "residual"]


def _dump_phi(out: Path, grid, sol):
    d = out / "eigenfunctions"
    d.mkdir(exist_ok=True)
    tag = f"k{sol.k}_eps{sol.eps:.6g}"
    for part, vals in (("re", sol.phi.real), ("im", sol.phi.imag)):
        emit_report(d / f"phi_{tag}_{part}.csv", ["y", "value"], zip(grid.x, vals))


def cmd_validate(cfg, out, workers):
    rep = validate_assumptions(cfg["_profile"], cfg["_grid"], cfg["validate"]["tol"])
    emit_report(out / "validation.csv", ["assumption", "passed", "worst_x2", "worst_value"],
                [[c.name, c.passed, c.worst_x2, c.worst_value] for c in rep.checks])
    if not rep.passed:
        raise ValidationFailed("profile fails: " + ", ".join(c.name for c in rep.checks if not c.passed))
    return False


def cmd_mu(cfg, out, workers):
    s, grid, cc = cfg["_profile"], cfg["_grid"], cfg["cocycle"]
    samples = standard_samples(grid, cc["n_angles"], cc["n_x2"])
    mf = mu_formula(s, grid)
    times = []
    t = float(cc["T0"])
    while t < cc["T"]:
        times.append(t)
        t *= 2.0
    times.append(float(cc["T"]))
    ex = local_exponents(samples, s, times, cc["tol"], workers=workers)
    hist = [(T, float(np.max(row))) for T, row in zip(times, ex)]
    nan = emit_report(out / "mu.csv", ["method", "T", "value"],
                      [["formula", float(cc["T"]), mf], ["numeric", hist[-1][0], hist[-1][1]]])
    nan |= emit_report(out / "mu_history.csv", ["T", "mu_numeric"], hist)
    nan |= emit_report(out / "exponents.csv", ["x2", "xi1", "xi2", "T", "exponent"],
                       [[p.x2, p.xi[0], p.xi[1], times[-1], e] for p, e in zip(samples, ex[-1])])
    return nan


def cmd_eigen(cfg, out, workers):
    s, grid = cfg["_profile"], cfg["_grid"]
    ks = [int(k) for k in cfg["rayleigh"]["k"]]
    sols = _pool_map(_eigen_job, [(s, grid, k) for k in ks], workers)
    if cfg["rayleigh"]["dump_eigenfunctions"]:
        for sol in sols:
            if not sol.stable:
                _dump_phi(out, grid, sol)
    return emit_report(out / "eigen.csv", EIGEN_HEADER, [_eigen_row(sol) for sol in sols])


def _continue_job(args):
    s, grid, k, target, d_eps = args
    return continue_in_eps(s, grid, k, target, d_eps)


def cmd_continue(cfg, out, workers):
    s, grid, rc = cfg["_profile"], cfg["_grid"], cfg["rayleigh"]
    jobs = [(s, grid, int(k), float(rc["eps_target"]), float(rc["d_eps"])) for k in rc["continue_k"]]
    paths = _pool_map(_continue_job, jobs, workers)
    rows = []
    for path in paths:
        for sol in path:
            rows.append(_eigen_row(sol))
            if rc["dump_eigenfunctions"]:
                _dump_phi(out, grid, sol)
    return emit_report(out / "continuation.csv", EIGEN_HEADER, rows)


def _initial_state(cfg, k):
    s, grid = cfg["_profile"], cfg["_grid"]
    if cfg["evolution"]["init"] == "eigenmode":
        sol = solve_hydrostatic(s.without_shear(), grid, k)
        if sol.stable:
            raise ConfigError("config key 'evolution.init': profile has no unstable hydrostatic mode")
        return eigenmode_state(sol, grid)
    return random_state(k, grid, cfg["seed"])


def _run_evolution(cfg, k, T, init=None):
    ev = cfg["evolution"]
    if init is not None:
        cfg = copy.copy(cfg)
        cfg["evolution"] = dict(ev, init=init)
    st0 = _initial_state(cfg, k)
    _, rep = evolve(st0, T, ev["dt"], cfg["_profile"], cfg["_grid"], project_each_step=ev["project"],
                    filter_strength=ev["filter"], window=ev["window"])
    return rep


def cmd_evolve(cfg, out, workers):
    ev = cfg["evolution"]
    rep = _run_evolution(cfg, int(ev["k"]), float(ev["T"]))
    nan = emit_report(out / "norms.csv", ["t", "log_norm", "div_residual"],
                      zip(rep.times, rep.log_norm, rep.div_residual))
    nan |= emit_report(out / "growth.csv", ["k", "init", "rate", "fit_residual", "window"],
                       [[int(ev["k"]), ev["init"], rep.rate, rep.fit_residual, rep.window]])
    return nan


def _packet_job(args):
    s, grid, x20, xi0, b0, delta, T = args
    return wavepacket_run(s, grid, x20, xi0, b0, delta, T)


def cmd_wavepacket(cfg, out, workers):
    s, grid, wp = cfg["_profile"], cfg["_grid"], cfg["wavepacket"]
    x20 = wp["x20"] if wp["x20"] is not None else max_buoyancy(s, grid)[0]
    if len(wp["xi0"]) != 2 or len(wp["b0"]) != 3:
        raise ConfigError("config keys 'wavepacket.xi0' and 'wavepacket.b0' need 2 and 3 entries")
    jobs = [(s, grid, float(x20), tuple(wp["xi0"]), tuple(wp["b0"]), float(d), float(wp["T"]))
            for d in wp["delta"]]
    try:
        reps = _pool_map(_packet_job, jobs, workers)
    except ValueError as exc:
        raise ConfigError(f"config key 'wavepacket': {exc}") from exc
    return emit_report(out / "wavepacket.csv",
                       ["k", "delta", "T", "x20", "predicted", "measured", "ratio", "mismatch"],
                       [[r.k, r.delta, r.T, float(x20), r.predicted, r.measured, r.ratio, r.mismatch]
                        for r in reps])


def cmd_crosscheck(cfg, out, workers):
    s, grid = cfg["_profile"], cfg["_grid"]
    ks = [int(k) for k in cfg["rayleigh"]["k"]]
    k_top = max(ks)
    mf = mu_formula(s, grid)
    sols = _pool_map(_eigen_job, [(s.without_shear(), grid, k) for k in ks], workers)
    top = sols[ks.index(k_top)]
    lam_top = 0.0 if top.stable else top.lam.real
    pde_k = int(cfg["crosscheck"]["pde_k"] or k_top)
    rep = _run_evolution(cfg, pde_k, float(cfg["crosscheck"]["pde_T"]), init="random")
    methods = [("formula", mf), (f"eigen_k{k_top}", lam_top), ("pde_rate", rep.rate)]
    vals = [v for _, v in methods]
    rows = [[name, v] + [abs(v - w) for w in vals] for name, v in methods]
    nan = emit_report(out / "summary.csv", ["method", "value", "gap_formula", "gap_eigen", "gap_pde"], rows)
    nan |= emit_report(out / "eigen.csv", EIGEN_HEADER, [_eigen_row(sol) for sol in sols])
    return nan


HANDLERS = {
    "validate": cmd_validate,
    "mu": cmd_mu,
    "eigen": cmd_eigen,
    "continue": cmd_continue,
    "evolve": cmd_evolve,
    "wavepacket": cmd_wavepacket,
    "crosscheck": cmd_crosscheck,
}


def _manifest(command, cfg, workers):
    resolved = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return {"command": command, "version": __version__, "workers": workers, "config": resolved}


def run(command: str, cfg: dict, workers: int = 1) -> int:
    """Execute one command with a resolved config; returns the exit status."""
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.json", "w") as fh:
            json.dump(_manifest(command, cfg, workers), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        log.error("cannot write to output directory %s: %s", out, exc)
        return 1
    try:
        if command != "validate":
            rep = validate_assumptions(cfg["_profile"], cfg["_grid"], cfg["validate"]["tol"])
            if not rep.passed:
                cmd_validate(cfg, out, workers)
        has_nan = HANDLERS[command](cfg, out, workers)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except ValidationFailed as exc:
        log.error("%s", exc)
        return 2
    except (ContinuationError, StepSizeUnderflow, EvolutionError, RuntimeError) as exc:
        log.error("solver failure: %s", exc)
        return 3
    except OSError as exc:
        log.error("cannot write results: %s", exc)
        return 1
    if has_nan:
        log.error("results contain NaN")
        return 3
    return 0


def _default_workers() -> int:
    env = os.environ.get("RTSPEC_WORKERS")
    if env is None or env == "":
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"RTSPEC_WORKERS must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rtspec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--workers", type=int, help="worker processes (default: $RTSPEC_WORKERS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="rtspec: %(message)s", stream=sys.stderr)
    try:
        with open(args.config) as fh:
            cfg = load_config(fh.read())
        workers = args.workers if args.workers is not None else _default_workers()
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return 1
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    if args.out:
        cfg["output_dir"] = args.out
    return run(args.command, cfg, workers)


if __name__ == "__main__":
    sys.exit(main())
