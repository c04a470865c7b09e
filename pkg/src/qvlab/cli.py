"""Command-line runner: one JSON config in, data files plus metadata.json out.

Exit status: 0 on success, 1 when a check ran but failed, 2 on configuration
errors (the offending field path is printed), 3 on numerical failures (the
module error name is printed).  ``QVLAB_OUTPUT_DIR`` and ``QVLAB_THREADS`` are
the only environment overrides.
"""
from __future__ import annotations

import argparse
import contextlib
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import sympy as sp

from . import __version__
from . import config as C
from .charts import coords, euclidean, symbolic_potential
from .errors import ConfigError, QVLabError
from .expansion import cond_exp_quadratic_covariant, cond_exp_quadratic_raw, identity_report_csv
from .feynman_kac import (FKProblem, compare_to_pde, complex_fk_estimate, fk_estimate,
                          gaussian_terminal_solution)
from .geometry import eval_metric
from .hamilton_jacobi import (SymbolicWave, integrate_classical_limit,
                              schwarzschild_circular_velocity, velocity_from_wavefunction)
from .io import dump_json, emit_plot_data, fmt, sidecar, write_paths_csv
from .pde import (ComplexField, evolve_backward_nonrel, stationary_eigs_nonrel, write_field,
                  write_slice_csv)
from .process import (EnsembleConfig, ProcessParams, constant_drift, estimate_structure_relation,
                      predicted_split_rates, predicted_structure, simulate_ensemble,
                      split_real_imag_covariances)

KINDS = ("simulate", "evolve", "fk-compare", "identity-check", "classical-limit", "phi-sweep")


@contextlib.contextmanager
def _section(path):
    """Re-raise bad values met while building objects from a config block as ConfigError."""
    try:
        yield
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, QVLabError):
            raise
        raise ConfigError(f"{path}: {exc}", path) from exc


def _gaussian(x):
    return np.exp(-0.5 * np.sum(np.asarray(x, dtype=complex) ** 2, axis=-1))


def _base_meta(cfg, chash):
    return {"kind": cfg["kind"], "name": cfg["name"], "config_hash": chash, "version": __version__}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def run_simulate(cfg, out: Path, chash: str):
    sec = cfg.get("simulate", {})
    with _section("/metric"):
        metric = C.metric_from(cfg["metric"])
    n = metric.dim
    with _section("/process"):
        params = C.process_from(cfg["process"], n)
    with _section("/ensemble"):
        ens_cfg = C.ensemble_from(cfg["ensemble"], n)
    drift = constant_drift([C.as_complex(v) for v in sec["drift"]]) if "drift" in sec else None
    ens = simulate_ensemble(drift, params, ens_cfg, metric, antithetic=sec.get("antithetic", False))
    write_paths_csv(ens, out / "paths.csv", max_paths=sec.get("store_paths", 10))

    est = estimate_structure_relation(ens, sec.get("n_buckets", 1))
    pred = predicted_structure(ens, metric)
    rows = []
    for b in range(est.rate.shape[0]):
        for mu in range(n):
            for nu in range(n):
                r, p = est.rate[b, mu, nu], pred[mu, nu]
                rows.append({"bucket": b, "t_start": est.bucket_edges[b], "t_end": est.bucket_edges[b + 1],
                             "mu": mu, "nu": nu, "rate_re": r.real, "rate_im": r.imag,
                             "se": est.se[b, mu, nu], "predicted_re": p.real, "predicted_im": p.imag})
    emit_plot_data(rows, "structure", out)
    z = np.abs(est.rate - pred[None]) / np.where(est.se > 0, est.se, np.inf)
    report = {"max_abs_z": float(np.max(z)), "n_valid": est.n_paths}
    if metric.flat:
        s = split_real_imag_covariances(ens, metric)
        report["split"] = {"xx": s.xx, "yy": s.yy, "xy": s.xy, "xx_se": s.xx_se, "yy_se": s.yy_se,
                           "xy_se": s.xy_se, "predicted": predicted_split_rates(params)}
    dump_json(report, out / "structure.json")
    return sidecar(ens, chash, {"kind": "simulate", "name": cfg["name"]}), 0


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def _probes(cfg, sec, dim):
    pts = sec.get("probes") or cfg.get("probes") or [[0.0] * dim]
    return np.asarray(pts, dtype=float)


def run_evolve(cfg, out: Path, chash: str):
    sec = cfg["evolve"]
    with _section("/metric"):
        metric = C.metric_from(cfg["metric"])
    with _section("/process"):
        params = C.process_from(cfg["process"], metric.dim)
    with _section("/grid"):
        grid = C.grid_from(cfg["grid"])
    if grid.ndim != metric.dim:
        raise ConfigError("/grid/extents: grid dimension must match the metric", "/grid/extents")
    U = C.potential_from(sec.get("potential"), params.m)
    curvature = sec.get("curvature", "R/6")
    problem = sec["problem"]
    meta = _base_meta(cfg, chash)
    meta["alpha"] = params.alpha

    if problem == "eigen":
        pairs = stationary_eigs_nonrel(params, metric, None, U, grid, sec.get("k_max", 4), curvature)
        rows = [{"k": k, "E_re": p.energy.real, "E_im": p.energy.imag, "residual": p.residual}
                for k, p in enumerate(pairs)]
        emit_plot_data(rows, "eigen", out)
        for k, p in enumerate(pairs[:2]):
            write_field(p.mode, str(out / f"mode{k}"))
        meta["energies"] = [p.energy for p in pairs]
        return meta, 0

    T = sec.get("horizon", 1.0)
    if problem == "plane-wave":
        k = sec.get("wavenumber", 1.0)
        terminal = ComplexField.from_function(grid, lambda x: np.exp(1j * k * x[..., 0]), T)
    elif problem == "norm-check":
        terminal = ComplexField.from_function(grid, lambda x: _gaussian(np.asarray(x) - 1.0), T)
    else:
        terminal = ComplexField.from_function(grid, _gaussian, T)
    series = evolve_backward_nonrel(terminal, params, metric, None, U, (0.0, T), curvature)
    final = series.final
    write_field(final, str(out / "field"))
    write_slice_csv(final, out / "slice.csv")
    emit_plot_data([{"step": i, "time": t, "norm": v}
                    for i, (t, v) in enumerate(zip(T - grid.dt * np.arange(len(series.norms)), series.norms))],
                   "norms", out)
    meta["max_norm_step_change"] = series.max_norm_step_change()
    probes = _probes(cfg, sec, grid.ndim)
    values = np.array([final.at(p) for p in probes])
    meta["probes"] = probes
    meta["values"] = values
    if problem == "plane-wave":
        k = sec.get("wavenumber", 1.0)
        exact = np.exp(1j * k * probes[:, 0] - params.alpha * k ** 2 * T / (2 * params.m))
        meta["max_error"] = float(np.max(np.abs(values - exact)))
    elif problem == "gaussian-terminal" and U is None and metric.flat and grid.ndim == 1:
        exact = gaussian_terminal_solution(probes[:, 0], params.alpha, params.m, T)
        meta["closed_form"] = exact
        meta["max_error"] = float(np.max(np.abs(values - exact)))
    return meta, 0


# ---------------------------------------------------------------------------
# fk-compare
# ---------------------------------------------------------------------------

def _fk_problem(alpha, m, horizon, probes, potential=None, label="", max_horizon=1.0):
    probes = np.asarray(probes, dtype=float)
    return FKProblem(_gaussian, alpha, m, (0.0, horizon), tuple(map(tuple, probes)), potential,
                     None, probes.shape[1], label, max_horizon)


def _fk_run(problem, params, ens_cfg):
    if params.phi == 0:
        return fk_estimate(problem, ens_cfg)
    return complex_fk_estimate(problem, params, ens_cfg)


def run_fk_compare(cfg, out: Path, chash: str):
    sec = cfg["fk"]
    probes = np.asarray(cfg["probes"], dtype=float)
    dim = probes.shape[1]
    with _section("/process"):
        params = C.process_from(cfg["process"], dim)
    T = sec["horizon"]
    with _section("/ensemble"):
        ens_cfg = C.ensemble_from(cfg["ensemble"], dim, horizon=T)
    with _section("/grid"):
        grid = C.grid_from(cfg["grid"])
    if grid.ndim != dim:
        raise ConfigError("/grid/extents: grid dimension must match the probes", "/grid/extents")
    U = C.potential_from(sec.get("potential"), params.m)
    problem = _fk_problem(params.alpha, params.m, T, probes, U, cfg["name"], sec.get("max_horizon", 1.0))
    est = _fk_run(problem, params, ens_cfg)

    terminal = ComplexField.from_function(grid, _gaussian, T)
    ref = evolve_backward_nonrel(terminal, params, euclidean(dim), None, problem.pde_potential(),
                                 (0.0, T)).final
    report = compare_to_pde(est, ref)
    emit_plot_data(report.rows, "fk-compare", out)
    result = {"estimate": est.to_json(), "comparison": report.to_json()}
    if U is None and dim == 1:
        exact = gaussian_terminal_solution(probes[:, 0], params.alpha, params.m, T)
        result["closed_form"] = exact
        result["pde_vs_closed_form"] = float(np.max(np.abs(np.array([ref.at(p) for p in probes]) - exact)))
    dump_json(result, out / "report.json")
    meta = _base_meta(cfg, chash)
    meta.update({"seed": ens_cfg.master_seed, "attrition": float(np.max(est.attrition)),
                 "n_paths": ens_cfg.n_paths, "estimate_hash": est.config_hash,
                 "max_abs_z": report.max_abs_z, "coverage": report.coverage, "passed": report.passed})
    meta.update(est.diagnostics)
    status = 1 if report.passed is False and not np.any(est.inconclusive) else 0
    return meta, status


# ---------------------------------------------------------------------------
# identity-check
# ---------------------------------------------------------------------------

def _wave_field(metric, params):
    x = coords(metric.dim)
    expr = sp.exp(sum(sp.Rational(k + 1, 5) * sp.sin(xi + k) for k, xi in enumerate(x)))
    return velocity_from_wavefunction(SymbolicWave(expr, x), params, metric)


def run_identity(cfg, out: Path, chash: str):
    sec = cfg["identity"]
    tol = sec.get("tolerance", 1e-8)
    rows, plot_rows = [], []
    for i, chart in enumerate(sec["charts"]):
        with _section(f"/identity/charts/{i}/metric"):
            metric = C.metric_from(chart["metric"])
        for alpha in sec["alphas"]:
            params = ProcessParams.from_alpha(C.as_complex(alpha), dim=metric.dim)
            if sec.get("field", "wave") == "wave":
                field = _wave_field(metric, params)
            else:
                field = (np.zeros(metric.dim, dtype=complex), np.zeros((metric.dim,) * 2, dtype=complex))
            for j, p in enumerate(chart["probes"]):
                if len(p) != metric.dim:
                    raise ConfigError(f"/identity/charts/{i}/probes/{j}: expected {metric.dim} coordinates",
                                      f"/identity/charts/{i}/probes/{j}")
                ev = eval_metric(metric, p, "analytic", with_dR=False)
                raw = cond_exp_quadratic_raw(field, ev, params)
                cov = cond_exp_quadratic_covariant(field, ev, params)
                diff = max(abs(raw[0] - cov[0]), abs(raw[1] - cov[1]))
                rows.append({"metric": metric.name, "point": p, "alpha": params.alpha,
                             "raw": raw, "covariant": cov})
                plot_rows.append({"metric": metric.name, "probe": " ".join(fmt(c) for c in p),
                                  "diff": f"{diff:.3e}"})
    emit_plot_data(plot_rows, "identity", out)
    (out / "identity_detail.csv").write_text(identity_report_csv(rows))
    worst = max(float(r["diff"]) for r in plot_rows)
    meta = _base_meta(cfg, chash)
    meta.update({"max_diff": worst, "tolerance": tol, "passed": worst <= tol, "n_checks": len(rows)})
    return meta, 0 if worst <= tol else 1


# ---------------------------------------------------------------------------
# classical-limit
# ---------------------------------------------------------------------------

def run_classical(cfg, out: Path, chash: str):
    sec = cfg["classical"]
    with _section("/metric"):
        metric = C.metric_from(cfg["metric"])
    with _section("/process"):
        params = C.process_from({**cfg["process"], "mode": "relativistic"}, metric.dim)
    n_steps = sec["n_steps"]
    lam_m = params.lam * params.m
    meta = _base_meta(cfg, chash)
    A = None

    if "circular_orbit_radius" in sec:
        if metric.name != "schwarzschild":
            raise ConfigError("/classical/circular_orbit_radius: needs the schwarzschild metric",
                              "/classical/circular_orbit_radius")
        M = cfg["metric"].get("params", {}).get("mass", 1.0)
        r = sec["circular_orbit_radius"]
        z0 = np.array([0.0, r, math.pi / 2, 0.0])
        zdot0 = schwarzschild_circular_velocity(M, r, lam_m)
        omega = math.sqrt(M / r ** 3)
        if "orbits" in sec:
            dtau = sec["orbits"] * 2 * math.pi / omega / zdot0[0] / n_steps
        elif "dtau" in sec:
            dtau = sec["dtau"]
        else:
            raise ConfigError("/classical/dtau: required without /classical/orbits", "/classical/dtau")
    else:
        if "dtau" not in sec:
            raise ConfigError("/classical/dtau: required", "/classical/dtau")
        dtau = sec["dtau"]
        z0 = np.asarray(sec.get("z0", [0.0] * metric.dim), dtype=float)
        zdot0 = np.asarray(sec.get("zdot0", [lam_m] + [0.0] * (metric.dim - 1)), dtype=float)
        E = sec.get("field_strength", 0.0)
        if E != 0:
            if metric.dim != 2:
                raise ConfigError("/classical/field_strength: uniform field runs use a 1+1 chart",
                                  "/classical/field_strength")
            x = coords(2)
            A = symbolic_potential(x, [0, E * x[0]])

    traj = integrate_classical_limit(params, metric, z0, zdot0, dtau, n_steps, A)
    every = sec.get("store_every", max(1, n_steps // 1000))
    rows = []
    for i in range(0, len(traj.tau), every):
        for c in range(metric.dim):
            rows.append({"tau": traj.tau[i], "component": c, "z": traj.z[i, c], "zdot": traj.zdot[i, c]})
    emit_plot_data(rows, "trajectory", out)
    meta.update({"dtau": dtau, "n_steps": n_steps, "constraint_drift": traj.max_constraint_drift})
    if "circular_orbit_radius" in sec:
        measured = traj.z[-1, 3] / traj.z[-1, 0]
        meta.update({"omega": measured, "omega_expected": omega,
                     "omega_rel_error": abs(measured - omega) / omega,
                     "radius_drift": float(np.max(np.abs(traj.z[:, 1] - z0[1])))})
    elif A is not None and np.allclose(z0, 0) and np.allclose(zdot0, [lam_m, 0.0]):
        a = params.q * params.lam * E
        if a != 0:
            tau = traj.tau
            err_t = np.max(np.abs(traj.z[:, 0] - lam_m * np.sinh(a * tau) / a))
            err_x = np.max(np.abs(traj.z[:, 1] + lam_m * (np.cosh(a * tau) - 1) / a))
            meta["hyperbolic_error"] = float(max(err_t, err_x))
    return meta, 0


# ---------------------------------------------------------------------------
# phi-sweep
# ---------------------------------------------------------------------------

def run_phi_sweep(cfg, out: Path, chash: str):
    sec = cfg["sweep"]
    probes = np.asarray(cfg.get("probes", [[0.0]]), dtype=float)
    dim = probes.shape[1]
    rows, attrition = [], []
    for i, phi in enumerate(sec["phis"]):
        with _section(f"/sweep/phis/{i}"):
            params = C.process_from({**cfg["process"], "phi": phi}, dim)
        with _section("/ensemble"):
            ens_cfg = C.ensemble_from(cfg["ensemble"], dim)
        ens = simulate_ensemble(None, params, ens_cfg, stream=i)
        attrition.append(ens.attrition)
        s = split_real_imag_covariances(ens)
        pxx, pyy, pxy = predicted_split_rates(params)
        max_z = float("nan")
        if sec.get("fk_paths", 0) > 0:
            T, dt = sec.get("fk_horizon", 0.1), sec.get("fk_dt", 1e-2)
            problem = _fk_problem(params.alpha, params.m, T, probes, label=cfg["name"])
            fk_cfg = EnsembleConfig(sec["fk_paths"], dt, T, ens_cfg.master_seed, tuple(probes[0]))
            est = _fk_run(problem, params, fk_cfg)
            exact = gaussian_terminal_solution(probes[:, 0], params.alpha, params.m, T)
            usable = ~est.inconclusive
            if np.any(usable):
                max_z = float(np.max(np.abs(est.values - exact)[usable] / est.std_errors[usable]))
        rows.append({"phi": phi, "xx": s.xx[0, 0], "yy": s.yy[0, 0], "xy": s.xy[0, 0],
                     "xx_pred": pxx, "yy_pred": pyy, "xy_pred": pxy, "xx_se": s.xx_se[0, 0],
                     "yy_se": s.yy_se[0, 0], "xy_se": s.xy_se[0, 0], "max_abs_z": max_z})
    emit_plot_data(rows, "phi-sweep", out)
    meta = _base_meta(cfg, chash)
    meta.update({"seed": cfg["ensemble"]["master_seed"], "attrition": max(attrition),
                 "attrition_per_phi": attrition})
    return meta, 0


RUNNERS = {
    "simulate": run_simulate,
    "evolve": run_evolve,
    "fk-compare": run_fk_compare,
    "identity-check": run_identity,
    "classical-limit": run_classical,
    "phi-sweep": run_phi_sweep,
}


def run(path, expected_kind=None, out_dir=None) -> int:
    """Load, validate and execute one config; returns the exit status."""
    try:
        cfg = C.load(path)
        if expected_kind is not None and cfg["kind"] != expected_kind:
            raise ConfigError(f"/kind: config is {cfg['kind']!r}, subcommand is {expected_kind!r}", "/kind")
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error at /: {exc}", file=sys.stderr)
        return 2

    out = Path(out_dir) if out_dir is not None else C.output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    chash = C.config_hash(cfg)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            meta, status = RUNNERS[cfg["kind"]](cfg, out, chash)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except QVLabError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        dump_json({**_base_meta(cfg, chash), "error": exc.code, "message": str(exc)},
                  out / "metadata.json")
        return 3
    meta.setdefault("config_hash", chash)
    meta.setdefault("version", __version__)
    meta.setdefault("seed", cfg.get("ensemble", {}).get("master_seed"))
    meta.setdefault("attrition", 0.0)
    msgs = sorted({str(w.message) for w in caught})
    if msgs:
        meta["warnings"] = msgs
    dump_json(meta, out / "metadata.json")
    print(f"{cfg['kind']} {cfg['name']}: {'ok' if status == 0 else 'check failed'} -> {out}")
    return status


def validate_only(path) -> int:
    try:
        cfg = C.load(path)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error at /: {exc}", file=sys.stderr)
        return 2
    print(f"{path}: valid {cfg['kind']} config, hash {C.config_hash(cfg)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qvlab", description="Run qvlab experiments from JSON configs.")
    ap.add_argument("--version", action="version", version=f"qvlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a config of any kind")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides config and environment)")
    p = sub.add_parser("validate-config", help="schema-check a config without running it")
    p.add_argument("config")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a config of kind {kind}")
        p.add_argument("config")
        p.add_argument("--out", help="output directory (overrides config and environment)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate-config":
        return validate_only(args.config)
    kind = None if args.command == "run" else args.command
    return run(args.config, kind, args.out)


if __name__ == "__main__":
    sys.exit(main())
