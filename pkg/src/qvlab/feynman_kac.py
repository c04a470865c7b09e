"""Monte Carlo Feynman-Kac estimates, real and complexified.

For d_t Psi = -[(alpha / 2m) Laplacian + v . grad - U] Psi with Psi(., T) = u,

    Psi(x, t) = E[ exp(-int_t^T U(X_s) ds) u(X_T) | X_t = x ],   d[X, X] = (alpha / m) dt.

The complex estimator runs the same functional over complexified paths with
alpha = rho exp(i phi); its agreement with the PDE is an empirical check only.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as _rng
from .errors import ConfigMismatch, ModeError, VarianceBlowup
from .geometry import ChartedMetric
from .process import EnsembleConfig, ProcessParams, iterate_block

N_BATCHES = 64
BLOWUP_FRACTION = 0.25
MIN_PATHS = 100


@dataclass
class FKProblem:
    terminal: Callable  # u(x), vectorized over (..., n)
    alpha: complex = 1.0
    m: float = 1.0
    horizon: tuple = (0.0, 1.0)
    probes: tuple = ((0.0,),)
    potential: Optional[Callable] = None  # U(x, s)
    drift: Optional[Callable] = None  # v(x, s)
    dim: int = 1
    label: str = ""
    max_horizon: float = 1.0

    @property
    def duration(self) -> float:
        return float(self.horizon[1] - self.horizon[0])

    def probe_array(self):
        return np.asarray(self.probes, dtype=complex).reshape(-1, self.dim)

    def descriptor(self) -> dict:
        a = complex(self.alpha)
        return {"label": self.label, "alpha": [a.real, a.imag], "m": self.m,
                "horizon": list(map(float, self.horizon)), "dim": self.dim,
                "probes": [[float(np.real(c)) for c in p] for p in self.probe_array()]}

    def config_hash(self) -> str:
        blob = json.dumps(self.descriptor(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def pde_potential(self) -> Optional[Callable]:
        """Potential in the ``alpha d_t Psi = -K Psi`` convention: U_pde = -alpha U."""
        if self.potential is None:
            return None
        a = complex(self.alpha)
        return lambda x, t: -a * np.asarray(self.potential(x, t))


@dataclass
class FKEstimate:
    probes: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    n_paths: int
    attrition: np.ndarray
    config_hash: str
    inconclusive: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "n_paths": self.n_paths,
            "probes": [[float(np.real(c)) for c in p] for p in self.probes],
            "value_re": self.values.real.tolist(),
            "value_im": self.values.imag.tolist(),
            "se": self.std_errors.tolist(),
            "attrition": self.attrition.tolist(),
            "inconclusive": self.inconclusive.tolist(),
            "diagnostics": self.diagnostics,
        }


def _batch_se(samples):
    """Batch-means standard error of a complex mean; real and imaginary parts combined."""
    n = samples.shape[0]
    if n < 2:
        return float("inf")
    b = min(N_BATCHES, n)
    means = np.array([c.mean() for c in np.array_split(samples, b)])
    var = means.real.var(ddof=1) + means.imag.var(ddof=1)
    return float(math.sqrt(var / b))


def _functional_samples(problem: FKProblem, params: ProcessParams, config: EnsembleConfig,
                        metric, stream, threads):
    t0 = float(problem.horizon[0])
    dt = config.dt
    N = config.n_steps
    pot = problem.potential
    drift = None
    if problem.drift is not None:
        drift = lambda z, k_t: problem.drift(z, t0 + k_t)

    def run(item):
        block, lanes = item
        integral = np.zeros(_rng.BLOCK, dtype=complex)
        alive = None
        z_last = None
        for k, _, z, alive in iterate_block(drift, params, config, metric, None, block, stream):
            if pot is not None:
                w = 0.5 if k in (0, N) else 1.0
                with np.errstate(all="ignore"):
                    integral = integral + w * dt * np.asarray(pot(z, t0 + k * dt), dtype=complex)
            z_last = z
        with np.errstate(all="ignore"):
            vals = np.exp(-integral) * np.asarray(problem.terminal(z_last), dtype=complex)
        ok = alive & np.isfinite(vals)
        return vals[:lanes], ok[:lanes]

    results = _rng.map_blocks(run, _rng.block_layout(config.n_paths), threads)
    vals = np.concatenate([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    return vals, ok


def _estimate(problem, params, config, metric, stream, threads, on_blowup):
    probes = problem.probe_array()
    values, ses, attr, flags = [], [], [], []
    for z0 in probes:
        cfg = EnsembleConfig(config.n_paths, config.dt, problem.duration, config.master_seed, tuple(z0))
        vals, ok = _functional_samples(problem, params, cfg, metric, stream, threads)
        good = vals[ok]
        mean = complex(good.mean()) if good.size else complex("nan")
        se = _batch_se(good)
        values.append(mean)
        ses.append(se)
        attr.append(1.0 - ok.mean())
        flags.append(bool(not np.isfinite(se) or se > BLOWUP_FRACTION * abs(mean)))
    est = FKEstimate(probes, np.array(values), np.array(ses), config.n_paths, np.array(attr),
                     problem.config_hash(), np.array(flags))
    if np.any(est.inconclusive):
        est.diagnostics["warning"] = "VarianceBlowup"
        est.diagnostics["inconclusive_probes"] = int(est.inconclusive.sum())
        if on_blowup == "raise":
            raise VarianceBlowup(f"standard error above {BLOWUP_FRACTION:.0%} of |value| "
                                 f"at {int(est.inconclusive.sum())} probes")
    return est


def _check_config(problem: FKProblem, config: EnsembleConfig):
    steps = problem.duration / config.dt
    if problem.duration <= 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ValueError("horizon must be a positive whole number of steps")


def fk_estimate(problem: FKProblem, config: EnsembleConfig, metric: ChartedMetric = None,
                stream: int = 0, threads=None) -> FKEstimate:
    """Classical estimator; requires real alpha > 0."""
    a = complex(problem.alpha)
    if a.imag != 0 or a.real <= 0:
        raise ModeError("classical Feynman-Kac needs real alpha > 0; use complex_fk_estimate")
    _check_config(problem, config)
    params = ProcessParams.gauge_fixed(a.real, 0.0, m=problem.m, dim=problem.dim)
    return _estimate(problem, params, config, metric, stream, threads, on_blowup="flag")


def complex_fk_estimate(problem: FKProblem, params: ProcessParams, config: EnsembleConfig,
                        metric: ChartedMetric = None, stream: int = 0, threads=None,
                        on_blowup: str = "flag") -> FKEstimate:
    """Same functional over complexified paths.

    Probes whose standard error exceeds 25% of |value| are marked inconclusive;
    ``on_blowup="raise"`` turns that into VarianceBlowup.
    """
    if problem.duration > problem.max_horizon:
        raise ModeError(f"horizon {problem.duration:g} exceeds the complex-mode bound {problem.max_horizon:g}")
    if abs(params.alpha - complex(problem.alpha)) > 1e-12 * max(1.0, abs(params.alpha)):
        raise ConfigMismatch("process alpha differs from the problem's alpha")
    if abs(params.m - problem.m) > 1e-15:
        raise ConfigMismatch("process mass differs from the problem's mass")
    _check_config(problem, config)
    return _estimate(problem, params, config, metric, stream, threads, on_blowup)


def gaussian_terminal_solution(x, alpha, m, duration):
    """Exact solution for u = exp(-x^2 / 2), no drift or potential (any complex alpha)."""
    s = complex(alpha) * duration / m
    x = np.asarray(x, dtype=complex)
    return (1 + s) ** -0.5 * np.exp(-x ** 2 / (2 * (1 + s)))


@dataclass
class ComparisonReport:
    z_scores: np.ndarray
    max_abs_z: float
    coverage: float
    underpowered: bool
    passed: Optional[bool]
    rows: list

    def to_json(self) -> dict:
        return {"max_abs_z": self.max_abs_z, "coverage": self.coverage,
                "underpowered": self.underpowered, "passed": self.passed, "rows": self.rows}


def compare_to_pde(estimate: FKEstimate, reference, reference_hash: str = None,
                   coverage_target: float = 0.95, z_limit: float = 3.0) -> ComparisonReport:
    """Per-probe z-scores of MC estimates against a PDE field or array of reference values.

    ``reference`` is a ComplexField (sampled at the probes) or a sequence of values.
    """
    if reference_hash is not None and reference_hash != estimate.config_hash:
        raise ConfigMismatch(f"estimate hash {estimate.config_hash} != reference hash {reference_hash}")
    if hasattr(reference, "at"):
        ref = np.array([reference.at(np.real(p)) for p in estimate.probes])
    else:
        ref = np.asarray(reference, dtype=complex).reshape(-1)
    if ref.shape[0] != estimate.values.shape[0]:
        raise ConfigMismatch("reference and estimate have different probe counts")
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(estimate.values - ref) / estimate.std_errors
    usable = ~estimate.inconclusive & np.isfinite(z)
    underpowered = estimate.n_paths < MIN_PATHS or not np.any(usable)
    coverage = float(np.mean(z[usable] < z_limit)) if np.any(usable) else 0.0
    max_z = float(np.max(z[usable])) if np.any(usable) else float("nan")
    passed = None if underpowered else bool(coverage >= coverage_target)
    rows = []
    for p, e, r, s, zz, flag in zip(estimate.probes, estimate.values, ref, estimate.std_errors,
                                    z, estimate.inconclusive):
        rows.append({"x": float(np.real(p[0])), "psi_pde_re": float(r.real), "psi_pde_im": float(r.imag),
                     "psi_mc_re": float(e.real), "psi_mc_im": float(e.imag), "se": float(s),
                     "z": float(zz), "inconclusive": bool(flag)})
    return ComparisonReport(z, max_z, coverage, underpowered, passed, rows)
