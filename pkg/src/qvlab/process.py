"""Euler-Maruyama simulation of the complexified process and ensemble statistics.

The process is dZ = w(Z) dtau + dM with d[Z^a, Z^b] = alpha lambda g_E^{ab}(Z) dtau.
With beta = 0 every increment is sqrt(alpha lambda) sigma(Z) xi sqrt(dtau) for one
real standard normal vector xi, where sigma sigma^T = g_E (no conjugation).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as _rng
from .calculus import DiscretePath
from .charts import euclidean
from .errors import DriftBlowup, PivotFailure, Unsupported
from .geometry import ChartedMetric, ObserverField, complex_cholesky


@dataclass(frozen=True)
class ProcessParams:
    rho: float
    phi: float
    lam: float
    m: float = 1.0
    q: float = 0.0
    dim: int = 1
    mode: str = "nonrelativistic"
    beta: float = 0.0

    def __post_init__(self):
        if self.beta != 0:
            raise Unsupported("only beta = 0 processes are supported")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not (-math.pi < self.phi <= math.pi):
            raise ValueError("phi must lie in (-pi, pi]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.mode not in ("relativistic", "nonrelativistic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "relativistic" and self.m > 0 and abs(self.lam * self.m - 1) > 1e-12:
            raise ValueError("massive relativistic runs use the gauge lambda * m = 1")

    @classmethod
    def gauge_fixed(cls, rho, phi, m=1.0, q=0.0, dim=1, mode="nonrelativistic"):
        """lambda = 1/m for massive particles, 1 for massless ones."""
        return cls(rho=rho, phi=phi, lam=1.0 / m if m > 0 else 1.0, m=m, q=q, dim=dim, mode=mode)

    @classmethod
    def from_alpha(cls, alpha, **kw):
        alpha = complex(alpha)
        return cls.gauge_fixed(abs(alpha), math.atan2(alpha.imag, alpha.real) if alpha != 0 else 0.0, **kw)

    @property
    def alpha(self) -> complex:
        return self.rho * complex(math.cos(self.phi), math.sin(self.phi))

    @property
    def noise_scale(self) -> complex:
        """Principal sqrt(alpha lambda), built from the polar form to fix the branch."""
        r = math.sqrt(self.rho * self.lam)
        return r * complex(math.cos(self.phi / 2), math.sin(self.phi / 2))


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int
    dt: float
    horizon: float
    master_seed: int
    z0: tuple = (0.0,)

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ValueError("horizon must be a whole number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def start(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.z0, dtype=complex))


@dataclass
class PathEnsemble:
    params: ProcessParams
    config: EnsembleConfig
    times: np.ndarray
    positions: np.ndarray  # (n_paths, n_steps + 1, n); rejected paths hold NaN after rejection
    rejected: np.ndarray
    seeds: np.ndarray  # (n_paths, 3): stream, block, lane
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.positions.shape[0]

    @property
    def valid(self):
        return ~self.rejected

    @property
    def attrition(self) -> float:
        return float(np.mean(self.rejected))

    def path(self, p: int) -> DiscretePath:
        return DiscretePath(self.times, self.positions[p], self.config.dt)

    def increments(self):
        return np.diff(self.positions[self.valid], axis=1)


def as_drift(drift) -> Callable:
    """Normalize a drift spec to ``f(z, t) -> (batch, n)``."""
    if drift is None:
        return lambda z, t: np.zeros_like(z)
    if hasattr(drift, "drift"):
        return drift.drift
    if callable(drift):
        return drift
    w = np.asarray(drift, dtype=complex)
    return lambda z, t: np.broadcast_to(w, z.shape)


def constant_drift(w):
    return as_drift(np.asarray(w, dtype=complex))


def _factor_masked(ge):
    """Batched complex Cholesky; failing lanes get NaN factors instead of raising."""
    try:
        return complex_cholesky(ge), np.ones(ge.shape[:-2], dtype=bool)
    except PivotFailure:
        pass
    ok = np.ones(ge.shape[:-2], dtype=bool)
    L = np.full(ge.shape, np.nan, dtype=complex)
    for idx in np.ndindex(ge.shape[:-2]):
        try:
            L[idx] = complex_cholesky(ge[idx])
        except PivotFailure:
            ok[idx] = False
    return L, ok


class _Sampler:
    """sigma(Z) for a chart; constant charts are factorized once."""

    def __init__(self, metric: ChartedMetric, observer: Optional[ObserverField], z0):
        self.metric = metric
        self.observer = observer if observer is not None else metric.observer
        self.constant = None
        if metric.flat:
            L, ok = _factor_masked(self.metric_e(np.asarray(z0, dtype=complex)[None, :]))
            if not ok[0]:
                raise PivotFailure("Euclideanized metric not factorizable on flat chart")
            self.constant = L[0]

    def metric_e(self, z):
        g_inv = np.linalg.inv(self.metric.components(z))
        if self.metric.lorentzian and self.observer is not None:
            u = self.observer(z)
            g_inv = g_inv + 2.0 * np.einsum("...a,...b->...ab", u, u)
        return g_inv

    def __call__(self, z):
        if self.constant is not None:
            return np.broadcast_to(self.constant, z.shape[:-1] + self.constant.shape), None
        with np.errstate(all="ignore"):
            ge = self.metric_e(z)
        finite = np.all(np.isfinite(ge), axis=(-2, -1))
        ge = np.where(finite[..., None, None], ge, np.eye(z.shape[-1]))
        L, ok = _factor_masked(ge)
        return L, ok & finite


def step(z, drift, params: ProcessParams, dt, gaussian, metric: ChartedMetric = None,
         observer: ObserverField = None, t=0.0):
    """One Euler-Maruyama step: Z + w(Z) dt + sqrt(alpha lambda) sigma(Z) xi sqrt(dt)."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    metric = metric if metric is not None else euclidean(z.shape[0])
    sampler = _Sampler(metric, observer, z)
    sigma, ok = sampler(z[None, :])
    if ok is not None and not ok[0]:
        raise PivotFailure(f"g_E not factorizable at {z}")
    w = np.asarray(as_drift(drift)(z[None, :], t), dtype=complex)[0]
    if not np.all(np.isfinite(w)):
        raise DriftBlowup(f"non-finite drift at {z}")
    xi = np.asarray(gaussian, dtype=float)
    return z + w * dt + params.noise_scale * math.sqrt(dt) * (sigma[0] @ xi)


def iterate_block(drift, params: ProcessParams, config: EnsembleConfig, metric, observer,
                  block: int, stream: int = 0, antithetic: bool = False):
    """Generator over one block: yields ``(k, t_k, z_k, alive)`` for k = 0..n_steps.

    All ``BLOCK`` lanes are simulated; callers slice the lanes they need.
    """
    n = params.dim
    z0 = config.start
    if z0.shape[0] != n:
        z0 = np.broadcast_to(z0, (n,))
    metric = metric if metric is not None else euclidean(n)
    sampler = _Sampler(metric, observer, z0)
    w_fn = as_drift(drift)
    gen = _rng.block_generator(config.master_seed, block, stream)
    dt = config.dt
    scale = params.noise_scale * math.sqrt(dt)
    z = np.array(np.broadcast_to(z0, (_rng.BLOCK, n)), dtype=complex)
    alive = np.ones(_rng.BLOCK, dtype=bool)
    yield 0, 0.0, z, alive
    half = _rng.BLOCK // 2
    for k in range(config.n_steps):
        t = k * dt
        if antithetic:
            xi_half = gen.standard_normal((half, n))
            xi = np.concatenate([xi_half, -xi_half])
        else:
            xi = gen.standard_normal((_rng.BLOCK, n))
        sigma, ok = sampler(z)
        with np.errstate(all="ignore"):
            w = np.asarray(w_fn(z, t), dtype=complex)
        bad = ~np.all(np.isfinite(w), axis=-1)
        if ok is not None:
            bad |= ~ok
        if params.rho == 0:
            noise = 0.0
        else:
            noise = scale * np.einsum("...ab,...b->...a", sigma, xi)
        with np.errstate(all="ignore"):
            z = z + w * dt + noise
        bad |= ~np.all(np.isfinite(z), axis=-1)
        newly = bad & alive
        if np.any(newly):
            alive = alive & ~bad
            z[~alive] = np.nan
        yield k + 1, (k + 1) * dt, z, alive


def simulate_ensemble(drift, params: ProcessParams, config: EnsembleConfig,
                      metric: ChartedMetric = None, observer: ObserverField = None,
                      stream: int = 0, antithetic: bool = False, threads=None) -> PathEnsemble:
    """Simulate and store ``config.n_paths`` independent paths."""
    n = params.dim
    N = config.n_steps

    def run(item):
        block, lanes = item
        out = np.empty((lanes, N + 1, n), dtype=complex)
        alive = None
        for k, _, z, alive in iterate_block(drift, params, config, metric, observer, block,
                                            stream, antithetic):
            out[:, k] = z[:lanes]
        return out, ~alive[:lanes]

    layout = _rng.block_layout(config.n_paths)
    results = _rng.map_blocks(run, layout, threads)
    positions = np.concatenate([r[0] for r in results])
    rejected = np.concatenate([r[1] for r in results])
    p = np.arange(config.n_paths)
    seeds = np.stack([np.full_like(p, stream), p // _rng.BLOCK, p % _rng.BLOCK], axis=1)
    ens = PathEnsemble(params, config, np.arange(N + 1) * config.dt, positions, rejected, seeds)
    ens.metadata["attrition"] = ens.attrition
    ens.metadata["rejected"] = int(rejected.sum())
    if ens.attrition > 0.01:
        ens.metadata["warning"] = "EnsembleDegraded"
        warnings.warn(f"EnsembleDegraded: {ens.attrition:.2%} of paths rejected", RuntimeWarning)
    return ens


# ---------------------------------------------------------------------------
# Ensemble statistics
# ---------------------------------------------------------------------------

@dataclass
class StructureEstimate:
    bucket_edges: np.ndarray
    rate: np.ndarray  # (buckets, n, n)
    se: np.ndarray
    n_paths: int
    attrition: float


def _bucket_slices(n_steps, n_buckets):
    edges = np.linspace(0, n_steps, n_buckets + 1).round().astype(int)
    return edges, [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _mean_se(per_path):
    """Mean over axis 0 and its standard error (real and imaginary parts combined)."""
    n = per_path.shape[0]
    mean = per_path.mean(axis=0)
    if n < 2:
        return mean, np.full(mean.shape, np.inf)
    var = per_path.real.var(axis=0, ddof=1) + (per_path.imag.var(axis=0, ddof=1)
                                               if np.iscomplexobj(per_path) else 0.0)
    return mean, np.sqrt(var / n)


def estimate_structure_relation(ens: PathEnsemble, n_buckets: int = 1) -> StructureEstimate:
    """Per-bucket averages of dZ dZ^T / dt (approximately alpha lambda g_E)."""
    dz = ens.increments()
    if dz.shape[0] == 0:
        raise ValueError("ensemble has no valid paths")
    edges, slices = _bucket_slices(dz.shape[1], n_buckets)
    rates, ses = [], []
    for sl in slices:
        seg = dz[:, sl]
        per_path = np.einsum("pka,pkb->pab", seg, seg) / (seg.shape[1] * ens.config.dt)
        m, s = _mean_se(per_path)
        rates.append(m)
        ses.append(s)
    return StructureEstimate(edges * ens.config.dt, np.array(rates), np.array(ses),
                             int(dz.shape[0]), ens.attrition)


def predicted_structure(ens: PathEnsemble, metric: ChartedMetric, observer=None) -> np.ndarray:
    """alpha lambda g_E averaged over the left endpoints of all valid increments."""
    z = ens.positions[ens.valid][:, :-1].reshape(-1, ens.params.dim)
    sampler = _Sampler(metric, observer, z[0])
    ge = sampler.metric_e(z[:1] if metric.flat else z)
    return ens.params.alpha * ens.params.lam * ge.mean(axis=0)


@dataclass
class SplitRates:
    xx: np.ndarray
    yy: np.ndarray
    xy: np.ndarray
    xx_se: np.ndarray
    yy_se: np.ndarray
    xy_se: np.ndarray
    zzbar: np.ndarray


def split_real_imag_covariances(ens: PathEnsemble, metric: ChartedMetric = None) -> SplitRates:
    """Rates of d[X,X], d[Y,Y], d[X,Y] (and d[Z, Zbar]) for Z = X + iY on a flat chart."""
    if metric is not None and not metric.flat:
        raise Unsupported("real/imaginary split relations are stated for flat charts only")
    dz = ens.increments()
    dx, dy = dz.real, dz.imag
    T = dz.shape[1] * ens.config.dt

    def rate(a, b):
        return _mean_se(np.einsum("pka,pkb->pab", a, b) / T)

    (xx, sxx), (yy, syy), (xy, sxy) = rate(dx, dx), rate(dy, dy), rate(dx, dy)
    zzbar = np.einsum("pka,pkb->ab", dz, dz.conj()) / (dz.shape[0] * T)
    return SplitRates(xx, yy, xy, sxx, syy, sxy, zzbar)


def predicted_split_rates(params: ProcessParams):
    """Flat-space rates (beta + rho (1 +- cos phi)) lambda / 2 and rho sin(phi) lambda / 2."""
    lam, rho, phi, beta = params.lam, params.rho, params.phi, params.beta
    return ((beta + rho * (1 + math.cos(phi))) * lam / 2,
            (beta + rho * (1 - math.cos(phi))) * lam / 2,
            rho * math.sin(phi) * lam / 2)


@dataclass
class FunctionalEstimate:
    phi: complex
    phi_se: float
    moment: complex
    moment_se: float
    diagnostics: dict


def _trapezoid_pairing(ens: PathEnsemble, J):
    N = ens.config.n_steps
    n = ens.params.dim
    J = np.asarray(J, dtype=complex)
    if J.ndim == 1:
        J = np.broadcast_to(J, (N + 1, n))
    if J.shape != (N + 1, n):
        raise ValueError("J must be a constant covector or sampled on the time grid")
    pos = ens.positions[ens.valid]
    vals = np.einsum("pka,ka->pk", pos, J)
    w = np.full(N + 1, ens.config.dt)
    w[0] = w[-1] = 0.5 * ens.config.dt
    return vals @ w


def _jackknife(samples, groups=20):
    n = samples.shape[0]
    if n < 2:
        return samples.mean(), float("inf")
    g = min(groups, n)
    idx = np.array_split(np.arange(n), g)
    total = samples.sum()
    loo = np.array([(total - samples[i].sum()) / (n - len(i)) for i in idx])
    se = math.sqrt((g - 1) / g * np.sum(np.abs(loo - loo.mean()) ** 2))
    return samples.mean(), se


def characteristic_functional(ens: PathEnsemble, J) -> FunctionalEstimate:
    """MC means of exp(i int J.Z) and exp(int J.Z) with jackknife standard errors."""
    s = _trapezoid_pairing(ens, J)
    diag = {"n_paths": int(s.shape[0]), "attrition": ens.attrition}
    phi, phi_se = _jackknife(np.exp(1j * s))
    with np.errstate(over="ignore", invalid="ignore"):
        mom_samples = np.exp(s)
    if not np.all(np.isfinite(mom_samples)):
        diag["moment_overflow"] = True
        moment, moment_se = complex(np.inf), float("inf")
    else:
        moment, moment_se = _jackknife(mom_samples)
    return FunctionalEstimate(complex(phi), phi_se, complex(moment), moment_se, diag)


@dataclass
class MartingaleResidual:
    bucket_edges: np.ndarray
    residual: np.ndarray  # (buckets, n)
    se: np.ndarray

    def max_z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.residual.real) / np.maximum(self.se, 1e-300)
        return float(np.max(z))


def martingale_residual(ens: PathEnsemble, drift, n_buckets: int = 4) -> MartingaleResidual:
    """Bucketed ensemble means of (dZ - w(Z) dt) / dt."""
    w_fn = as_drift(drift)
    pos = ens.positions[ens.valid]
    dt = ens.config.dt
    N = ens.config.n_steps
    w = np.stack([np.asarray(w_fn(pos[:, k], k * dt), dtype=complex) for k in range(N)], axis=1)
    resid = (np.diff(pos, axis=1) - w * dt) / dt
    edges, slices = _bucket_slices(N, n_buckets)
    means, ses = [], []
    for sl in slices:
        per_path = resid[:, sl].mean(axis=1)
        m, s = _mean_se(per_path)
        means.append(m)
        ses.append(s)
    return MartingaleResidual(edges * dt, np.array(means), np.array(ses))
