"""Discrete Ito / Stratonovich / quadratic-variation integrals on stored paths.

Partitions are the simulation grid itself.  Scalar integrands ``f`` must be
vectorized: they receive positions of shape ``(N + 1, n)`` and return
``(N + 1,)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MetricEval


@dataclass
class DiscretePath:
    times: np.ndarray
    positions: np.ndarray
    step: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=complex)
        if pos.ndim == 1:
            pos = pos[:, None]
        self.positions = pos
        if len(self.times) < 2 or len(self.times) != len(pos):
            raise ValueError("a path needs at least two samples and one time per sample")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path times must be strictly increasing")
        if not np.all(np.isfinite(pos)):
            raise ValueError("path positions must be finite")

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def increments(self):
        return np.diff(self.positions, axis=0)

    @classmethod
    def from_values(cls, times, values):
        times = np.asarray(times, dtype=float)
        return cls(times, values, float(times[1] - times[0]))


@dataclass
class SecondOrderVector:
    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        self.first = np.asarray(self.first, dtype=complex)
        self.second = np.asarray(self.second, dtype=complex)
        if not np.allclose(self.second, self.second.T):
            raise ValueError("second-order part must be symmetric")


def _values(f, path):
    if callable(f):
        return np.asarray(f(path.positions), dtype=complex).reshape(len(path.times))
    return np.full(len(path.times), complex(f))


def ito_integral(f, path: DiscretePath, coord: int = 0) -> complex:
    """Left-endpoint sum of f(Z_i) (Z^mu_{i+1} - Z^mu_i)."""
    fv = _values(f, path)
    return complex(np.sum(fv[:-1] * path.increments[:, coord]))


def strat_integral(f, path: DiscretePath, coord: int = 0) -> complex:
    """Midpoint-average sum of 1/2 [f(Z_i) + f(Z_{i+1})] (Z^mu_{i+1} - Z^mu_i)."""
    fv = _values(f, path)
    return complex(np.sum(0.5 * (fv[:-1] + fv[1:]) * path.increments[:, coord]))


def qv_integral(f, path: DiscretePath, mu: int, nu: int) -> complex:
    """Sum of f(Z_i) dZ^mu dZ^nu (left endpoint)."""
    fv = _values(f, path)
    dz = path.increments
    return complex(np.sum(fv[:-1] * dz[:, mu] * dz[:, nu]))


def quadratic_covariation(path: DiscretePath, mu: int = 0, nu: int = 0):
    """Return ``([Z^mu, Z^nu]_T, running partial sums)``; the running array starts at 0."""
    dz = path.increments
    running = np.concatenate([[0.0 + 0.0j], np.cumsum(dz[:, mu] * dz[:, nu])])
    return complex(running[-1]), running


def _fd_gradient(f, positions, h=1e-5):
    n = positions.shape[1]
    grads = np.empty(positions.shape, dtype=complex)
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        grads[:, k] = (np.asarray(f(positions + e)) - np.asarray(f(positions - e))) / (2 * h)
    return grads


def ito_strat_conversion_residual(f, path: DiscretePath, mu: int = 0, grad_f=None) -> complex:
    """strat - ito - 1/2 sum_nu int d_nu f d[Z^mu, Z^nu]."""
    if not callable(f):
        return 0j
    if grad_f is None:
        grads = _fd_gradient(f, path.positions)
    else:
        grads = np.asarray(grad_f(path.positions), dtype=complex).reshape(path.positions.shape)
    dz = path.increments
    correction = 0.5 * np.sum(grads[:-1] * dz[:, [mu]] * dz, axis=(0, 1))
    return strat_integral(f, path, mu) - ito_integral(f, path, mu) - complex(correction)


def strat_product_rule_residual(path, f, df, h, dh, coord=0) -> complex:
    """F H |_0^T - int F dH - int H dF with Stratonovich chain-rule differentials.

    ``F = f(Z^mu)``, ``H = h(Z^mu)`` for the scalar coordinate ``Z^mu``.
    """
    x = path.positions[:, coord]
    F, H = f(x), h(x)
    rhs = (strat_integral(lambda p: f(p[:, coord]) * dh(p[:, coord]), path, coord)
           + strat_integral(lambda p: h(p[:, coord]) * df(p[:, coord]), path, coord))
    return complex(F[-1] * H[-1] - F[0] * H[0] - rhs)


def ito_product_rule_residual(path, f, df, d2f, h, dh, d2h, coord=0) -> complex:
    """FH |_0^T - int F dH - int H dF - [F, H]_T with Ito chain-rule differentials.

    ``dF = f' dZ + 1/2 f'' d[Z, Z]`` and ``d[F, H] = f' h' d[Z, Z]``.
    """
    x = path.positions[:, coord]
    F, H = f(x), h(x)
    int_f_dh = (ito_integral(lambda p: f(p[:, coord]) * dh(p[:, coord]), path, coord)
                + 0.5 * qv_integral(lambda p: f(p[:, coord]) * d2h(p[:, coord]), path, coord, coord))
    int_h_df = (ito_integral(lambda p: h(p[:, coord]) * df(p[:, coord]), path, coord)
                + 0.5 * qv_integral(lambda p: h(p[:, coord]) * d2f(p[:, coord]), path, coord, coord))
    bracket = qv_integral(lambda p: df(p[:, coord]) * dh(p[:, coord]), path, coord, coord)
    return complex(F[-1] * H[-1] - F[0] * H[0] - int_f_dh - int_h_df - bracket)


def covariant_hat(v: SecondOrderVector, ev: MetricEval) -> np.ndarray:
    """v_hat^mu = v^mu + 1/2 Gamma^mu_{sk} v^{sk}."""
    if v.first.shape[0] != ev.dim or v.second.shape != (ev.dim, ev.dim):
        raise ValueError("second-order vector and metric dimensions disagree")
    return v.first + 0.5 * np.einsum("msk,sk->m", ev.gamma, v.second)


def rms(values) -> float:
    values = np.asarray(values)
    return float(np.sqrt(np.mean(np.abs(values) ** 2)))


def observed_order(dts, errors) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    slope, _ = np.polyfit(np.log(np.asarray(dts, float)), np.log(np.asarray(errors, float)), 1)
    return float(slope)
