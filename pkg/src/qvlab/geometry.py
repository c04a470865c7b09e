"""Metric evaluation on a single complexified coordinate chart.

Conventions used throughout the package:

* points are complex arrays whose last axis holds the ``n`` chart coordinates;
* derivative indices come first: ``dg[s, a, b] = d_s g_ab``,
  ``d2g[s, t, a, b] = d_s d_t g_ab``;
* ``gamma[m, a, b]`` is the Levi-Civita symbol Gamma^m_ab and
  ``dgamma[s, m, a, b] = d_s Gamma^m_ab``;
* second-order parts of second-order vectors are stored directly as symmetric
  arrays, so the bilinear-form/second-order-form identification is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NormalizationError, PivotFailure, SingularMetric

# Relative FD steps per derivative order: h = base * (1 + |z_k|).
FD_STEP = {1: 1e-4, 2: 1e-3, 3: 5e-3}
SINGULAR_TOL = 1e-12
PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class ObserverField:
    """Unit timelike vector field u^mu used to Euclideanize a Lorentzian metric."""

    u: Callable[[np.ndarray], np.ndarray]

    def __call__(self, z):
        return np.asarray(self.u(np.asarray(z, dtype=complex)), dtype=complex)


@dataclass(frozen=True)
class GaugePotential:
    """Covector potential A_mu with optional analytic derivatives.

    ``dA(z)[nu, mu] = d_nu A_mu`` and ``d2A(z)[s, nu, mu] = d_s d_nu A_mu``.
    """

    A: Callable[[np.ndarray], np.ndarray]
    dA: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2A: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, z):
        return np.asarray(self.A(np.asarray(z, dtype=complex)), dtype=complex)

    def jacobian(self, z):
        z = np.asarray(z, dtype=complex)
        if self.dA is not None:
            return np.asarray(self.dA(z), dtype=complex)
        return fd_derivative(self, z, 1)

    def hessian(self, z):
        z = np.asarray(z, dtype=complex)
        if self.d2A is not None:
            return np.asarray(self.d2A(z), dtype=complex)
        if self.dA is not None:
            return fd_derivative(self.jacobian, z, 1)
        return fd_derivative(self.jacobian, z, 2)


def zero_potential(dim: int) -> GaugePotential:
    zero = lambda z: np.zeros(np.shape(z)[:-1] + (dim,), dtype=complex)
    return GaugePotential(
        zero,
        dA=lambda z: np.zeros((dim,) + np.shape(z)[:-1] + (dim,), dtype=complex),
        d2A=lambda z: np.zeros((dim, dim) + np.shape(z)[:-1] + (dim,), dtype=complex),
    )


@dataclass(frozen=True)
class ChartedMetric:
    """Metric components g_ab(z) on one chart, analytic in the coordinates.

    ``g`` must accept points of shape ``(..., n)`` and return ``(..., n, n)``.
    The optional derivative callables keep batch axes first and put derivative
    axes ahead of the tensor axes: ``dg(z)[..., s, a, b] = d_s g_ab``.
    """

    dim: int
    g: Callable[[np.ndarray], np.ndarray]
    dg: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2g: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d3g: Optional[Callable[[np.ndarray], np.ndarray]] = None
    signature: str = "riemannian"
    name: str = ""
    domain: Optional[Callable[[np.ndarray], bool]] = None
    flat: bool = False
    observer: Optional[ObserverField] = None
    params: dict = field(default_factory=dict)

    @property
    def lorentzian(self) -> bool:
        return self.signature == "lorentzian"

    @property
    def has_analytic_derivatives(self) -> bool:
        return self.dg is not None and self.d2g is not None

    def components(self, z):
        return np.asarray(self.g(np.asarray(z, dtype=complex)), dtype=complex)

    def inverse(self, z):
        return np.linalg.inv(self.components(z))

    def check_domain(self, z):
        if self.domain is not None and not self.domain(np.asarray(z, dtype=complex)):
            raise DomainError(f"point {np.asarray(z)} outside the domain of chart {self.name!r}")


@dataclass
class MetricEval:
    point: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    dg: np.ndarray
    dg_inv: np.ndarray
    d2g_inv: np.ndarray
    gamma: np.ndarray
    gamma_trace: np.ndarray
    dgamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    ricci_scalar: complex
    dR: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def dgamma_trace(self):
        """d_s Gamma^m with Gamma^m = g^ab Gamma^m_ab."""
        return (np.einsum("sab,mab->sm", self.dg_inv, self.gamma)
                + np.einsum("ab,smab->sm", self.g_inv, self.dgamma))


def fd_derivative(f, z, order=1, base=None):
    """4th-order central differences of ``f`` along each real coordinate axis.

    ``order`` only selects the default step size (nested derivatives use a
    larger step to keep round-off below truncation error).  The result has the
    derivative index first.  For holomorphic ``f`` the real-axis derivative
    equals the complex derivative.
    """
    z = np.asarray(z, dtype=complex)
    base = FD_STEP[order] if base is None else base
    out = []
    for k in range(z.shape[-1]):
        h = base * (1.0 + abs(z[k]))
        e = np.zeros_like(z)
        e[k] = h
        fp1, fm1 = np.asarray(f(z + e)), np.asarray(f(z - e))
        fp2, fm2 = np.asarray(f(z + 2 * e)), np.asarray(f(z - 2 * e))
        out.append((-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h))
    return np.stack(out)


def _metric_derivatives(metric: ChartedMetric, z, deriv_mode, need_third):
    if deriv_mode == "analytic":
        if not metric.has_analytic_derivatives:
            raise ValueError(f"metric {metric.name!r} has no analytic derivatives")
        dg = np.asarray(metric.dg(z), dtype=complex)
        d2g = np.asarray(metric.d2g(z), dtype=complex)
        d3g = None
        if need_third:
            d3g = (np.asarray(metric.d3g(z), dtype=complex) if metric.d3g is not None
                   else fd_derivative(metric.d2g, z, 1))
        return dg, d2g, d3g
    if deriv_mode != "finite_difference":
        raise ValueError(f"unknown deriv_mode {deriv_mode!r}")
    dg = fd_derivative(metric.components, z, 1)
    d2g = fd_derivative(lambda p: fd_derivative(metric.components, p, 1), z, 2)
    d3g = None
    if need_third:
        d3g = fd_derivative(
            lambda p: fd_derivative(lambda q: fd_derivative(metric.components, q, 1), p, 2), z, 3)
    return dg, d2g, d3g


def _lowered_christoffel(dg):
    # T_{s n r} = d_n g_{s r} + d_r g_{s n} - d_s g_{n r}
    return np.einsum("nsr->snr", dg) + np.einsum("rsn->snr", dg) - dg


def christoffel(g_inv, dg):
    return 0.5 * np.einsum("ms,snr->mnr", g_inv, _lowered_christoffel(dg))


def eval_metric(metric: ChartedMetric, point, deriv_mode="analytic", with_dR=False) -> MetricEval:
    """Evaluate g, its inverse, Christoffels, curvature and (optionally) dR at one point."""
    z = np.asarray(point, dtype=complex).reshape(-1)
    if z.shape[0] != metric.dim:
        raise DomainError(f"expected {metric.dim} coordinates, got {z.shape[0]}")
    metric.check_domain(z)
    g = metric.components(z)
    scale = max(np.max(np.abs(g)), 1.0)
    if abs(np.linalg.det(g)) < SINGULAR_TOL * scale ** metric.dim:
        raise SingularMetric(f"|det g| below tolerance at {z}")
    g_inv = np.linalg.inv(g)
    dg, d2g, d3g = _metric_derivatives(metric, z, deriv_mode, with_dR)

    # d_s g^ab = -g^ac d_s g_cd g^db
    dg_inv = -np.einsum("ac,scd,db->sab", g_inv, dg, g_inv)
    d2g_inv = -(np.einsum("tac,scd,db->tsab", dg_inv, dg, g_inv)
                + np.einsum("ac,tscd,db->tsab", g_inv, d2g, g_inv)
                + np.einsum("ac,scd,tdb->tsab", g_inv, dg, dg_inv))

    t = _lowered_christoffel(dg)
    dt = np.einsum("snkr->sknr", d2g) + np.einsum("srkn->sknr", d2g) - d2g
    gamma = 0.5 * np.einsum("mk,knr->mnr", g_inv, t)
    dgamma = 0.5 * (np.einsum("smk,knr->smnr", dg_inv, t)
                    + np.einsum("mk,sknr->smnr", g_inv, dt))

    riemann = _riemann(gamma, dgamma)
    ricci = np.einsum("rsrn->sn", riemann)
    R = complex(np.einsum("ab,ab->", g_inv, ricci))
    gamma_trace = np.einsum("ab,mab->m", g_inv, gamma)

    dR = None
    if with_dR:
        d2t = (np.einsum("usnkr->usknr", d3g) + np.einsum("usrkn->usknr", d3g) - d3g)
        d2gamma = 0.5 * (np.einsum("usmk,knr->usmnr", d2g_inv, t)
                         + np.einsum("smk,uknr->usmnr", dg_inv, dt)
                         + np.einsum("umk,sknr->usmnr", dg_inv, dt)
                         + np.einsum("mk,usknr->usmnr", g_inv, d2t))
        d_ricci = _ricci_derivative(gamma, dgamma, d2gamma)
        dR = (np.einsum("uab,ab->u", dg_inv, ricci) + np.einsum("ab,uab->u", g_inv, d_ricci))

    return MetricEval(point=z, g=g, g_inv=g_inv, dg=dg, dg_inv=dg_inv, d2g_inv=d2g_inv,
                      gamma=gamma, gamma_trace=gamma_trace, dgamma=dgamma, riemann=riemann,
                      ricci=ricci, ricci_scalar=R, dR=dR)


def _riemann(gamma, dgamma):
    # R^r_{s m n} = d_m G^r_{n s} - d_n G^r_{m s} + G^r_{m l} G^l_{n s} - G^r_{n l} G^l_{m s}
    term = np.einsum("mrns->rsmn", dgamma) + np.einsum("rml,lns->rsmn", gamma, gamma)
    return term - term.transpose(0, 1, 3, 2)


def _ricci_derivative(gamma, dgamma, d2gamma):
    # d_u R_{sn} from d_u R^r_{s r n}
    a = np.einsum("umrns->ursmn", d2gamma)
    b = np.einsum("urml,lns->ursmn", dgamma, gamma) + np.einsum("rml,ulns->ursmn", gamma, dgamma)
    full = a + b
    riem_d = full - full.transpose(0, 1, 2, 4, 3)
    return np.einsum("ursrn->usn", riem_d)


def euclideanize(g_inv, u=None, g=None, tol=1e-8):
    """Rotated inverse metric g_E^{ab} = g^{ab} + 2 u^a u^b.

    With ``u=None`` (Riemannian / non-relativistic mode) the inverse metric is
    returned unchanged.  The normalization g_ab u^a u^b = -1 is checked when the
    inputs are real.
    """
    g_inv = np.asarray(g_inv, dtype=complex)
    if u is None:
        return g_inv.copy()
    u = np.asarray(u, dtype=complex)
    if np.all(np.abs(g_inv.imag) < tol) and np.all(np.abs(u.imag) < tol):
        g_low = np.linalg.inv(g_inv) if g is None else np.asarray(g, dtype=complex)
        norm = np.einsum("...ab,...a,...b->...", g_low, u, u)
        if np.any(np.abs(norm + 1.0) > tol):
            raise NormalizationError(f"observer not unit timelike: g(u,u) = {norm}")
    ge = g_inv + 2.0 * np.einsum("...a,...b->...ab", u, u)
    return 0.5 * (ge + np.swapaxes(ge, -1, -2))


def field_strength(A: GaugePotential, point):
    """H_ab = d_a A_b - d_b A_a (Christoffel terms cancel)."""
    z = np.asarray(point, dtype=complex)
    dA = A.jacobian(z)
    return dA - np.swapaxes(dA, 0, 1)


def field_strength_derivative(A: GaugePotential, point):
    """d_s H_ab, derivative index first."""
    d2A = A.hessian(np.asarray(point, dtype=complex))
    return d2A - np.swapaxes(d2A, 1, 2)


def complex_cholesky(a):
    """Transpose-symmetric Cholesky: lower ``L`` with ``L @ L.T == a`` (no conjugation).

    Accepts a single matrix or a batch ``(..., n, n)``.  Uses the principal
    square root for each pivot.
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    scale = np.linalg.norm(a, axis=(-2, -1))
    L = np.zeros_like(a)
    for j in range(n):
        d = a[..., j, j] - np.einsum("...k,...k->...", L[..., j, :j], L[..., j, :j])
        if np.any(np.abs(d) < PIVOT_TOL * scale):
            raise PivotFailure(f"pivot {j} vanishes (|d| < {PIVOT_TOL:g} * ||a||)")
        piv = np.sqrt(d)
        L[..., j, j] = piv
        if j + 1 < n:
            rest = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", L[..., j + 1:, :j], L[..., j, :j])
            L[..., j + 1:, j] = rest / piv[..., None]
    return L


def sampling_factor(metric: ChartedMetric, z, observer: Optional[ObserverField] = None):
    """Batched sigma(z) with sigma sigma^T = g_E(z); ``z`` has shape (..., n)."""
    z = np.asarray(z, dtype=complex)
    g_inv = np.linalg.inv(metric.components(z))
    obs = observer if observer is not None else metric.observer
    u = obs(z) if (obs is not None and metric.lorentzian) else None
    ge = g_inv if u is None else g_inv + 2.0 * np.einsum("...a,...b->...ab", u, u)
    return complex_cholesky(ge)
