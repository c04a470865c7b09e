"""Velocity fields from wavefunctions, their residual checks, and the classical limit.

A field set is built from ln Psi (or S = alpha ln Psi):

    w_hat^mu = lambda g^{mu nu} (alpha d_nu ln Psi - q A_nu),
    w^mu     = w_hat^mu - (alpha lambda / 2) Gamma^mu,     Gamma^mu = g^{ab} Gamma^mu_ab,
    w2       = alpha lambda g^{-1}.

For non-relativistic runs lambda = 1/m and the coordinates are spatial, with a
separate time argument ``t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .charts import tensor_function
from .errors import NodeRegion, StepSizeError, TopologyError
from .geometry import (ChartedMetric, GaugePotential, MetricEval, christoffel, eval_metric,
                       fd_derivative, field_strength, field_strength_derivative, zero_potential)
from .process import ProcessParams

NODE_TOL = 1e-8
TIME_STEP = 1e-4


# ---------------------------------------------------------------------------
# Log-derivative jets of Psi
# ---------------------------------------------------------------------------

class SymbolicWave:
    """Psi given as a sympy expression; derivatives of ln Psi are exact.

    ``symbols`` are the chart coordinates; ``time`` an optional extra symbol.
    """

    def __init__(self, expr, symbols, time=None):
        self.expr = sp.sympify(expr)
        self.symbols = tuple(symbols)
        self.time = time
        args = self.symbols + ((time,) if time is not None else ())
        log_psi = sp.expand_log(sp.log(self.expr), force=True)
        L = sp.Array([sp.diff(log_psi, x) for x in self.symbols])
        dL = sp.Array([sp.diff(L, x) for x in self.symbols])
        d2L = sp.Array([sp.diff(dL, x) for x in self.symbols])
        self._psi = tensor_function(sp.Array([self.expr]), args)
        self._L = tensor_function(L, args)
        self._dL = tensor_function(dL, args)
        self._d2L = tensor_function(d2L, args)
        self._Lt = tensor_function(sp.diff(L, time), args) if time is not None else None
        self.analytic = True

    def _args(self, z, t):
        z = np.asarray(z, dtype=complex)
        if self.time is None:
            return z
        tt = np.broadcast_to(np.asarray(t, dtype=complex), z.shape[:-1] + (1,))
        return np.concatenate([z, tt], axis=-1)

    def psi(self, z, t=0.0):
        return self._psi(self._args(z, t))[..., 0]

    def log_grad(self, z, t=0.0):
        return self._L(self._args(z, t))

    def jet(self, z, t=0.0):
        """(L, dL[s, n], d2L[u, s, n], dL/dt) at one point."""
        a = self._args(z, t)
        n = len(self.symbols)
        Lt = self._Lt(a) if self._Lt is not None else np.zeros(n, dtype=complex)
        return self._L(a), self._dL(a), self._d2L(a), Lt


class NumericWave:
    """Psi given as a callable ``psi(z, t)``; derivatives by central differences."""

    def __init__(self, psi: Callable, dim: int):
        self._f = psi
        self.dim = dim
        self.analytic = False

    def psi(self, z, t=0.0):
        return np.asarray(self._f(np.asarray(z, dtype=complex), t), dtype=complex)

    def log_grad(self, z, t=0.0):
        z = np.asarray(z, dtype=complex)
        out = np.empty(z.shape, dtype=complex)
        val = self.psi(z, t)
        for k in range(z.shape[-1]):
            h = 1e-4 * (1.0 + np.abs(z[..., k]))
            e = np.zeros(z.shape)
            e[..., k] = h
            d = (-self.psi(z + 2 * e, t) + 8 * self.psi(z + e, t)
                 - 8 * self.psi(z - e, t) + self.psi(z - 2 * e, t)) / (12 * h)
            out[..., k] = d / val
        return out

    def jet(self, z, t=0.0):
        z = np.asarray(z, dtype=complex)
        L = self.log_grad(z, t)
        dL = fd_derivative(lambda p: self.log_grad(p, t), z, 2)
        d2L = fd_derivative(lambda p: fd_derivative(lambda q: self.log_grad(q, t), p, 2), z, 3)
        Lt = (self.log_grad(z, t + TIME_STEP) - self.log_grad(z, t - TIME_STEP)) / (2 * TIME_STEP)
        return L, dL, d2L, Lt


def as_wave(psi, dim=None):
    if isinstance(psi, (SymbolicWave, NumericWave)):
        return psi
    if callable(psi):
        if dim is None:
            raise ValueError("a callable wavefunction needs its dimension")
        return NumericWave(psi, dim)
    raise TypeError("wavefunction must be SymbolicWave, NumericWave or a callable")


# ---------------------------------------------------------------------------
# Velocity fields
# ---------------------------------------------------------------------------

def _gamma_trace_batched(metric: ChartedMetric, z):
    z = np.asarray(z, dtype=complex)
    if metric.flat:
        return np.zeros(z.shape, dtype=complex)
    g_inv = np.linalg.inv(metric.components(z))
    if metric.dg is not None:
        dg = np.asarray(metric.dg(z), dtype=complex)
    else:
        flat_z = z.reshape(-1, z.shape[-1])
        dg = np.stack([fd_derivative(metric.components, p, 1) for p in flat_z])
        dg = dg.reshape(z.shape[:-1] + dg.shape[1:])
    low = (np.einsum("...nsr->...snr", dg) + np.einsum("...rsn->...snr", dg) - dg)
    gamma = 0.5 * np.einsum("...ms,...snr->...mnr", g_inv, low)
    return np.einsum("...nr,...mnr->...m", g_inv, gamma)


@dataclass
class VelocityFieldSet:
    params: ProcessParams
    metric: ChartedMetric
    wave: object
    A: GaugePotential
    node_scale: float = 1.0
    dA_dt: Optional[Callable] = None

    @property
    def alpha_lambda(self) -> complex:
        return self.params.alpha * self.params.lam

    @property
    def analytic(self) -> bool:
        return bool(self.wave.analytic and self.metric.has_analytic_derivatives)

    @property
    def deriv_mode(self) -> str:
        return "analytic" if self.analytic else "finite_difference"

    def node_mask(self, z, t=0.0):
        return np.abs(self.wave.psi(z, t)) < NODE_TOL * self.node_scale

    def _covector(self, z, t):
        return self.params.alpha * self.wave.log_grad(z, t) - self.params.q * self.A(z)

    def w_hat(self, z, t=0.0):
        z = np.asarray(z, dtype=complex)
        g_inv = np.linalg.inv(self.metric.components(z))
        return self.params.lam * np.einsum("...mn,...n->...m", g_inv, self._covector(z, t))

    def w(self, z, t=0.0):
        return self.w_hat(z, t) - 0.5 * self.alpha_lambda * _gamma_trace_batched(self.metric, z)

    def w2(self, z):
        return self.alpha_lambda * np.linalg.inv(self.metric.components(z))

    def drift(self, z, t=0.0):
        """Ito drift for the process engine; NaN inside node regions."""
        with np.errstate(all="ignore"):
            w = self.w(z, t)
            nodes = self.node_mask(z, t)
        return np.where(nodes[..., None], np.nan, w)

    def jets(self, z, t=0.0, ev: MetricEval = None):
        """(w_hat, d_s w_hat^m [s, m], d_u d_s w_hat^m [u, s, m], d_t w_hat) at one point."""
        z = np.asarray(z, dtype=complex).reshape(-1)
        if self.node_mask(z, t):
            raise NodeRegion(f"|Psi| below node threshold at {z}")
        ev = ev if ev is not None else eval_metric(self.metric, z, self.deriv_mode)
        lam, a, q = self.params.lam, self.params.alpha, self.params.q
        L, dL, d2L, Lt = self.wave.jet(z, t)
        V = a * L - q * self.A(z)
        dV = a * dL - q * self.A.jacobian(z)
        d2V = a * d2L - q * self.A.hessian(z)
        Vt = a * Lt
        if self.dA_dt is not None:
            Vt = Vt - q * np.asarray(self.dA_dt(z, t), dtype=complex)
        gi, dgi, d2gi = ev.g_inv, ev.dg_inv, ev.d2g_inv
        wh = lam * gi @ V
        dwh = lam * (np.einsum("smn,n->sm", dgi, V) + np.einsum("mn,sn->sm", gi, dV))
        d2wh = lam * (np.einsum("usmn,n->usm", d2gi, V)
                      + np.einsum("smn,un->usm", dgi, dV)
                      + np.einsum("umn,sn->usm", dgi, dV)
                      + np.einsum("mn,usn->usm", gi, d2V))
        dtwh = lam * gi @ Vt
        return wh, dwh, d2wh, dtwh


def velocity_from_wavefunction(psi, params: ProcessParams, metric: ChartedMetric,
                               A: GaugePotential = None, node_scale=None, reference_points=None,
                               dA_dt=None) -> VelocityFieldSet:
    """Field set for Psi; ``node_scale`` defaults to max |Psi| over ``reference_points``."""
    wave = as_wave(psi, metric.dim)
    A = A if A is not None else zero_potential(metric.dim)
    if node_scale is None:
        if reference_points is None:
            node_scale = 1.0
        else:
            node_scale = float(np.max(np.abs(wave.psi(np.asarray(reference_points, dtype=complex)))))
    return VelocityFieldSet(params, metric, wave, A, node_scale, dA_dt)


def constant_field(w_hat, params: ProcessParams, metric: ChartedMetric) -> VelocityFieldSet:
    """Constant w_hat on a flat chart, realized by the plane wave exp(g w_hat . x / (alpha lambda))."""
    if not metric.flat:
        raise ValueError("constant fields are only meaningful on flat charts")
    x = sp.symbols(f"x0:{metric.dim}")
    g = np.real_if_close(metric.components(np.zeros(metric.dim)))
    cov = [sp.nsimplify(complex(v)) for v in np.asarray(g) @ np.asarray(w_hat, dtype=complex)]
    al = sp.nsimplify(params.alpha * params.lam)
    expr = sp.exp(sum(c * xi for c, xi in zip(cov, x)) / al)
    return velocity_from_wavefunction(SymbolicWave(expr, x), params, metric)


# ---------------------------------------------------------------------------
# Covariant derivatives
# ---------------------------------------------------------------------------

def _nabla(ev: MetricEval, v, dv):
    """nabla_s v^m = d_s v^m + Gamma^m_{sk} v^k, indexed [s, m]."""
    return dv + np.einsum("msk,k->sm", ev.gamma, v)


def _box(ev: MetricEval, v, dv, d2v):
    """g^{ab} nabla_a nabla_b v^m."""
    G = ev.gamma
    nv = _nabla(ev, v, dv)
    # d_a (nabla_b v^m)
    d_nv = d2v + np.einsum("amsk,k->asm", ev.dgamma, v) + np.einsum("msk,ak->asm", G, dv)
    nnv = d_nv - np.einsum("cab,cm->abm", G, nv) + np.einsum("mac,bc->abm", G, nv)
    return np.einsum("ab,abm->m", ev.g_inv, nnv)


def _div_H(ev: MetricEval, H, dH):
    """nabla^nu H_{mu nu}."""
    G = ev.gamma
    nH = dH - np.einsum("cam,cn->amn", G, H) - np.einsum("can,mc->amn", G, H)
    return np.einsum("na,amn->m", ev.g_inv, nH)


def _probe_array(probes, dim):
    p = np.asarray(probes, dtype=complex)
    return p.reshape(-1, dim)


def constraint_residual(vfs: VelocityFieldSet, probes) -> np.ndarray:
    """g w_hat w_hat + alpha lambda div w_hat - (alpha lambda)^2 R / 6 + lambda^2 m^2."""
    p = vfs.params
    al = vfs.alpha_lambda
    out = []
    for z in _probe_array(probes, vfs.metric.dim):
        ev = eval_metric(vfs.metric, z, vfs.deriv_mode)
        wh, dwh, _, _ = vfs.jets(z, ev=ev)
        div = np.trace(_nabla(ev, wh, dwh))
        val = wh @ ev.g @ wh + al * div - al ** 2 * ev.ricci_scalar / 6 + (p.lam * p.m) ** 2
        out.append(val)
    return np.array(out)


def field_equation_residual(vfs: VelocityFieldSet, probes) -> np.ndarray:
    """LHS - RHS of the relativistic velocity field equation, lower index mu."""
    p = vfs.params
    a, lam, q = p.alpha, p.lam, p.q
    out = []
    for z in _probe_array(probes, vfs.metric.dim):
        ev = eval_metric(vfs.metric, z, vfs.deriv_mode, with_dR=True)
        wh, dwh, d2wh, _ = vfs.jets(z, ev=ev)
        H = field_strength(vfs.A, z)
        dH = field_strength_derivative(vfs.A, z)
        adv = ev.g @ np.einsum("r,rn->n", wh, _nabla(ev, wh, dwh))
        lhs = (adv / lam - q * H @ wh
               + 0.5 * a * (ev.g @ _box(ev, wh, dwh, d2wh) - ev.ricci @ wh))
        rhs = 0.5 * a * lam * (q * _div_H(ev, H, dH) + a / 6 * ev.dR)
        out.append(lhs - rhs)
    return np.array(out)


def nonrel_field_equation_residual(vfs: VelocityFieldSet, U, probes, t=0.0, dU=None) -> np.ndarray:
    """LHS - RHS of the Ito-form velocity equation with potential ``U(x, t)``.

    ``dU(x, t)`` gives the spatial gradient; central differences otherwise.
    """
    p = vfs.params
    a, m, q = p.alpha, p.m, p.q
    out = []
    for z in _probe_array(probes, vfs.metric.dim):
        ev = eval_metric(vfs.metric, z, vfs.deriv_mode, with_dR=True)
        wh, dwh, d2wh, dtwh = vfs.jets(z, t, ev=ev)
        H = field_strength(vfs.A, z)
        dH = field_strength_derivative(vfs.A, z)
        gradU = (np.asarray(dU(z, t), dtype=complex) if dU is not None
                 else fd_derivative(lambda x: U(x, t), z, 1))
        adv = np.einsum("k,km->m", wh, _nabla(ev, wh, dwh))
        lhs = (m * ev.g @ (dtwh + adv) - q * H @ wh
               + 0.5 * a * (ev.g @ _box(ev, wh, dwh, d2wh) - ev.ricci @ wh))
        dtA = (np.asarray(vfs.dA_dt(z, t), dtype=complex) if vfs.dA_dt is not None
               else np.zeros_like(wh))
        rhs = (a * q / (2 * m) * _div_H(ev, H, dH) - q * dtA - gradU
               + a ** 2 / (12 * m) * ev.dR)
        out.append(lhs - rhs)
    return np.array(out)


def hat_consistency(vfs: VelocityFieldSet, probes) -> np.ndarray:
    """w_hat - w - (alpha lambda / 2) Gamma^mu against an independent metric evaluation."""
    out = []
    for z in _probe_array(probes, vfs.metric.dim):
        ev = eval_metric(vfs.metric, z, vfs.deriv_mode)
        z1 = z[None, :]
        out.append(vfs.w_hat(z1)[0] - vfs.w(z1)[0] - 0.5 * vfs.alpha_lambda * ev.gamma_trace)
    return np.array(out)


def residual_report(probes, residuals, tolerance) -> str:
    """JSON array of {point, residual, tolerance, pass}."""
    rows = []
    for z, r in zip(np.atleast_2d(probes), residuals):
        r = np.atleast_1d(r)
        rows.append({
            "point": [[float(np.real(c)), float(np.imag(c))] for c in np.atleast_1d(z)],
            "residual": [[float(c.real), float(c.imag)] for c in r],
            "tolerance": tolerance,
            "pass": bool(np.max(np.abs(r)) < tolerance),
        })
    return json.dumps(rows, indent=1)


# ---------------------------------------------------------------------------
# Principal function
# ---------------------------------------------------------------------------

@dataclass
class PrincipalFunction:
    """S(z, tau) with gradient; ``grad_S`` is optional (central differences otherwise)."""

    S: Callable
    grad_S: Optional[Callable] = None

    def __call__(self, z, tau=0.0):
        return np.asarray(self.S(np.asarray(z, dtype=complex), tau), dtype=complex)

    def gradient(self, z, tau=0.0):
        z = np.asarray(z, dtype=complex)
        if self.grad_S is not None:
            return np.asarray(self.grad_S(z, tau), dtype=complex)
        return fd_derivative(lambda p: self(p, tau), z, 1)

    def tau_derivative(self, z, tau=0.0, h=1e-5):
        return (self(z, tau + h) - self(z, tau - h)) / (2 * h)


def principal_from_wave(wave: SymbolicWave, alpha: complex) -> PrincipalFunction:
    """S = alpha ln Psi with the principal log; gradients come from the log-derivative."""
    return PrincipalFunction(
        S=lambda z, tau=0.0: alpha * np.log(wave.psi(z, tau)),
        grad_S=lambda z, tau=0.0: alpha * wave.log_grad(z, tau),
    )


def loop_integral(S: PrincipalFunction, center, radius, plane=(0, 1), n=256, tau=0.0) -> complex:
    """Circulation of grad S around a small circle; nonzero signals a multivalued S."""
    center = np.asarray(center, dtype=complex)
    th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    i, j = plane
    total = 0j
    for t in th:
        z = center.copy()
        z[i] += radius * math.cos(t)
        z[j] += radius * math.sin(t)
        dz = np.zeros_like(center)
        dz[i] = -radius * math.sin(t)
        dz[j] = radius * math.cos(t)
        total += S.gradient(z, tau) @ dz
    return total * (2 * math.pi / n)


def check_single_valued(S: PrincipalFunction, loops, tol=1e-6):
    """Raise TopologyError if any (center, radius) loop has nonzero circulation."""
    for center, radius in loops:
        c = loop_integral(S, center, radius)
        if abs(c) > tol * max(1.0, radius):
            raise TopologyError(f"grad S has circulation {c:.3g} around {center}")


# ---------------------------------------------------------------------------
# Classical limit
# ---------------------------------------------------------------------------

@dataclass
class ClassicalTrajectory:
    tau: np.ndarray
    z: np.ndarray
    zdot: np.ndarray
    constraint: np.ndarray  # g zdot zdot + lambda^2 m^2 per step

    @property
    def max_constraint_drift(self) -> float:
        return float(np.max(np.abs(self.constraint - self.constraint[0])))


def _accel(metric: ChartedMetric, A: GaugePotential, qlam: float, z, v):
    g = metric.components(z)
    g_inv = np.linalg.inv(g)
    dg = (np.asarray(metric.dg(z), dtype=complex) if metric.dg is not None
          else fd_derivative(metric.components, z, 1))
    G = christoffel(g_inv, dg)
    acc = -np.einsum("mab,a,b->m", G, v, v)
    if qlam != 0:
        H = field_strength(A, z)
        acc = acc + qlam * g_inv @ (H @ v)
    return acc


def integrate_classical_limit(params: ProcessParams, metric: ChartedMetric, z0, zdot0, dtau,
                              n_steps, A: GaugePotential = None, tol=1e-6,
                              initial_tol=1e-10) -> ClassicalTrajectory:
    """RK4 for the geodesic + Lorentz-force equation z'' = -Gamma z' z' + lambda q g^-1 H z'."""
    A = A if A is not None else zero_potential(metric.dim)
    target = -(params.lam * params.m) ** 2
    z = np.asarray(z0, dtype=float).astype(complex)
    v = np.asarray(zdot0, dtype=float).astype(complex)

    def norm(z, v):
        return complex(v @ metric.components(z) @ v)

    c0 = norm(z, v) - target
    if abs(c0) > initial_tol:
        raise ValueError(f"initial velocity violates g zdot zdot = -lambda^2 m^2 by {abs(c0):.3g}")
    qlam = params.q * params.lam
    f = lambda z, v: (v, _accel(metric, A, qlam, z, v))
    zs, vs, cs = [z], [v], [c0]
    for _ in range(n_steps):
        k1 = f(z, v)
        k2 = f(z + 0.5 * dtau * k1[0], v + 0.5 * dtau * k1[1])
        k3 = f(z + 0.5 * dtau * k2[0], v + 0.5 * dtau * k2[1])
        k4 = f(z + dtau * k3[0], v + dtau * k3[1])
        z = z + dtau / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + dtau / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        c = norm(z, v) - target
        if abs(c - c0) > tol:
            raise StepSizeError(f"constraint drift {abs(c - c0):.3g} exceeds {tol:g}; reduce dtau")
        zs.append(z)
        vs.append(v)
        cs.append(c)
    tau = np.arange(n_steps + 1) * dtau
    return ClassicalTrajectory(tau, np.real(np.array(zs)), np.real(np.array(vs)), np.real(np.array(cs)))


def schwarzschild_circular_velocity(mass, r, lam_m=1.0):
    """(t-dot, phi-dot) of the equatorial circular geodesic, normalized to -lam_m^2."""
    omega = math.sqrt(mass / r ** 3)
    tdot = lam_m / math.sqrt(1 - 3 * mass / r)
    return np.array([tdot, 0.0, 0.0, omega * tdot])
