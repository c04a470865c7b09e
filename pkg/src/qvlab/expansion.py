"""Short-time conditional expectations of the process, assembled two independent ways.

For E_tau[g_{mu nu}(Z) o dZ^mu dZ^nu] the coefficients of dtau and dtau^2 are

  covariant: (n alpha lambda,  g w_hat w_hat + alpha lambda div w_hat - (alpha lambda)^2 R / 6)

  raw:       built from the coordinate moments E[dZ dZ], E[dZ dZ dZ], E[dZ dZ dZ dZ]
             (Gaussian pairings for the fourth moment) contracted with g, Gamma,
             d Gamma, with w2 = alpha lambda g^{-1} and Ito drift w.

Agreement of the two is the identity under test.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .geometry import GaugePotential, MetricEval, fd_derivative
from .process import EnsembleConfig, ProcessParams, iterate_block


def cond_exp_potential(U, z) -> complex:
    """E_tau[U(Z_tau)] = U(z): the value is known at time tau."""
    return complex(U(np.asarray(z, dtype=complex)))


def cond_exp_trace(ev: MetricEval, params: ProcessParams) -> complex:
    """dtau coefficient of E_tau[g dZ dZ]: n alpha lambda."""
    return ev.dim * params.alpha * params.lam


def drift_jet(field, ev: MetricEval, params: ProcessParams):
    """(w, d_s w^m) at ``ev.point`` from a VelocityFieldSet, a callable w(z), or a (w, dw) pair."""
    z = ev.point
    if isinstance(field, tuple):
        w, dw = field
        return np.asarray(w, dtype=complex), np.asarray(dw, dtype=complex)
    if hasattr(field, "jets"):
        wh, dwh, _, _ = field.jets(z, ev=ev)
        al = params.alpha * params.lam
        return wh - 0.5 * al * ev.gamma_trace, dwh - 0.5 * al * ev.dgamma_trace()
    w_fn = lambda p: np.asarray(field(p), dtype=complex)
    return w_fn(z), fd_derivative(w_fn, z, 1)


def hat_drift(w, dw, ev: MetricEval, params: ProcessParams):
    """w_hat = w + (alpha lambda / 2) Gamma^mu and its partial derivatives."""
    al = params.alpha * params.lam
    return w + 0.5 * al * ev.gamma_trace, dw + 0.5 * al * ev.dgamma_trace()


def divergence(ev: MetricEval, v, dv) -> complex:
    return complex(np.trace(dv) + np.einsum("mmk,k->", ev.gamma, v))


def cond_exp_linear(A: GaugePotential, field, ev: MetricEval, params: ProcessParams) -> complex:
    """dtau coefficient of E_tau[A_mu o dZ^mu]: A.w_hat + (alpha lambda / 2) nabla_mu A^mu."""
    z = ev.point
    w, dw = drift_jet(field, ev, params)
    wh, _ = hat_drift(w, dw, ev, params)
    a = A(z)
    da = A.jacobian(z)  # [nu, mu] = d_nu A_mu
    div = np.einsum("ab,ab->", ev.g_inv, da) - np.einsum("ab,cab,c->", ev.g_inv, ev.gamma, a)
    return complex(a @ wh + 0.5 * params.alpha * params.lam * div)


def cond_exp_quadratic_covariant(field, ev: MetricEval, params: ProcessParams):
    al = params.alpha * params.lam
    w, dw = drift_jet(field, ev, params)
    wh, dwh = hat_drift(w, dw, ev, params)
    second = wh @ ev.g @ wh + al * divergence(ev, wh, dwh) - al ** 2 * ev.ricci_scalar / 6
    return complex(ev.dim * al), complex(second)


@dataclass
class MomentAssembly:
    point: np.ndarray
    first: complex  # dtau coefficient
    second: complex  # dtau^2 coefficient
    m2: np.ndarray  # dtau^2 part of E[dZ^a dZ^b]
    m3: np.ndarray  # dtau^2 part of E[dZ^a dZ^b dZ^c]
    m4: np.ndarray  # dtau^2 part of E[dZ^a dZ^b dZ^c dZ^d]
    terms: dict

    def symmetry_defect(self) -> float:
        """Largest deviation of m2, m3, m4 from total symmetry."""
        worst = float(np.max(np.abs(self.m2 - self.m2.T)))
        for t in (self.m3, self.m4):
            for perm in _transpositions(t.ndim):
                worst = max(worst, float(np.max(np.abs(t - t.transpose(perm)))))
        return worst


def _transpositions(k):
    for i in range(k - 1):
        p = list(range(k))
        p[i], p[i + 1] = p[i + 1], p[i]
        yield tuple(p)


def _pairings(W):
    """Gaussian fourth moment W^{ab} W^{cd} + W^{ac} W^{bd} + W^{ad} W^{bc}."""
    return (np.einsum("ab,cd->abcd", W, W) + np.einsum("ac,bd->abcd", W, W)
            + np.einsum("ad,bc->abcd", W, W))


def assemble_moments(field, ev: MetricEval, params: ProcessParams) -> MomentAssembly:
    al = params.alpha * params.lam
    w, dw = drift_jet(field, ev, params)  # dw[s, m] = d_s w^m
    W = al * ev.g_inv
    dW = al * ev.dg_inv  # [s, a, b]
    d2W = al * ev.d2g_inv  # [t, s, a, b]
    G, dG, g = ev.gamma, ev.dgamma, ev.g

    m2 = (np.einsum("a,b->ab", w, w)
          + 0.5 * np.einsum("r,rab->ab", w, dW)
          + 0.5 * np.einsum("ar,rb->ab", W, dw)
          + 0.5 * np.einsum("br,ra->ab", W, dw)
          + 0.25 * np.einsum("rs,rsab->ab", W, d2W))
    wW = np.einsum("a,bc->abc", w, W)
    WdW = np.einsum("ak,kbc->abc", W, dW)
    m3 = (wW + wW.transpose(1, 0, 2) + wW.transpose(2, 1, 0)
          + 0.5 * (WdW + WdW.transpose(1, 0, 2) + WdW.transpose(2, 1, 0)))
    m4 = _pairings(W)

    terms = {
        "drift": complex(np.einsum("ab,ab->", g, m2)),
        "third": complex(np.einsum("mn,mrs,nrs->", g, G, m3)),
        "gamma_gamma": complex(0.25 * np.einsum("mn,mrs,nkl,rskl->", g, G, G, m4)),
        "d_gamma": complex(np.einsum("mn,kmrs,nkrs->", g, dG, m4) / 3
                           + np.einsum("mn,mkl,lrs,nkrs->", g, G, G, m4) / 3),
    }
    first = complex(np.einsum("ab,ab->", g, W))
    return MomentAssembly(ev.point, first, sum(terms.values()), m2, m3, m4, terms)


def cond_exp_quadratic_raw(field, ev: MetricEval, params: ProcessParams):
    asm = assemble_moments(field, ev, params)
    return asm.first, asm.second


# ---------------------------------------------------------------------------
# Monte Carlo cross-checks for the dtau coefficients
# ---------------------------------------------------------------------------

def _one_step(params, metric, z0, dt, n_paths, seed, drift=None):
    cfg = EnsembleConfig(n_paths, dt, dt, seed, tuple(np.asarray(z0, dtype=complex)))
    z1_parts = []
    for block, lanes in _rng.block_layout(n_paths):
        last = None
        for _, _, z, alive in iterate_block(drift, params, cfg, metric, None, block):
            last = z
        z1_parts.append(last[:lanes])
    return np.concatenate(z1_parts)


def _mean_se(x):
    return complex(x.mean()), float(np.sqrt((x.real.var(ddof=1) + x.imag.var(ddof=1)) / x.size))


def mc_trace(params: ProcessParams, metric, z0, dt, n_paths, seed, drift=None):
    """Ensemble mean of g(z0) dZ dZ / dt over one step, with its standard error."""
    z0 = np.asarray(z0, dtype=complex)
    dz = _one_step(params, metric, z0, dt, n_paths, seed, drift) - z0
    g = metric.components(z0)
    return _mean_se(np.einsum("pa,ab,pb->p", dz, g, dz) / dt)


def mc_linear(A: GaugePotential, params: ProcessParams, metric, z0, dt, n_paths, seed, w=None):
    """Mean of the Stratonovich increment A o dZ / dt over one step.

    The Ito part A(z0).(dZ - w dt) has zero mean and is subtracted as a control variate.
    """
    z0 = np.asarray(z0, dtype=complex)
    w = np.zeros(z0.shape, dtype=complex) if w is None else np.asarray(w, dtype=complex)
    z1 = _one_step(params, metric, z0, dt, n_paths, seed, w)
    dz = z1 - z0
    a0 = A(z0)
    strat = 0.5 * np.einsum("pa,pa->p", a0[None, :] + A(z1), dz)
    control = dz @ a0 - (a0 @ w) * dt
    return _mean_se((strat - control) / dt)


def richardson_zero(dts, values):
    """Linear extrapolation to dt = 0 from two step sizes."""
    (h1, h2), (v1, v2) = dts, values
    return v2 + (v2 - v1) * h2 / (h1 - h2)


def identity_report_csv(rows) -> str:
    """rows: dicts with metric, point, raw, covariant; emits metric,probe,...,diff."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["metric", "probe", "alpha_re", "alpha_im", "raw1_re", "raw1_im", "raw2_re", "raw2_im",
                 "cov1_re", "cov1_im", "cov2_re", "cov2_im", "diff"])
    for r in rows:
        raw, cov, a = r["raw"], r["covariant"], complex(r["alpha"])
        diff = max(abs(raw[0] - cov[0]), abs(raw[1] - cov[1]))
        probe = " ".join(f"{float(np.real(c)):.6g}" for c in r["point"])
        wr.writerow([r["metric"], probe, f"{a.real:.6g}", f"{a.imag:.6g}",
                     *(f"{v:.15g}" for c in (*raw, *cov) for v in (c.real, c.imag)), f"{diff:.3e}"])
    return buf.getvalue()
