"""Grid solvers for the complex diffusion equation, its stationary modes, and Klein-Gordon checks.

Non-relativistic form (time t, spatial chart):

    alpha d_t Psi = -K Psi,   K = (alpha^2 / 2m) [D^2 - xi R] + U,   D = nabla - (q / alpha) A.

Relativistic form (proper time tau, full chart):

    d_tau Psi = -(alpha lambda / 2) [D^2 - xi R] Psi.

Both are integrated backward from a terminal condition.  ``xi`` is 1/6 by
default; see ``curvature_coupling``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import EigenError, GridError, IllPosedError
from .geometry import ChartedMetric, GaugePotential, eval_metric
from .hamilton_jacobi import PrincipalFunction, as_wave, check_single_valued
from .process import ProcessParams

MIN_POINTS = 16
STABILITY = 0.5


def curvature_coupling(mode: str, n: int) -> float:
    if mode == "R/6":
        return 1.0 / 6.0
    if mode == "conformal":
        return (n - 2) / (4.0 * (n - 1)) if n > 1 else 0.0
    if mode == "off":
        return 0.0
    raise ValueError(f"unknown curvature mode {mode!r}")


# ---------------------------------------------------------------------------
# Grids and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Tensor-product grid.  Dirichlet grids hold interior points only."""

    extents: tuple
    points: tuple
    boundary: str = "periodic"
    dt: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(tuple(map(float, e)) for e in self.extents))
        object.__setattr__(self, "points", tuple(int(n) for n in self.points))
        if len(self.extents) != len(self.points):
            raise GridError("extents and points must have the same length")
        if any(n < MIN_POINTS for n in self.points):
            raise GridError(f"every axis needs at least {MIN_POINTS} points")
        if any(b <= a for a, b in self.extents):
            raise GridError("extents must be increasing")
        if self.boundary not in ("periodic", "dirichlet"):
            raise GridError(f"unknown boundary policy {self.boundary!r}")
        if self.dt <= 0:
            raise GridError("dt must be positive")

    @property
    def ndim(self):
        return len(self.points)

    @property
    def spacing(self):
        if self.boundary == "periodic":
            return tuple((b - a) / n for (a, b), n in zip(self.extents, self.points))
        return tuple((b - a) / (n + 1) for (a, b), n in zip(self.extents, self.points))

    def axis(self, k):
        a, _ = self.extents[k]
        h = self.spacing[k]
        offset = 0 if self.boundary == "periodic" else 1
        return a + h * (np.arange(self.points[k]) + offset)

    def mesh(self):
        """Grid points as an array of shape points + (ndim,)."""
        axes = np.meshgrid(*[self.axis(k) for k in range(self.ndim)], indexing="ij")
        return np.stack(axes, axis=-1)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def wavenumbers(self, k):
        return 2 * np.pi * np.fft.fftfreq(self.points[k], d=self.spacing[k])


@dataclass
class ComplexField:
    grid: GridSpec
    values: np.ndarray
    time: float = 0.0
    weights: Optional[np.ndarray] = None  # sqrt|g| on the grid; 1 if omitted

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.points:
            raise GridError(f"values shape {self.values.shape} does not match grid {self.grid.points}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("field has non-finite values")

    @property
    def norm(self) -> float:
        w = 1.0 if self.weights is None else self.weights
        return float(np.sqrt(np.sum(w * np.abs(self.values) ** 2) * self.grid.cell_volume))

    def at(self, point) -> complex:
        """Linear interpolation at a point (1D) or nearest node (higher dimensions)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if self.grid.ndim == 1:
            x = self.grid.axis(0)
            return complex(np.interp(point[0], x, self.values.real)
                           + 1j * np.interp(point[0], x, self.values.imag))
        idx = tuple(int(np.argmin(np.abs(self.grid.axis(k) - point[k]))) for k in range(self.grid.ndim))
        return complex(self.values[idx])

    @classmethod
    def from_function(cls, grid: GridSpec, f: Callable, time=0.0):
        return cls(grid, np.asarray(f(grid.mesh()), dtype=complex).reshape(grid.points), time)


@dataclass
class FieldSeries:
    """Backward evolution output, ordered from the terminal time toward the initial time."""

    fields: list
    norms: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def times(self):
        return np.array([f.time for f in self.fields])

    @property
    def final(self) -> ComplexField:
        return self.fields[-1]

    def max_norm_step_change(self) -> float:
        return float(np.max(np.abs(np.diff(self.norms)))) if len(self.norms) > 1 else 0.0


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def _metric_diagonal(metric: ChartedMetric, pts):
    g = metric.components(pts)
    diag = np.diagonal(g, axis1=-2, axis2=-1)
    off = g - np.einsum("...i,ij->...ij", diag, np.eye(g.shape[-1]))
    if np.max(np.abs(off)) > 1e-12 * max(1.0, float(np.max(np.abs(diag)))):
        raise GridError(f"grid operators need a diagonal metric; {metric.name!r} is not")
    return diag


def _sqrt_det(diag):
    return np.sqrt(np.abs(np.prod(diag, axis=-1)))


def covariant_laplacian(grid: GridSpec, metric: ChartedMetric, A: GaugePotential = None,
                        alpha: complex = 1.0, q: float = 0.0, xi: float = 0.0):
    """Sparse D^2 - xi R on the grid, plus the sqrt|g| weights.

    Flux form (1/sqrt g) d_i (sqrt g g^ii D_i) with link factors exp(-(q/alpha) A_i h)
    on each edge, so the operator is Hermitian in the sqrt|g| inner product when the
    link factors have unit modulus.
    """
    if grid.ndim != metric.dim:
        raise GridError(f"grid has {grid.ndim} axes but chart {metric.name!r} has {metric.dim}")
    shape = grid.points
    size = int(np.prod(shape))
    mesh = grid.mesh()
    weight = _sqrt_det(_metric_diagonal(metric, mesh))
    index = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    for k in range(grid.ndim):
        h = grid.spacing[k]
        n = shape[k]
        mid = mesh.copy().astype(float)
        mid[..., k] += 0.5 * h
        dmid = _metric_diagonal(metric, mid)
        c = _sqrt_det(dmid) / dmid[..., k]
        if A is not None and q != 0:
            link = np.exp(-(q / alpha) * A(mid)[..., k] * h)
        else:
            link = np.ones(shape, dtype=complex)
        # edge j -> j+1 along axis k, stored at node j
        lo = index
        hi = np.roll(index, -1, axis=k)
        valid = np.ones(shape, dtype=bool)
        if grid.boundary == "dirichlet":
            sl = [slice(None)] * grid.ndim
            sl[k] = n - 1
            valid[tuple(sl)] = False
        scale = c / h ** 2
        w_lo, w_hi = weight, np.roll(weight, -1, axis=k)
        # row lo: c (U f_hi - f_lo) / (h^2 w_lo)
        rows += [lo[valid], lo.ravel()]
        cols += [hi[valid], lo.ravel()]
        vals += [(scale * link / w_lo)[valid], -(scale / w_lo).ravel()]
        # row hi: -c (f_hi - U^-1 f_lo) / (h^2 w_hi)
        rows += [hi[valid], hi[valid]]
        cols += [lo[valid], hi[valid]]
        vals += [(scale / link / w_hi)[valid], -(scale / w_hi)[valid]]
        if grid.boundary == "dirichlet":
            # flux through the lower boundary edge (ghost node below index 0)
            sl = [slice(None)] * grid.ndim
            sl[k] = 0
            first = tuple(sl)
            ghost = mesh[first].copy().astype(float)
            ghost[..., k] -= 0.5 * h
            dg_ = _metric_diagonal(metric, ghost)
            cg = _sqrt_det(dg_) / dg_[..., k]
            rows.append(index[first].ravel())
            cols.append(index[first].ravel())
            vals.append(-(cg / h ** 2 / weight[first]).ravel())
    op = sps.csr_matrix((np.concatenate(vals).astype(complex),
                         (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    if xi != 0 and not metric.flat:
        R = np.array([eval_metric(metric, p).ricci_scalar for p in mesh.reshape(-1, grid.ndim)])
        op = op - xi * sps.diags(R)
    return op.tocsc(), weight


def nonrel_generator(grid, params: ProcessParams, metric, A=None, U=None, t=0.0, curvature="R/6"):
    """Sparse K = (alpha^2 / 2m)(D^2 - xi R) + U."""
    xi = curvature_coupling(curvature, metric.dim)
    lap, weight = covariant_laplacian(grid, metric, A, params.alpha, params.q, xi)
    K = (params.alpha ** 2 / (2 * params.m)) * lap
    if U is not None:
        K = K + sps.diags(np.asarray(U(grid.mesh(), t), dtype=complex).ravel())
    return K.tocsc(), weight


def _significant_wavenumber(values, grid: GridSpec, rel=1e-8):
    spec = np.abs(np.fft.fftn(values))
    if spec.max() == 0:
        return 0.0
    ks = np.meshgrid(*[grid.wavenumbers(k) for k in range(grid.ndim)], indexing="ij")
    k2 = sum(kk ** 2 for kk in ks)
    return float(np.sqrt(np.max(k2[spec > rel * spec.max()])))


def check_resolution(terminal: ComplexField, params: ProcessParams, U_values=None):
    """Step-size check on the fastest scale the data actually excites; GridError on failure."""
    dt = terminal.grid.dt
    kmax = _significant_wavenumber(terminal.values, terminal.grid)
    rate = abs(params.alpha) / (2 * params.m) * kmax ** 2
    if U_values is not None:
        rate = max(rate, float(np.max(np.abs(U_values))) / max(abs(params.alpha), 1e-300))
    if rate * dt >= STABILITY:
        raise GridError(f"dt = {dt:g} too coarse for rate {rate:.3g}; use dt < {STABILITY / rate:.3g}")
    return rate * dt


def evolve_backward_nonrel(terminal: ComplexField, params: ProcessParams, metric: ChartedMetric,
                           A: GaugePotential = None, U: Callable = None, t_span=(0.0, 1.0),
                           curvature="R/6", time_dependent_U=False, store_every=1) -> FieldSeries:
    """Crank-Nicolson from Psi(T) to Psi(t) for alpha d_t Psi = -K Psi.

    One step: (I - dt/(2 alpha) K) Psi_{n-1} = (I + dt/(2 alpha) K) Psi_n.
    """
    grid = terminal.grid
    t0, T = map(float, t_span)
    steps = (T - t0) / grid.dt
    if steps < 0.5 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise GridError("t_span must be a positive whole number of steps")
    steps = int(round(steps))
    dt = grid.dt
    a = params.alpha
    eye = sps.identity(int(np.prod(grid.points)), dtype=complex, format="csc")

    def factor(t_mid):
        K, w = nonrel_generator(grid, params, metric, A, U, t_mid, curvature)
        return spla.splu((eye - dt / (2 * a) * K).tocsc()), (eye + dt / (2 * a) * K).tocsr(), w

    U_vals = U(grid.mesh(), T) if U is not None else None
    check_resolution(terminal, params, U_vals)
    lu, rhs, weight = factor(T - 0.5 * dt)
    psi = terminal.values.ravel().copy()
    fields = [ComplexField(grid, terminal.values.copy(), T, weight)]
    norms = [fields[0].norm]
    for n in range(steps):
        t_mid = T - (n + 0.5) * dt
        if time_dependent_U and n > 0:
            lu, rhs, _ = factor(t_mid)
        psi = lu.solve(rhs @ psi)
        f = ComplexField(grid, psi.reshape(grid.points), T - (n + 1) * dt, weight)
        norms.append(f.norm)
        if (n + 1) % store_every == 0 or n + 1 == steps:
            fields.append(f)
    return FieldSeries(fields, np.array(norms), {"scheme": "crank-nicolson", "steps": steps,
                                                  "curvature": curvature})


def _relativistic_symbol(grid: GridSpec, metric: ChartedMetric, params: ProcessParams, A, xi):
    """Eigenvalue s_k of D^2 - xi R on exp(i k.x) for a constant metric and potential."""
    g_inv = np.linalg.inv(metric.components(np.zeros(metric.dim)))
    A0 = np.zeros(metric.dim, dtype=complex) if A is None else A(np.zeros(metric.dim))
    ks = np.meshgrid(*[grid.wavenumbers(k) for k in range(grid.ndim)], indexing="ij")
    P = np.stack([1j * kk - params.q / params.alpha * A0[i] for i, kk in enumerate(ks)], axis=-1)
    return np.einsum("...a,ab,...b->...", P, g_inv, P)


def evolve_backward_rel(terminal: ComplexField, params: ProcessParams, metric: ChartedMetric,
                        A: GaugePotential = None, tau_span=(0.0, 1.0), curvature="R/6",
                        n_out=1, growth_tol=1e-12) -> FieldSeries:
    """Backward evolution of d_tau Psi = -(alpha lambda / 2)[D^2 - xi R] Psi.

    Flat periodic charts with constant A use the exact Fourier multiplier; other
    charts use Crank-Nicolson.  Data with weight on modes the backward flow
    amplifies raises IllPosedError.
    """
    grid = terminal.grid
    tau0, T = map(float, tau_span)
    al = params.alpha * params.lam
    xi = curvature_coupling(curvature, metric.dim)
    spectral = metric.flat and grid.boundary == "periodic" and (A is None or _is_constant(A, grid))
    if spectral:
        s = _relativistic_symbol(grid, metric, params, A, xi)
        rate = 0.5 * al * s  # d/d(T - tau) log Psi_k
        coeff = np.fft.fftn(terminal.values)
        significant = np.abs(coeff) > 1e-12 * max(np.abs(coeff).max(), 1e-300)
        growing = significant & (rate.real > growth_tol * np.maximum(np.abs(rate), 1.0))
        if np.any(growing):
            raise IllPosedError(
                f"{int(growing.sum())} data modes grow under backward flow (max rate "
                f"{rate.real[growing].max():.3g}); the terminal datum must avoid them")
        taus = np.linspace(T, tau0, n_out + 1)
        fields = [ComplexField(grid, np.fft.ifftn(coeff * np.exp(rate * (T - t))), t) for t in taus]
        fields[0] = ComplexField(grid, terminal.values.copy(), T)
        return FieldSeries(fields, np.array([f.norm for f in fields]), {"scheme": "spectral"})

    lap, weight = covariant_laplacian(grid, metric, A, params.alpha, params.q, xi)
    L = 0.5 * al * lap
    _check_fd_wellposed(L, terminal.values.ravel(), growth_tol)
    steps = int(round((T - tau0) / grid.dt))
    if steps < 1 or abs(steps * grid.dt - (T - tau0)) > 1e-9 * max(1.0, T - tau0):
        raise GridError("tau_span must be a positive whole number of steps")
    dt = grid.dt
    eye = sps.identity(lap.shape[0], dtype=complex, format="csc")
    lu = spla.splu((eye - 0.5 * dt * L).tocsc())
    rhs = (eye + 0.5 * dt * L).tocsr()
    psi = terminal.values.ravel().copy()
    fields = [ComplexField(grid, terminal.values.copy(), T, weight)]
    norms = [fields[0].norm]
    every = max(1, steps // n_out)
    for n in range(steps):
        psi = lu.solve(rhs @ psi)
        f = ComplexField(grid, psi.reshape(grid.points), T - (n + 1) * dt, weight)
        norms.append(f.norm)
        if (n + 1) % every == 0 or n + 1 == steps:
            fields.append(f)
    return FieldSeries(fields, np.array(norms), {"scheme": "crank-nicolson"})


def _is_constant(A: GaugePotential, grid: GridSpec) -> bool:
    vals = A(grid.mesh())
    return bool(np.allclose(vals, vals.reshape(-1, vals.shape[-1])[0], atol=1e-14))


def _check_fd_wellposed(L, data, tol, max_size=4096):
    if L.shape[0] > max_size:
        raise GridError(f"curved relativistic grids are limited to {max_size} points")
    mu, V = sla.eig(L.toarray())
    coeff = np.linalg.solve(V, data)
    significant = np.abs(coeff) > 1e-10 * max(np.abs(coeff).max(), 1e-300)
    growing = significant & (mu.real > tol * np.maximum(np.abs(mu), 1.0))
    if np.any(growing):
        raise IllPosedError(f"{int(growing.sum())} data modes grow under backward flow")


# ---------------------------------------------------------------------------
# Stationary modes
# ---------------------------------------------------------------------------

@dataclass
class Eigenpair:
    energy: complex
    mode: ComplexField
    residual: float


def stationary_eigs_nonrel(params: ProcessParams, metric: ChartedMetric, A=None, U=None,
                           grid: GridSpec = None, k_max=4, curvature="R/6") -> list:
    """Lowest modes of K Phi = E Phi, K = (alpha^2 / 2m)(D^2 - xi R) + U.

    Modes are ordered by Re(-E / alpha^2), i.e. ground state first for any phase.
    """
    K, weight = nonrel_generator(grid, params, metric, A, U, 0.0, curvature)
    a2 = params.alpha ** 2
    M = (-K / a2).toarray()
    try:
        if np.allclose(M, M.conj().T, atol=1e-12 * np.abs(M).max()) and np.allclose(weight, weight.flat[0]):
            mu, V = sla.eigh(M, subset_by_index=[0, min(k_max, M.shape[0]) - 1])
        else:
            mu, V = sla.eig(M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(mu.real, kind="stable")[:k_max]
    pairs = []
    for i in order:
        E = -a2 * mu[i]
        v = V[:, i]
        res = float(np.linalg.norm(K @ v - E * v) / np.linalg.norm(v))
        scale = max(1.0, float(abs(E)))
        if not np.isfinite(res) or res > 1e-8 * scale * max(1.0, np.abs(M).max()):
            raise EigenError(f"eigenpair {int(i)} residual {res:.3g} too large")
        mode = ComplexField(grid, v.reshape(grid.points), 0.0, weight)
        mode = ComplexField(grid, mode.values / mode.norm, 0.0, weight)
        pairs.append(Eigenpair(complex(E), mode, res))
    return pairs


# ---------------------------------------------------------------------------
# Klein-Gordon and wavefunctions
# ---------------------------------------------------------------------------

def klein_gordon_residual(phi, params: ProcessParams, metric: ChartedMetric, A: GaugePotential = None,
                          probes=(), curvature="R/6", deriv_mode=None) -> np.ndarray:
    """[(nabla - qA/alpha)^2 - xi R + m^2/alpha^2] Phi at each probe.

    Evaluated as Phi (P.P + div P - xi R + m^2/alpha^2) with P = d ln Phi - (q/alpha) A.
    """
    wave = as_wave(phi, metric.dim)
    a, q, m = params.alpha, params.q, params.m
    xi = curvature_coupling(curvature, metric.dim)
    if deriv_mode is None:
        deriv_mode = "analytic" if (wave.analytic and metric.has_analytic_derivatives) else "finite_difference"
    out = []
    for z in np.asarray(probes, dtype=complex).reshape(-1, metric.dim):
        ev = eval_metric(metric, z, deriv_mode)
        L, dL, _, _ = wave.jet(z)
        P = L
        dP = dL
        if A is not None and q != 0:
            P = P - q / a * A(z)
            dP = dP - q / a * A.jacobian(z)
        div = np.einsum("ab,ab->", ev.g_inv, dP) - np.einsum("ab,cab,c->", ev.g_inv, ev.gamma, P)
        val = P @ ev.g_inv @ P + div - xi * ev.ricci_scalar + m ** 2 / a ** 2
        out.append(complex(wave.psi(z) * val))
    return np.array(out)


@dataclass
class Wavefunction:
    S: PrincipalFunction
    params: ProcessParams

    def _exponent(self, z, tau):
        p = self.params
        return self.S(z, tau) + p.lam * p.m ** 2 * tau / 2

    def __call__(self, z, tau=0.0):
        return np.exp(self._exponent(z, tau) / self.params.alpha)

    def density(self, z, tau=0.0):
        """|Psi|^2 from the polar form of alpha."""
        p = self.params
        S = self.S(z, tau)
        c = p.lam * p.m ** 2 * tau / 2
        return np.exp(2 / p.rho * (math.cos(p.phi) * (S.real + c) + math.sin(p.phi) * S.imag))


def wavefunction_from_principal(S: PrincipalFunction, params: ProcessParams, loops=None) -> Wavefunction:
    """Psi = exp{(S + lambda m^2 tau / 2) / alpha}; ``loops`` are (center, radius) single-valuedness probes."""
    if loops:
        check_single_valued(S, loops)
    return Wavefunction(S, params)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def field_header(f: ComplexField) -> dict:
    return {
        "dims": list(f.grid.points),
        "extents": [list(e) for e in f.grid.extents],
        "boundary": f.grid.boundary,
        "dt": f.grid.dt,
        "time": f.time,
        "dtype": "float64-interleaved-re-im",
        "order": "C",
    }


def write_field(f: ComplexField, path_stem) -> tuple:
    """Binary (interleaved Re/Im float64) plus a JSON header; returns both paths."""
    data = np.empty(f.values.shape + (2,), dtype="<f8")
    data[..., 0] = f.values.real
    data[..., 1] = f.values.imag
    bin_path, json_path = f"{path_stem}.bin", f"{path_stem}.json"
    data.tofile(bin_path)
    header = field_header(f)
    header["sha256"] = hashlib.sha256(data.tobytes()).hexdigest()
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    return bin_path, json_path


def read_field(path_stem) -> ComplexField:
    with open(f"{path_stem}.json") as fh:
        header = json.load(fh)
    data = np.fromfile(f"{path_stem}.bin", dtype="<f8").reshape(tuple(header["dims"]) + (2,))
    grid = GridSpec(header["extents"], header["dims"], header["boundary"], header["dt"])
    return ComplexField(grid, data[..., 0] + 1j * data[..., 1], header["time"])


def write_slice_csv(f: ComplexField, path, axis=0, index=None):
    """1D slice as CSV columns x, re, im (other axes fixed at ``index`` or the middle)."""
    sl = [g // 2 for g in f.grid.points] if index is None else list(index)
    sl[axis] = slice(None)
    vals = f.values[tuple(sl)]
    x = f.grid.axis(axis)
    with open(path, "w") as fh:
        fh.write("x,re,im\n")
        for xi, v in zip(x, vals):
            fh.write(f"{xi:.12g},{v.real:.12g},{v.imag:.12g}\n")
