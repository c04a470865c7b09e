"""Built-in metrics with closed-form (sympy-generated) derivatives.

The component formulas are valid off the real slice, so every callable here
accepts complex points.  Derivative callables return the derivative axes
first in the tensor part: ``dg(z)[s, a, b] = d_s g_ab``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import sympy as sp

from .geometry import ChartedMetric, GaugePotential, ObserverField


def tensor_function(exprs, symbols):
    """Lambdify an array of sympy expressions into a vectorized numpy callable.

    The returned function maps points ``(..., n)`` to ``(...,) + shape``.
    """
    arr = sp.Array(exprs)
    shape = arr.shape
    flat = list(sp.flatten(arr)) if shape else [arr]
    fn = sp.lambdify(symbols, flat, modules="numpy", cse=True)

    def evaluate(z):
        z = np.asarray(z, dtype=complex)
        batch = z.shape[:-1]
        vals = fn(*[z[..., k] for k in range(z.shape[-1])])
        out = np.empty(batch + (len(flat),), dtype=complex)
        for i, v in enumerate(vals):
            out[..., i] = v
        return out.reshape(batch + tuple(shape))

    return evaluate


def derivative_array(expr_array, symbols):
    """Array with a new leading derivative axis."""
    return sp.Array([sp.diff(expr_array, s) for s in symbols])


def symbolic_metric(name, symbols, g_matrix, signature, observer=None, domain=None,
                    flat=False, params=None) -> ChartedMetric:
    g_arr = sp.Array(sp.Matrix(g_matrix).tolist())
    dg = derivative_array(g_arr, symbols)
    d2g = derivative_array(dg, symbols)
    d3g = derivative_array(d2g, symbols)
    obs = None
    if observer is not None:
        obs = ObserverField(tensor_function(sp.Array(list(observer)), symbols))
    return ChartedMetric(
        dim=len(symbols),
        g=tensor_function(g_arr, symbols),
        dg=tensor_function(dg, symbols),
        d2g=tensor_function(d2g, symbols),
        d3g=tensor_function(d3g, symbols),
        signature=signature,
        name=name,
        domain=domain,
        flat=flat,
        observer=obs,
        params=dict(params or {}),
    )


def symbolic_potential(symbols, components) -> GaugePotential:
    A = sp.Array(list(components))
    dA = derivative_array(A, symbols)
    d2A = derivative_array(dA, symbols)
    return GaugePotential(tensor_function(A, symbols), tensor_function(dA, symbols),
                          tensor_function(d2A, symbols))


def coords(n):
    return sp.symbols(f"x0:{n}")


@lru_cache(maxsize=None)
def minkowski(n: int = 4) -> ChartedMetric:
    x = coords(n)
    eta = sp.diag(-1, *([1] * (n - 1)))
    return symbolic_metric("minkowski", x, eta, "lorentzian",
                           observer=[1] + [0] * (n - 1), flat=True, params={"n": n})


@lru_cache(maxsize=None)
def euclidean(n: int = 3) -> ChartedMetric:
    x = coords(n)
    return symbolic_metric("euclidean", x, sp.eye(n), "riemannian", flat=True,
                           params={"n": n})


def _away_from_poles(theta_index):
    def inside(z):
        return abs(np.sin(z[theta_index])) > 1e-8
    return inside


@lru_cache(maxsize=None)
def sphere2(radius: float = 1.0) -> ChartedMetric:
    th, ph = sp.symbols("theta phi")
    a = sp.nsimplify(radius)
    g = sp.diag(a ** 2, a ** 2 * sp.sin(th) ** 2)
    return symbolic_metric("sphere2", (th, ph), g, "riemannian",
                           domain=_away_from_poles(0), params={"radius": radius})


@lru_cache(maxsize=None)
def schwarzschild(mass: float = 1.0) -> ChartedMetric:
    t, r, th, ph = sp.symbols("t r theta phi")
    M = sp.nsimplify(mass)
    f = 1 - 2 * M / r
    g = sp.diag(-f, 1 / f, r ** 2, r ** 2 * sp.sin(th) ** 2)
    poles = _away_from_poles(2)

    def exterior(z):
        return z[1].real > 2 * mass and poles(z)

    return symbolic_metric("schwarzschild", (t, r, th, ph), g, "lorentzian",
                           observer=[1 / sp.sqrt(f), 0, 0, 0], domain=exterior,
                           params={"mass": mass})


@lru_cache(maxsize=None)
def perturbed_flat(n: int = 3, eps: float = 0.1, signature: str = "riemannian") -> ChartedMetric:
    """Flat metric plus a smooth symmetric sine bump of amplitude ``eps``."""
    x = coords(n)
    e = sp.nsimplify(eps)
    base = sp.eye(n) if signature == "riemannian" else sp.diag(-1, *([1] * (n - 1)))
    g = sp.zeros(n, n)
    for a in range(n):
        for b in range(a, n):
            phase = sp.Rational(3 * (a + 1) + b, 10)
            bump = sp.sin(x[a] + 2 * x[b] + phase) + sp.sin(2 * x[a] + x[b] - phase)
            g[a, b] = g[b, a] = base[a, b] + e * bump / (2 if a != b else 1)
    observer = None
    if signature == "lorentzian":
        observer = [1 / sp.sqrt(-g[0, 0])] + [0] * (n - 1)
    return symbolic_metric("perturbed-flat", x, g, signature, observer=observer,
                           params={"n": n, "eps": eps, "signature": signature})


REGISTRY = {
    "minkowski": minkowski,
    "euclidean": euclidean,
    "sphere2": sphere2,
    "schwarzschild": schwarzschild,
    "perturbed-flat": perturbed_flat,
}


def get_metric(name: str, **params) -> ChartedMetric:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(**params)
