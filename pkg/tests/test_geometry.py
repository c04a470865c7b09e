import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvlab.charts import get_metric, minkowski, perturbed_flat, schwarzschild, sphere2
from qvlab.errors import DomainError, NormalizationError, PivotFailure
from qvlab.geometry import (GaugePotential, complex_cholesky, euclideanize, eval_metric,
                            fd_derivative, field_strength, sampling_factor)


def test_sphere_christoffels_and_curvature():
    th = 0.7
    ev = eval_metric(sphere2(2.0), [th, 0.3])
    assert ev.gamma[0, 1, 1] == pytest.approx(-math.sin(th) * math.cos(th))
    assert ev.gamma[1, 0, 1] == pytest.approx(1 / math.tan(th))
    assert ev.gamma[1, 1, 0] == pytest.approx(1 / math.tan(th))
    assert ev.ricci_scalar == pytest.approx(2 / 4.0)


def test_sphere_curvature_at_complex_point():
    ev = eval_metric(sphere2(1.0), [0.9 + 0.2j, 0.1 - 0.4j])
    assert abs(ev.ricci_scalar - 2.0) < 1e-12


def test_schwarzschild_christoffels_and_vacuum():
    M, r = 1.5, 7.0
    ev = eval_metric(schwarzschild(M), [0.0, r, 1.1, 0.4])
    assert ev.gamma[0, 0, 1] == pytest.approx(M / (r * (r - 2 * M)))
    assert ev.gamma[1, 0, 0] == pytest.approx(M * (r - 2 * M) / r ** 3)
    assert np.max(np.abs(ev.ricci)) < 1e-12
    assert abs(ev.ricci_scalar) < 1e-12


def test_schwarzschild_kretschmann():
    M, r = 1.0, 5.0
    ev = eval_metric(schwarzschild(M), [0.0, r, 1.0, 0.0])
    R = ev.riemann
    low = np.einsum("ae,ebcd->abcd", ev.g, R)
    up = np.einsum("ebcd,bf,cg,dh->efgh", R, ev.g_inv, ev.g_inv, ev.g_inv)
    K = np.einsum("abcd,abcd->", low, up)
    assert K.real == pytest.approx(48 * M ** 2 / r ** 6, rel=1e-10)


def test_perturbed_flat_analytic_matches_finite_difference():
    m = perturbed_flat(3, 0.1)
    z = [0.3, -0.2, 0.5]
    a = eval_metric(m, z, "analytic", with_dR=True)
    f = eval_metric(m, z, "finite_difference", with_dR=True)
    assert np.max(np.abs(a.gamma - f.gamma)) < 1e-9
    assert abs(a.ricci_scalar - f.ricci_scalar) < 1e-6
    assert np.max(np.abs(a.dR - f.dR)) < 1e-4


def test_dR_matches_difference_of_scalar_curvature():
    m = perturbed_flat(2, 0.2)
    z = np.array([0.4, 1.1])
    ev = eval_metric(m, z, with_dR=True)
    R = lambda p: eval_metric(m, p).ricci_scalar
    assert np.max(np.abs(ev.dR - fd_derivative(R, z, 1))) < 1e-8


def test_domain_checks():
    with pytest.raises(DomainError):
        eval_metric(schwarzschild(1.0), [0.0, 1.5, 1.0, 0.0])
    with pytest.raises(DomainError):
        eval_metric(sphere2(), [0.0, 0.2])
    with pytest.raises(DomainError):
        eval_metric(sphere2(), [0.5])


def test_minkowski_euclideanized_is_identity():
    m = minkowski(4)
    g = m.components(np.zeros(4))
    ge = euclideanize(np.linalg.inv(g), [1, 0, 0, 0])
    assert np.allclose(ge, np.eye(4))


def test_euclideanize_rejects_non_unit_observer():
    g = np.diag([-1.0, 1.0])
    with pytest.raises(NormalizationError):
        euclideanize(np.linalg.inv(g), [2.0, 0.0])


@st.composite
def complex_symmetric(draw, n=3):
    vals = draw(st.lists(st.floats(-1, 1), min_size=2 * n * n, max_size=2 * n * n))
    a = np.array(vals[:n * n]).reshape(n, n) + 1j * np.array(vals[n * n:]).reshape(n, n)
    return a @ a.T + 3 * np.eye(n)


@given(complex_symmetric())
def test_complex_cholesky_reconstructs(a):
    L = complex_cholesky(a)
    assert np.allclose(np.triu(L, 1), 0)
    assert np.allclose(L @ L.T, a, atol=1e-10 * np.abs(a).max())


def test_complex_cholesky_pivot_failure():
    with pytest.raises(PivotFailure):
        complex_cholesky(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_sampling_factor_on_schwarzschild():
    m = schwarzschild(1.0)
    z = np.array([[0.0, 6.0, 1.0, 0.2], [1.0, 9.0, 2.0, 0.5]], dtype=complex)
    s = sampling_factor(m, z)
    g_inv = np.linalg.inv(m.components(z))
    f = 1 - 2 / z[:, 1]
    u = np.zeros((2, 4), dtype=complex)
    u[:, 0] = 1 / np.sqrt(f)
    ge = g_inv + 2 * np.einsum("pa,pb->pab", u, u)
    assert np.allclose(s @ np.swapaxes(s, -1, -2), ge)
    assert np.allclose(ge[:, 0, 0], 1 / f)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_field_strength_antisymmetric(x, y, b):
    A = GaugePotential(lambda z: np.array([-0.5 * b * z[1], 0.5 * b * z[0], z[0] * z[1]]))
    H = field_strength(A, np.array([x, y, 0.3]))
    assert np.allclose(H, -H.T, atol=1e-8)
    # dA[nu, mu] = d_nu A_mu and H_{mu nu} = d_mu A_nu - d_nu A_mu
    assert H[0, 1] == pytest.approx(b, abs=1e-7)


def test_registry_lookup():
    assert get_metric("perturbed-flat", n=2, eps=0.05).dim == 2
    with pytest.raises(KeyError):
        get_metric("kerr")
