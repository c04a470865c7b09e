import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvlab.charts import euclidean, minkowski, perturbed_flat, schwarzschild, sphere2
from qvlab.expansion import (assemble_moments, cond_exp_linear, cond_exp_potential,
                             cond_exp_quadratic_covariant, cond_exp_quadratic_raw, cond_exp_trace,
                             identity_report_csv, mc_linear, mc_trace, richardson_zero)
from qvlab.geometry import GaugePotential, eval_metric
from qvlab.process import ProcessParams

SPHERE_PT = [math.pi / 3, 0.2]


def zero_hat_field(ev, params):
    al = params.alpha * params.lam
    return -0.5 * al * ev.gamma_trace, -0.5 * al * ev.dgamma_trace()


def test_sphere_values_at_pi_over_three():
    # hand values on the unit sphere, alpha = lambda = 1, R = 2:
    # w = 0 gives w_hat = (-cot/2, 0), |w_hat|^2 = 1/12, div w_hat = 1/2, so 1/12 + 1/2 - 1/3 = 1/4;
    # w_hat = 0 leaves only -R/6
    p = ProcessParams.gauge_fixed(1.0, 0.0, dim=2)
    ev = eval_metric(sphere2(), SPHERE_PT, "analytic", with_dR=False)
    zero = (np.zeros(2), np.zeros((2, 2)))
    for f in (cond_exp_quadratic_raw, cond_exp_quadratic_covariant):
        assert f(zero, ev, p) == pytest.approx((2.0, 0.25), abs=1e-12)
        assert f(zero_hat_field(ev, p), ev, p) == pytest.approx((2.0, -1 / 3), abs=1e-12)


def _field(dim, seed):
    c = np.random.default_rng(seed).normal(size=(dim, dim)) * 0.3
    w = lambda z: np.sin(c @ z) + 0.2 * z
    return w


CHARTS = [
    (minkowski(3), [0.3, -0.2, 0.5]),
    (sphere2(1.5), [1.1, 0.4]),
    (schwarzschild(1.0), [0.0, 7.0, 1.2, 0.3]),
    (perturbed_flat(3, 0.1), [0.2, 0.7, -0.4]),
]


@pytest.mark.parametrize("metric,point", CHARTS, ids=["minkowski", "sphere", "schwarzschild", "perturbed"])
@given(phi=st.floats(-3.0, 3.0), seed=st.integers(0, 50))
def test_raw_assembly_matches_covariant(metric, point, phi, seed):
    p = ProcessParams.from_alpha(0.8 * np.exp(1j * phi), dim=metric.dim)
    ev = eval_metric(metric, point, "analytic", with_dR=False)
    field = _field(metric.dim, seed)
    raw = cond_exp_quadratic_raw(field, ev, p)
    cov = cond_exp_quadratic_covariant(field, ev, p)
    assert raw[0] == pytest.approx(cov[0], abs=1e-10)
    assert abs(raw[1] - cov[1]) < 1e-7 * max(1.0, abs(cov[1]))


def test_moment_tensors_are_symmetric():
    p = ProcessParams.from_alpha(np.exp(0.7j), dim=4)
    ev = eval_metric(schwarzschild(1.0), [0.0, 6.0, 1.0, 0.0], "analytic", with_dR=False)
    asm = assemble_moments(_field(4, 1), ev, p)
    assert asm.symmetry_defect() < 1e-10
    assert asm.second == pytest.approx(sum(asm.terms.values()))


def test_first_coefficient_is_trace():
    p = ProcessParams.from_alpha(2j, m=4.0, dim=3)
    ev = eval_metric(minkowski(3), [0.0, 0.0, 0.0], "analytic", with_dR=False)
    assert cond_exp_trace(ev, p) == pytest.approx(3 * 2j / 4)
    assert cond_exp_potential(lambda z: 3.0 + z[0], [1.5]) == 4.5


def test_mc_trace_on_sphere():
    p = ProcessParams.gauge_fixed(1.0, 0.0, dim=2)
    mean, se = mc_trace(p, sphere2(), [1.0, 0.0], 1e-3, 20000, 3)
    assert abs(mean - 2.0) < 4 * se + 5e-3


def test_mc_linear_matches_coefficient():
    # A = x^2 at x = 1 with w = 0.5, alpha = 1: A w + A' / 2 = 1.5
    A = GaugePotential(lambda z: z ** 2, lambda z: np.diag(2 * z))
    p = ProcessParams.gauge_fixed(1.0, 0.0)
    ev = eval_metric(euclidean(1), [1.0], "analytic", with_dR=False)
    assert cond_exp_linear(A, (np.array([0.5]), np.zeros((1, 1))), ev, p) == pytest.approx(1.5)
    mean, se = mc_linear(A, p, euclidean(1), [1.0], 1e-3, 20000, 4, w=[0.5])
    assert abs(mean - 1.5) < 4 * se + 5e-3


def test_richardson_is_exact_for_linear_bias():
    f = lambda h: 2.0 + 3.0 * h
    assert richardson_zero((0.1, 0.05), (f(0.1), f(0.05))) == pytest.approx(2.0)


def test_identity_csv_layout():
    rows = [{"metric": "sphere", "point": [1.0, 0.0], "alpha": 1j,
             "raw": (2 + 0j, 0.25 + 0j), "covariant": (2 + 0j, 0.25 + 1e-9j)}]
    lines = identity_report_csv(rows).splitlines()
    assert lines[0].startswith("metric,probe,alpha_re")
    assert lines[1].split(",")[-1] == "1.000e-09"
