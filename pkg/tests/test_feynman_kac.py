import math

import numpy as np
import pytest
import sympy as sp

from qvlab.errors import ConfigMismatch, ModeError, VarianceBlowup
from qvlab.feynman_kac import (FKProblem, compare_to_pde, complex_fk_estimate, fk_estimate,
                               gaussian_terminal_solution)
from qvlab.process import EnsembleConfig, ProcessParams

gauss = lambda x: np.exp(-0.5 * np.sum(x ** 2, axis=-1))


def test_closed_form_solves_backward_equation():
    # d_t Psi + (alpha / 2m) Psi'' = 0 with Psi(T) = exp(-x^2 / 2)
    x, t, T, a, m = sp.symbols("x t T alpha m")
    s = a * (T - t) / m
    psi = (1 + s) ** sp.Rational(-1, 2) * sp.exp(-x ** 2 / (2 * (1 + s)))
    assert sp.simplify(sp.diff(psi, t) + a / (2 * m) * sp.diff(psi, x, 2)) == 0
    assert sp.simplify(psi.subs(t, T) - sp.exp(-x ** 2 / 2)) == 0
    assert gaussian_terminal_solution(0.0, 1.0, 1.0, 1.0) == pytest.approx(1 / math.sqrt(2))


def test_heat_estimate():
    prob = FKProblem(gauss, 1.0, 1.0, (0.0, 1.0), ((0.0,), (1.0,)))
    est = fk_estimate(prob, EnsembleConfig(20000, 0.05, 1.0, 3))
    exact = gaussian_terminal_solution(np.array([0.0, 1.0]), 1.0, 1.0, 1.0)
    assert np.all(np.abs(est.values - exact) < 4 * est.std_errors)
    assert est.n_paths == 20000 and not est.inconclusive.any()


def test_constant_killing_rate():
    c = 0.4
    prob = FKProblem(gauss, 1.0, 1.0, (0.0, 0.5), ((0.0,),), potential=lambda x, s: np.full(x.shape[:-1], c))
    est = fk_estimate(prob, EnsembleConfig(20000, 0.05, 0.5, 4))
    want = math.exp(-c * 0.5) * gaussian_terminal_solution(0.0, 1.0, 1.0, 0.5)
    assert abs(est.values[0] - want) < 4 * est.std_errors[0]


def test_constant_drift_shifts_solution():
    v = 0.8
    prob = FKProblem(gauss, 1.0, 2.0, (0.0, 1.0), ((0.0,),), drift=lambda x, s: np.full(x.shape, v))
    est = fk_estimate(prob, EnsembleConfig(20000, 0.05, 1.0, 5))
    want = gaussian_terminal_solution(v * 1.0, 1.0, 2.0, 1.0)
    assert abs(est.values[0] - want) < 4 * est.std_errors[0]


def test_estimates_ignore_thread_count():
    prob = FKProblem(gauss, 1.0, 1.0, (0.0, 0.2), ((0.0,), (0.5,)))
    cfg = EnsembleConfig(5000, 0.05, 0.2, 6)
    a = fk_estimate(prob, cfg, threads=1)
    b = fk_estimate(prob, cfg, threads=4)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.std_errors, b.std_errors)


def test_complex_estimate_short_horizon():
    phi = math.pi / 3
    p = ProcessParams.gauge_fixed(1.0, phi)
    probes = ((0.0,), (0.5,), (-1.0,))
    prob = FKProblem(gauss, p.alpha, 1.0, (0.0, 0.1), probes, max_horizon=0.5)
    est = complex_fk_estimate(prob, p, EnsembleConfig(20000, 0.01, 0.1, 7))
    exact = gaussian_terminal_solution(np.array([0.0, 0.5, -1.0]), p.alpha, 1.0, 0.1)
    report = compare_to_pde(est, exact)
    assert report.passed
    assert report.max_abs_z < 4


def test_mode_and_config_guards():
    with pytest.raises(ModeError):
        fk_estimate(FKProblem(gauss, 1j), EnsembleConfig(10, 0.1, 1.0, 1))
    p = ProcessParams.gauge_fixed(1.0, math.pi / 2)
    with pytest.raises(ModeError):
        complex_fk_estimate(FKProblem(gauss, 1j, horizon=(0.0, 2.0)), p, EnsembleConfig(10, 0.1, 1.0, 1))
    with pytest.raises(ConfigMismatch):
        complex_fk_estimate(FKProblem(gauss, 1.0), p, EnsembleConfig(10, 0.1, 1.0, 1))
    with pytest.raises(ConfigMismatch):
        complex_fk_estimate(FKProblem(gauss, 1j, m=2.0), p, EnsembleConfig(10, 0.1, 1.0, 1))
    with pytest.raises(ValueError):
        fk_estimate(FKProblem(gauss, 1.0, horizon=(0.0, 0.25)), EnsembleConfig(10, 0.1, 1.0, 1))


def test_variance_blowup_is_flagged_or_raised():
    # along the rotated noise, exp(-4i z^2) grows like exp(4 B^2) and has infinite variance
    p = ProcessParams.gauge_fixed(1.0, math.pi / 2)
    wild = lambda x: np.exp(-4j * np.sum(x ** 2, axis=-1))
    prob = FKProblem(wild, 1j, 1.0, (0.0, 0.5), ((0.0,),), max_horizon=1.0)
    cfg = EnsembleConfig(2000, 0.05, 0.5, 8)
    est = complex_fk_estimate(prob, p, cfg)
    assert est.inconclusive[0]
    assert est.diagnostics["warning"] == "VarianceBlowup"
    with pytest.raises(VarianceBlowup):
        complex_fk_estimate(prob, p, cfg, on_blowup="raise")


def test_comparison_report_rules():
    prob = FKProblem(gauss, 1.0, 1.0, (0.0, 0.5), ((0.0,),))
    est = fk_estimate(prob, EnsembleConfig(50, 0.05, 0.5, 9))
    rep = compare_to_pde(est, [gaussian_terminal_solution(0.0, 1.0, 1.0, 0.5)])
    assert rep.underpowered and rep.passed is None
    with pytest.raises(ConfigMismatch):
        compare_to_pde(est, [1.0], reference_hash="0" * 16)
    with pytest.raises(ConfigMismatch):
        compare_to_pde(est, [1.0, 2.0])
    body = est.to_json()
    assert body["config_hash"] == prob.config_hash()
    assert set(body) >= {"value_re", "value_im", "se", "attrition", "inconclusive"}


def test_pde_potential_convention():
    prob = FKProblem(gauss, 1j, potential=lambda x, s: np.full(x.shape[:-1], 2.0))
    assert prob.pde_potential()(np.zeros((3, 1)), 0.0) == pytest.approx(np.full(3, -2j))
