import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvlab.calculus import (DiscretePath, SecondOrderVector, covariant_hat, ito_integral,
                            ito_product_rule_residual, ito_strat_conversion_residual,
                            observed_order, quadratic_covariation, qv_integral, rms,
                            strat_integral, strat_product_rule_residual)
from qvlab.charts import euclidean, sphere2
from qvlab.geometry import eval_metric

paths = st.lists(st.floats(-3, 3), min_size=2, max_size=60).map(
    lambda v: DiscretePath.from_values(np.arange(len(v)) * 0.01, np.array(v)))


def brownian(n_steps, T, seed, complex_phase=0.0):
    rng = np.random.default_rng(seed)
    dt = T / n_steps
    dB = rng.standard_normal(n_steps) * np.sqrt(dt) * np.exp(0.5j * complex_phase)
    B = np.concatenate([[0.0], np.cumsum(dB)])
    return DiscretePath.from_values(np.linspace(0, T, n_steps + 1), B)


@given(paths)
def test_discrete_ito_identity(path):
    # sum B_i dB_i = (B_N^2 - B_0^2 - sum dB^2) / 2 holds exactly on any partition
    x = path.positions[:, 0]
    qv, _ = quadratic_covariation(path)
    ito = ito_integral(lambda p: p[:, 0], path)
    assert ito == pytest.approx(0.5 * (x[-1] ** 2 - x[0] ** 2 - qv), abs=1e-9)


@given(paths)
def test_discrete_strat_minus_ito_is_half_qv(path):
    f = lambda p: p[:, 0]
    qv, _ = quadratic_covariation(path)
    assert strat_integral(f, path) - ito_integral(f, path) == pytest.approx(0.5 * qv, abs=1e-9)


@given(paths)
def test_linear_integrand_has_zero_conversion_residual(path):
    res = ito_strat_conversion_residual(lambda p: 2 * p[:, 0] + 1, path, grad_f=lambda p: 2 * np.ones_like(p))
    assert abs(res) < 1e-9


@given(paths)
def test_running_covariation_is_monotone_for_real_paths(path):
    _, running = quadratic_covariation(path)
    assert running[0] == 0
    assert np.all(np.diff(running.real) >= -1e-15)


def test_brownian_quadratic_variation_converges():
    path = brownian(200_000, 2.0, 1)
    qv, _ = quadratic_covariation(path)
    assert qv.real == pytest.approx(2.0, rel=0.01)


def test_complex_increment_qv_rotates():
    # dZ = e^{i phi / 2} dB has [Z, Z]_T = e^{i phi} T
    phi = 1.1
    path = brownian(200_000, 1.0, 2, phi)
    qv, _ = quadratic_covariation(path)
    assert abs(qv - np.exp(1j * phi)) < 0.01


def test_strat_minus_ito_for_brownian_square():
    path = brownian(100_000, 1.0, 3)
    f = lambda p: p[:, 0]
    diff = strat_integral(f, path) - ito_integral(f, path)
    assert diff.real == pytest.approx(0.5, abs=0.01)


def test_product_rules_shrink_with_dt():
    f, df, d2f = np.sin, np.cos, lambda x: -np.sin(x)
    h, dh, d2h = np.exp, np.exp, np.exp
    errs_s, errs_i = [], []
    for n in (100, 10_000):
        rs, ri = [], []
        for seed in range(20):
            p = brownian(n, 1.0, seed)
            rs.append(strat_product_rule_residual(p, f, df, h, dh))
            ri.append(ito_product_rule_residual(p, f, df, d2f, h, dh, d2h))
        errs_s.append(rms(rs))
        errs_i.append(rms(ri))
    assert errs_s[1] < errs_s[0] / 5
    assert errs_i[1] < errs_i[0] / 5


def test_qv_integral_with_constant_weight():
    path = brownian(1000, 1.0, 4)
    qv, _ = quadratic_covariation(path)
    assert qv_integral(3.0, path, 0, 0) == pytest.approx(3 * qv)


def test_observed_order_recovers_slope():
    dts = np.array([1e-2, 1e-3, 1e-4])
    assert observed_order(dts, 7 * dts ** 0.5) == pytest.approx(0.5)


def test_path_validation():
    with pytest.raises(ValueError):
        DiscretePath([0.0, 0.0], [1.0, 2.0], 0.1)
    with pytest.raises(ValueError):
        DiscretePath([0.0, 0.1], [1.0, np.nan], 0.1)
    with pytest.raises(ValueError):
        SecondOrderVector([0.0, 0.0], [[1.0, 2.0], [0.0, 1.0]])


def test_covariant_hat_flat_and_sphere():
    v = SecondOrderVector([0.1, 0.2], [[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(covariant_hat(v, eval_metric(euclidean(2), [0.3, 0.4])), [0.1, 0.2])
    th = 0.8
    hat = covariant_hat(v, eval_metric(sphere2(1.0), [th, 0.0]))
    # Gamma^theta_{phi phi} = -sin cos
    assert hat[0] == pytest.approx(0.1 - 0.5 * np.sin(th) * np.cos(th))
    assert hat[1] == pytest.approx(0.2)
