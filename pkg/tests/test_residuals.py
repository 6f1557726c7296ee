"""Residual-family checks: closed forms, ground-truth fixed points, filter laws."""

import numpy as np
import pytest

from dynid.networks import TermsEstimate
from dynid.plant import ReferenceSpec, excitation_reference, ground_truth_terms, two_link_plant
from dynid.residuals import (
    LagrangianWeights,
    ResidualError,
    filtered_residual_step,
    inertia_eigen_residual,
    offdiag_pairs,
    skew_diag_residual,
    skew_offdiag_residual,
    stack_weighted,
    stacked_length,
    torque_residual,
)

LW = LagrangianWeights(1.5, 1.5, 1.2)


def _estimate(mass, cor, grav, q, qd):
    return TermsEstimate(mass, cor, grav, q, qd)


def test_torque_residual_zero_for_exact_terms():
    plant = two_link_plant()
    rng = np.random.default_rng(0)
    q, qd, qdd = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
    mass, cor, grav = ground_truth_terms(plant, q, qd)
    tau = mass @ qdd + cor @ qd + grav
    e1 = torque_residual(tau, _estimate(mass, cor, grav, q, qd), qdd)
    np.testing.assert_allclose(e1, 0.0, atol=1e-12)


def test_torque_residual_static_offset():
    q = np.zeros(2)
    est = _estimate(np.eye(2), np.zeros((2, 2)), np.array([1.0, -2.0]), q, q)
    delta = np.array([0.3, 0.7])
    tau = est.g_hat + delta
    np.testing.assert_allclose(torque_residual(tau, est, np.zeros(2)), delta)


def test_torque_residual_matches_predicted_torque_path():
    from dynid.networks import assemble_terms, init_bundle, predicted_torque

    rng = np.random.default_rng(1)
    nets = init_bundle(2, 4, 5, 3, seed=2, init_scale=0.5)
    q, qd, qdd = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
    tau = rng.normal(size=2)
    est = assemble_terms(nets, q, qd)
    e1 = torque_residual(tau, est, qdd)
    np.testing.assert_allclose(e1, tau - predicted_torque(nets, q, qd, qdd), atol=1e-12)


def test_skew_residuals_vanish_on_ground_truth():
    """True dynamics satisfy the skew-symmetry property; rate by central diff."""
    plant = two_link_plant()
    spec = ReferenceSpec.from_lists(
        [0.1, -0.3], [[(0.5, 0.3, 0.0)], [(0.4, 0.5, 0.8)]]
    )
    h = 1e-5
    for t in np.linspace(0.2, 3.0, 7):
        q, qd, _ = excitation_reference(t, spec)
        qp, _, _ = excitation_reference(t + h, spec)
        qm, _, _ = excitation_reference(t - h, spec)
        m_rate = (plant.mass_matrix(qp) - plant.mass_matrix(qm)) / (2 * h)
        _, cor, _ = ground_truth_terms(plant, q, qd)
        np.testing.assert_allclose(skew_diag_residual(m_rate, cor), 0.0, atol=1e-8)
        np.testing.assert_allclose(skew_offdiag_residual(m_rate, cor), 0.0, atol=1e-8)


def test_skew_diag_zero_when_c_is_half_rate():
    rng = np.random.default_rng(2)
    m_rate = rng.normal(size=(3, 3))
    c_hat = np.diag(np.diag(m_rate)) / 2.0
    np.testing.assert_allclose(skew_diag_residual(m_rate, c_hat), 0.0, atol=1e-15)


def test_skew_residual_direct_formula():
    rng = np.random.default_rng(3)
    m_rate, c_hat = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    e2 = skew_diag_residual(m_rate, c_hat)
    for n in range(3):
        assert e2[n] == pytest.approx(m_rate[n, n] - 2 * c_hat[n, n])


def test_skew_offdiag_sizes_and_enumeration():
    assert skew_offdiag_residual(np.zeros((1, 1)), np.zeros((1, 1))).size == 0
    rng = np.random.default_rng(4)
    m_rate, c_hat = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    e3 = skew_offdiag_residual(m_rate, c_hat)
    assert e3.shape == (3,)
    assert offdiag_pairs(3) == [(0, 1), (0, 2), (1, 2)]
    expected = [
        m_rate[0, 1] + m_rate[1, 0] - 2 * (c_hat[0, 1] + c_hat[1, 0]),
        m_rate[0, 2] + m_rate[2, 0] - 2 * (c_hat[0, 2] + c_hat[2, 0]),
        m_rate[1, 2] + m_rate[2, 1] - 2 * (c_hat[1, 2] + c_hat[2, 1]),
    ]
    np.testing.assert_allclose(e3, expected, atol=1e-14)


def test_inertia_residual_zero_at_unit_scale_symmetric():
    rng = np.random.default_rng(5)
    sym = rng.normal(size=(3, 3))
    sym = 0.5 * (sym + sym.T)
    # lambda0 = 0 makes the scale exactly 1 at any t > 0
    e4, _ = inertia_eigen_residual(sym, t=3.7, lambda0=0.0)
    np.testing.assert_allclose(e4, 0.0, atol=1e-12)


def test_inertia_residual_scalar_matrix_closed_form():
    c, lambda0, t, n = 0.8, -0.5, 2.0, 3
    scale = np.exp(lambda0 / t)
    e4, _ = inertia_eigen_residual(c * np.eye(n), t=t, lambda0=lambda0)
    np.testing.assert_allclose(e4, abs(c - c * scale) ** n, rtol=1e-12)


def test_inertia_residual_limit_scale_one():
    rng = np.random.default_rng(6)
    sym = rng.normal(size=(2, 2))
    sym = 0.5 * (sym + sym.T)
    e4, _ = inertia_eigen_residual(sym, t=1e12, lambda0=-0.1)  # t -> inf limit
    np.testing.assert_allclose(e4, 0.0, atol=1e-9)


def test_inertia_residual_band_penalty():
    m_hat = np.diag([0.5, 3.0])
    _, penalty = inertia_eigen_residual(m_hat, t=1.0, lambda0=0.0, band=(1.0, 2.0))
    np.testing.assert_allclose(penalty, [0.5, 1.0])
    _, ok = inertia_eigen_residual(m_hat, t=1.0, lambda0=0.0, band=(0.1, 5.0))
    np.testing.assert_allclose(ok, 0.0)


def test_stack_lengths_and_blocks():
    n = 3
    e1, e2, e4 = np.ones(n), 2 * np.ones(n), 4 * np.ones(n)
    e3 = 3 * np.ones((n * n - n) // 2)
    eps = stack_weighted(e1, e2, e3, e4, LW)
    assert eps.shape == (stacked_length(n),) == (12,)
    np.testing.assert_allclose(eps[:3], e1)
    np.testing.assert_allclose(eps[3:6], LW.lambda1 * e2)
    np.testing.assert_allclose(eps[6:9], LW.lambda2 * e3)
    np.testing.assert_allclose(eps[9:], LW.lambda3 * e4)


def test_stack_zero_and_scaling():
    n = 2
    zeros = stack_weighted(np.zeros(n), np.zeros(n), np.zeros(1), np.zeros(n), LW)
    np.testing.assert_allclose(zeros, 0.0)
    e1, e2 = np.array([1.0, -1.0]), np.array([0.5, 2.0])
    e3, e4 = np.array([0.3]), np.array([0.2, 0.1])
    base = stack_weighted(e1, e2, e3, e4, LW)
    doubled = stack_weighted(
        e1, e2, e3, e4, LagrangianWeights(2 * LW.lambda1, LW.lambda2, LW.lambda3)
    )
    np.testing.assert_allclose(doubled[2:4], 2 * base[2:4])
    np.testing.assert_allclose(doubled[:2], base[:2])
    np.testing.assert_allclose(doubled[4:], base[4:])


def test_filter_steady_state_is_eps_over_alpha():
    alpha, dt = 8.0, 1e-3
    eps = np.array([2.0, -1.0, 0.5])
    e = np.zeros(3)
    for _ in range(5000):
        e = filtered_residual_step(e, eps, alpha, dt)
    np.testing.assert_allclose(e, eps / alpha, atol=1e-9)


def test_filter_homogeneous_decay_ratio():
    alpha, dt = 10.0, 1e-3
    e = np.array([1.0, -2.0])
    e_next = filtered_residual_step(e, np.zeros(2), alpha, dt)
    np.testing.assert_allclose(e_next, (1 - alpha * dt) * e, atol=1e-15)


def test_filter_first_order_lag_rise_time():
    """alpha = 10, unit step: 63% rise at t ~ 0.1 s (one time constant)."""
    alpha, dt = 10.0, 1e-3
    eps = np.ones(1)
    e = np.zeros(1)
    t63 = None
    for k in range(1, 2001):
        e = filtered_residual_step(e, eps, alpha, dt)
        if t63 is None and e[0] >= (1 - np.exp(-1.0)) / alpha:
            t63 = k * dt
    assert t63 == pytest.approx(0.1, rel=0.05)


def test_filter_linearity_superposition():
    rng = np.random.default_rng(7)
    alpha, dt = 5.0, 1e-3
    e_a, e_b = rng.normal(size=4), rng.normal(size=4)
    eps_a, eps_b = rng.normal(size=4), rng.normal(size=4)
    a, b = 1.7, -0.4
    combined = filtered_residual_step(a * e_a + b * e_b, a * eps_a + b * eps_b, alpha, dt)
    separate = a * filtered_residual_step(e_a, eps_a, alpha, dt) + b * filtered_residual_step(
        e_b, eps_b, alpha, dt
    )
    np.testing.assert_allclose(combined, separate, atol=1e-12)


def test_filter_rejects_unstable_config():
    with pytest.raises(ResidualError):
        filtered_residual_step(np.zeros(2), np.zeros(2), alpha=300.0, dt=1e-2)


def test_lagrangian_weight_validation():
    assert LagrangianWeights(1.5, 2.0, 1.1).violations() == []
    bad = LagrangianWeights(0.5, 1.0, 2.0)
    msgs = bad.violations()
    assert len(msgs) == 2 and "lambda1" in msgs[0] and "lambda2" in msgs[1]
