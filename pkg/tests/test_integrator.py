import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upo_control import _tableau as tab
from upo_control.dynamics import jacobi_constant
from upo_control.integrator import (
    IntegrationError,
    IntegratorConfig,
    integrate,
    iter_crossings,
    propagate,
    propagate_with_stm,
)

S0 = np.array([0.82, 0.0, 0.01, 0.0, 0.15, 0.0])


def test_tableau_is_consistent():
    np.testing.assert_allclose(tab.A.sum(axis=1), tab.C, atol=1e-15)
    assert tab.B8.sum() == pytest.approx(1.0, abs=1e-15)
    assert tab.B7.sum() == pytest.approx(1.0, abs=1e-15)
    assert tab.ORDER == 8
    assert np.all(np.triu(tab.A) == 0.0)


def test_order_conditions_up_to_eight():
    # quadrature conditions sum b_i c_i^(k-1) = 1/k hold for k <= 8
    for k in range(1, 9):
        assert tab.B8 @ tab.C ** (k - 1) == pytest.approx(1.0 / k, abs=1e-14)


def test_zero_duration_is_identity():
    np.testing.assert_array_equal(propagate(S0, 0.0), S0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 3.0))
def test_forward_backward_round_trip(t):
    back = propagate(propagate(S0, t), -t)
    np.testing.assert_allclose(back, S0, atol=1e-10)


def test_integrate_samples_end_at_propagate():
    traj = integrate(S0, (0.0, 2.0))
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(2.0, abs=1e-15)
    np.testing.assert_allclose(traj.final_state, propagate(S0, 2.0), atol=1e-13)
    assert np.all(np.diff(traj.times) > 0)


def test_jacobi_constant_conserved_over_long_arc():
    c0 = jacobi_constant(S0)
    assert abs(jacobi_constant(propagate(S0, 10.0)) - c0) < 1e-11


def test_crossings_lie_on_event_with_requested_direction():
    hits = list(iter_crossings(S0, (0.0, 10.0), lambda s: s[1], direction=-1))
    assert hits
    for t, s in hits:
        assert abs(s[1]) < 1e-13
        assert s[4] < 0
        np.testing.assert_allclose(s, propagate(S0, t), atol=1e-10)


def test_crossings_both_directions_alternate():
    hits = list(iter_crossings(S0, (0.0, 10.0), lambda s: s[1]))
    signs = [np.sign(s[4]) for _, s in hits]
    assert all(a != b for a, b in zip(signs, signs[1:]))


def test_stm_matches_finite_differences_short_arc():
    t = 1.3
    r = propagate_with_stm(S0, t)
    np.testing.assert_allclose(r.final_state, propagate(S0, t), atol=1e-12)
    h = 1e-7
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        col = (propagate(S0 + e, t) - propagate(S0 - e, t)) / (2 * h)
        np.testing.assert_allclose(r.stm[:, j], col, rtol=1e-5, atol=1e-6)
    assert np.linalg.det(r.stm) == pytest.approx(1.0, abs=1e-9)


def test_stm_is_symplectic():
    phi = propagate_with_stm(S0, 2.0).stm
    # canonical momenta are p = v + S q in the rotating frame
    S = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
    T = np.block([[np.eye(3), np.zeros((3, 3))], [S, np.eye(3)]])
    J = np.block([[np.zeros((3, 3)), np.eye(3)], [-np.eye(3), np.zeros((3, 3))]])
    Jv = T.T @ J @ T
    np.testing.assert_allclose(phi.T @ Jv @ phi, Jv, atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(min_step=1.0, max_step=0.1)


def test_step_budget_is_enforced():
    with pytest.raises(IntegrationError):
        propagate(S0, 10.0, IntegratorConfig(max_steps=5))
