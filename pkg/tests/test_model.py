import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scaledwt.model import (BETZ_LIMIT, TowerParams, TurbineParams, TurbineState, aero_torque,
                            power_coefficient, step, with_tower)
from scaledwt.sysid import operating_point

# closed form evaluated at 30 digits with mpmath
CP_8_0 = 0.479779539300158189
TORQUE_V7_LAM8 = 4.12222136790833352  # N·m, default rotor


def test_cp_closed_form_value():
    assert power_coefficient(8.0, 0.0) == pytest.approx(CP_8_0, abs=1e-12)


def test_cp_feathered_is_clamped_to_zero():
    # raw closed form is -0.339 here
    assert power_coefficient(8.0, 0.52) == 0.0
    assert power_coefficient(8.0, 0.52) < 0.02


def test_cp_rejects_bad_input():
    with pytest.raises(ValueError):
        power_coefficient(0.0, 0.0)
    with pytest.raises(ValueError):
        power_coefficient(8.0, math.nan)
    with pytest.raises(ValueError):
        power_coefficient(math.inf, 0.0)


@given(st.floats(0.05, 25.0), st.floats(-0.2, 1.6))
def test_cp_within_betz_bounds(lam, beta):
    cp = power_coefficient(lam, beta)
    assert 0.0 <= cp <= BETZ_LIMIT


def test_cp_clamped_where_fit_blows_up():
    # lam + 0.08*beta_deg < 0 makes the exponent overflow
    assert power_coefficient(0.0625, -0.015625) == 0.0
    # beta = -1 deg is a pole of the 1/(beta^3 + 1) term
    assert 0.0 <= power_coefficient(8.0, math.radians(-1.0)) <= BETZ_LIMIT


@given(st.floats(6.0, 8.5), st.floats(0.0, 0.34))
def test_cp_non_increasing_in_pitch(lam, beta):
    # holds exactly for lam <= 8.5; above that the surface bulges near beta = 0.01 rad
    assert power_coefficient(lam, beta + 0.01) <= power_coefficient(lam, beta) + 1e-15


@given(st.floats(10.5, 16.0), st.floats(0.0, 0.05))
def test_cp_non_increasing_along_operating_branch(v, dbeta):
    p = TurbineParams()
    lam = p.rated_speed * p.rotor_radius / v
    beta = operating_point(p, v).beta
    assert power_coefficient(lam, beta + dbeta) <= power_coefficient(lam, beta) + 1e-15


def test_aero_torque_matches_oracle():
    p = TurbineParams()
    omega = 8.0 * 7.0 / p.rotor_radius
    assert aero_torque(7.0, omega, 0.0, p) == pytest.approx(TORQUE_V7_LAM8, rel=1e-12)


def test_aero_torque_scales_quadratically():
    p = TurbineParams()
    q = aero_torque(9.0, 40.0, 0.2, p)
    assert aero_torque(18.0, 80.0, 0.2, p) == pytest.approx(4 * q, rel=1e-12)


def test_aero_torque_low_wind_cutoff():
    p = TurbineParams()
    assert aero_torque(0.05, 50.0, 0.1, p) == 0.0
    assert aero_torque(5.0, 0.0, 0.1, p) == 0.0
    with pytest.raises(ValueError):
        aero_torque(math.nan, 50.0, 0.0, p)


def test_params_validation():
    with pytest.raises(ValueError):
        TurbineParams(rotor_radius=0.0)
    with pytest.raises(ValueError):
        TurbineParams(pitch_min=1.0, pitch_max=0.5)
    with pytest.raises(ValueError):
        TowerParams(damping_ratio=1.5)
    with pytest.raises(ValueError):
        TowerParams(nat_freq=0.0)


def test_rated_torque_defaults_to_fine_pitch_torque():
    p = TurbineParams()
    assert p.rated_gen_torque == pytest.approx(aero_torque(7.0, 50.0, 0.0, p), rel=1e-15)


@settings(max_examples=60)
@given(st.floats(10.0, 16.0), st.floats(30.0, 70.0), st.floats(0.0, 0.7))
def test_equilibrium_persistence(v, omega, beta):
    p = TurbineParams()
    s = TurbineState(omega, beta)
    q = aero_torque(v, omega, beta, p)
    s2 = step(s, v, q, beta, 0.001, p)
    assert abs(s2.omega - omega) <= 1e-9 * omega
    assert abs(s2.beta - beta) <= 1e-9


def test_pitch_saturates_at_max():
    p = TurbineParams()
    s = TurbineState(50.0, 1.5)
    for _ in range(2000):
        s = step(s, 12.0, p.rated_gen_torque, p.pitch_max + 1.0, 0.001, p)
        assert s.beta <= p.pitch_max
    assert s.beta == pytest.approx(p.pitch_max)


def test_rate_limit_arithmetic():
    p = TurbineParams(pitch_rate_limit=0.17)
    s = TurbineState(50.0, 0.3)
    s2 = step(s, 12.0, p.rated_gen_torque, 0.47, 0.1, p)
    assert abs(s2.beta - 0.3) <= 0.017 + 1e-12


@settings(max_examples=40)
@given(st.lists(st.floats(-1.0, 3.0), min_size=5, max_size=60))
def test_actuator_never_violates_limits(commands):
    p = TurbineParams()
    dt = 0.01
    s = TurbineState(50.0, 0.4)
    for cmd in commands:
        s2 = step(s, 12.0, p.rated_gen_torque, cmd, dt, p)
        assert p.pitch_min <= s2.beta <= p.pitch_max
        assert abs(s2.beta - s.beta) <= p.pitch_rate_limit * dt + 1e-12
        s = s2


def test_negative_speed_is_clamped_and_flagged():
    p = TurbineParams()
    s = step(TurbineState(0.5, 1.0), 1.0, 50.0, 1.0, 0.1, p)
    assert s.omega == 0.0
    assert s.omega_clamped


def test_step_rejects_non_finite():
    p = TurbineParams()
    with pytest.raises(ValueError):
        step(TurbineState(50.0, 0.3), math.inf, 1.0, 0.3, 0.001, p)
    with pytest.raises(ValueError):
        step(TurbineState(50.0, 0.3), 12.0, 1.0, 0.3, 0.0, p)


def _trajectory(dt, p):
    s = TurbineState(47.0, 0.45)
    for _ in range(int(round(1.0 / dt))):
        s = step(s, 12.0, p.rated_gen_torque, 0.45, dt, p)
    return s.omega


def test_rk4_fourth_order_convergence():
    p = TurbineParams()
    ref = _trajectory(0.0005, p)
    e1 = abs(_trajectory(0.02, p) - ref)
    e2 = abs(_trajectory(0.01, p) - ref)
    assert 12.0 < e1 / e2 < 20.0


def test_tower_mode_responds_to_thrust():
    p = with_tower(TurbineParams())
    s = TurbineState(50.0, 0.47)
    for _ in range(500):
        s = step(s, 12.0, p.rated_gen_torque, 0.47, 0.001, p)
    assert s.tower_x > 0.0
    rotor_only = step(TurbineState(50.0, 0.47), 12.0, 3.0, 0.47, 0.001, TurbineParams())
    assert rotor_only.tower_x == 0.0 and rotor_only.tower_v == 0.0
