"""Nonlinear truth model of the scaled turbine.

Single rotational degree of freedom driven by an analytic power-coefficient
surface, a first-order pitch actuator with rate and position limits, and an
optional tower fore-aft mode.  All functions operate on plain floats so the
simulation inner loop stays cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

BETZ_LIMIT = 0.593
LOW_WIND_CUTOFF = 0.1  # m/s, below this the aerodynamic torque is zero
DEFAULT_CP_COEFFS = (0.5176, 116.0, 0.4, 5.0, 21.0, 0.0068)


@dataclass(frozen=True)
class TowerParams:
    modal_mass: float = 5.0  # kg
    nat_freq: float = 2 * math.pi * 8.0  # rad/s
    damping_ratio: float = 0.02
    thrust_coeff_scale: float = 0.8

    def __post_init__(self):
        if not self.modal_mass > 0:
            raise ValueError("tower modal_mass must be > 0")
        if not self.nat_freq > 0:
            raise ValueError("tower nat_freq must be > 0")
        if not 0 < self.damping_ratio < 1:
            raise ValueError("tower damping_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class TurbineParams:
    """Physical parameters of the truth model (SI units, angles in rad)."""

    rotor_radius: float = 0.9
    inertia: float = 0.03
    air_density: float = 1.225
    rated_speed: float = 50.0
    rated_wind: float = 7.0
    rated_gen_torque: float | None = None
    pitch_min: float = 0.0
    pitch_max: float = 1.57
    pitch_rate_limit: float = 0.35
    actuator_tau: float = 0.05
    cp_coeffs: tuple = DEFAULT_CP_COEFFS
    tower: TowerParams | None = None

    def __post_init__(self):
        for name in ("rotor_radius", "inertia", "air_density", "actuator_tau",
                     "pitch_rate_limit", "rated_speed", "rated_wind"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")
        if not self.pitch_min < self.pitch_max:
            raise ValueError("pitch_min must be < pitch_max")
        if len(self.cp_coeffs) != 6:
            raise ValueError("cp_coeffs needs exactly 6 coefficients")
        object.__setattr__(self, "cp_coeffs", tuple(float(c) for c in self.cp_coeffs))
        if self.rated_gen_torque is None:
            # rated torque = what the rotor delivers at rated wind and speed on fine pitch
            q = aero_torque(self.rated_wind, self.rated_speed, self.pitch_min, self)
            object.__setattr__(self, "rated_gen_torque", q)


@dataclass(frozen=True)
class TurbineState:
    omega: float  # rad/s
    beta: float  # rad
    tower_x: float = 0.0  # m
    tower_v: float = 0.0  # m/s
    omega_clamped: bool = field(default=False, compare=False)

    def as_tuple(self):
        return (self.omega, self.beta, self.tower_x, self.tower_v)


def _check_finite(**values):
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite input {name}={value}")


def power_coefficient(lam, beta, coeffs=DEFAULT_CP_COEFFS):
    """Six-coefficient exponential Cp(λ, β) surface, clamped to [0, Betz].

    ``beta`` is in radians; the closed form itself is written in degrees.
    """
    _check_finite(lam=lam, beta=beta)
    if lam <= 0:
        raise ValueError(f"tip-speed ratio must be > 0, got {lam}")
    c1, c2, c3, c4, c5, c6 = coeffs
    bd = math.degrees(beta)
    d1 = lam + 0.08 * bd
    d2 = bd ** 3 + 1.0
    if d1 == 0.0 or d2 == 0.0:
        return 0.0  # poles of the fit, only reachable at negative pitch
    inv_li = 1.0 / d1 - 0.035 / d2
    bracket = c2 * inv_li - c3 * bd - c4
    x = -c5 * inv_li
    if x > 700.0:
        # exp overflows; the clamp only needs the sign of the raw value
        cp = math.copysign(math.inf, c1 * bracket) if bracket != 0.0 else c6 * lam
    else:
        cp = c1 * bracket * math.exp(x) + c6 * lam
    if cp < 0.0:
        return 0.0
    if cp > BETZ_LIMIT:
        return BETZ_LIMIT
    return cp


def aero_torque(v, omega, beta, params):
    """Rotor aerodynamic torque ½ρπR³v²·Cp(λ,β)/λ with λ = ωR/v."""
    _check_finite(v=v, omega=omega, beta=beta)
    if v <= LOW_WIND_CUTOFF or omega <= 0.0:
        return 0.0
    R = params.rotor_radius
    lam = omega * R / v
    if lam < 1e-6:
        return 0.0
    cp = power_coefficient(lam, beta, params.cp_coeffs)
    return 0.5 * params.air_density * math.pi * R ** 3 * v * v * cp / lam


def rotor_thrust(v_rel, params):
    """Tower forcing κ·½ρπR²·v_rel², signed with the relative wind."""
    tower = params.tower
    if tower is None:
        return 0.0
    return (tower.thrust_coeff_scale * 0.5 * params.air_density * math.pi
            * params.rotor_radius ** 2 * v_rel * abs(v_rel))


def clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def _derivatives(omega, beta, tx, tv, v, gen_torque, beta_target, params):
    v_rel = v - tv if params.tower is not None else v
    q_aero = aero_torque(v_rel, omega if omega > 0.0 else 0.0, beta, params)
    d_omega = (q_aero - gen_torque) / params.inertia
    rate = params.pitch_rate_limit
    d_beta = clamp((beta_target - beta) / params.actuator_tau, -rate, rate)
    tower = params.tower
    if tower is None:
        return d_omega, d_beta, 0.0, 0.0
    wn = tower.nat_freq
    d_tv = (rotor_thrust(v_rel, params) / tower.modal_mass
            - 2.0 * tower.damping_ratio * wn * tv - wn * wn * tx)
    return d_omega, d_beta, tv, d_tv


def rk4(omega, beta, tx, tv, v, gen_torque, beta_cmd, dt, params):
    """One RK4 step on plain floats; returns (omega, beta, tx, tv, clamped)."""
    target = clamp(beta_cmd, params.pitch_min, params.pitch_max)
    h2 = 0.5 * dt
    k1 = _derivatives(omega, beta, tx, tv, v, gen_torque, target, params)
    k2 = _derivatives(omega + h2 * k1[0], beta + h2 * k1[1], tx + h2 * k1[2],
                      tv + h2 * k1[3], v, gen_torque, target, params)
    k3 = _derivatives(omega + h2 * k2[0], beta + h2 * k2[1], tx + h2 * k2[2],
                      tv + h2 * k2[3], v, gen_torque, target, params)
    k4 = _derivatives(omega + dt * k3[0], beta + dt * k3[1], tx + dt * k3[2],
                      tv + dt * k3[3], v, gen_torque, target, params)
    s = dt / 6.0
    omega_n = omega + s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    beta_n = beta + s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    tx_n = tx + s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    tv_n = tv + s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
    beta_n = clamp(beta_n, params.pitch_min, params.pitch_max)
    clamped = omega_n < 0.0
    if clamped:
        omega_n = 0.0
    return omega_n, beta_n, tx_n, tv_n, clamped


def step(state, v, gen_torque, beta_cmd, dt, params):
    """Advance the truth model by ``dt`` with wind ``v`` held constant.

    The actuator tracks the saturated command through a first-order lag whose
    rate is clipped to ±pitch_rate_limit; the pitch is position-clamped after
    the step.  A negative rotor speed is clamped to zero and flagged on the
    returned state.
    """
    _check_finite(v=v, gen_torque=gen_torque, beta_cmd=beta_cmd, dt=dt)
    _check_finite(omega=state.omega, beta=state.beta, tower_x=state.tower_x,
                  tower_v=state.tower_v)
    if not dt > 0:
        raise ValueError("dt must be > 0")
    omega, beta, tx, tv, clamped = rk4(state.omega, state.beta, state.tower_x,
                                       state.tower_v, v, gen_torque, beta_cmd, dt, params)
    return TurbineState(omega, beta, tx, tv, omega_clamped=clamped)


def with_tower(params, tower=None):
    return replace(params, tower=tower or TowerParams())
