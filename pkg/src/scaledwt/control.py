"""Pitch controllers: gain-scheduled PI, preview LQR and constrained MPC.

All optimal controllers work in deviation coordinates of a LinearModel
augmented with an integrator on the speed error,

    x = [omega_err, beta_meas - beta_bar, z],   z+ = z + Ts * omega_err,

and see the wind preview as deviations from the operating-point wind.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .qp import ActiveSetSolver, QpProblem, QpStatus
from .sysid import LinearModel


class CtrlStatus(enum.IntEnum):
    OK = 0
    FALLBACK = 1
    FAULT = 2


class DareError(RuntimeError):
    pass


@dataclass
class PitchLimits:
    pitch_min: float  # rad
    pitch_max: float  # rad
    rate: float  # rad/s

    def __post_init__(self):
        if not self.pitch_min < self.pitch_max:
            raise ValueError("pitch_min must be < pitch_max")
        if not self.rate > 0:
            raise ValueError("pitch rate limit must be > 0")

    @classmethod
    def from_params(cls, params):
        return cls(params.pitch_min, params.pitch_max, params.pitch_rate_limit)


@dataclass
class ControllerInput:
    k: int
    omega_err: float  # rad/s, measured minus reference
    beta_meas: float  # rad
    preview: np.ndarray  # wind deviations from the operating point, m/s


@dataclass
class ControllerOutput:
    beta_cmd: float
    status: CtrlStatus = CtrlStatus.OK
    solve_iterations: int = 0
    solve_time_us: float = 0.0
    rate_clipped: bool = False  # the rate limit changed the command


def _finite_input(inp):
    return (math.isfinite(inp.omega_err) and math.isfinite(inp.beta_meas)
            and bool(np.all(np.isfinite(inp.preview))))


def clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def saturate_rate_limit(u, prev, limits: PitchLimits, Ts):
    """Clamp to the pitch range, then to prev ± rate·Ts."""
    u = clamp(u, limits.pitch_min, limits.pitch_max)
    step = limits.rate * Ts
    return clamp(u, prev - step, prev + step)


# ---------------------------------------------------------------------------
# Riccati machinery

def _check_weights(Qw, Ru):
    Qw = np.atleast_2d(np.asarray(Qw, dtype=float))
    if np.max(np.abs(Qw - Qw.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(Qw))):
        raise ValueError("Qw must be symmetric")
    if np.linalg.eigvalsh(0.5 * (Qw + Qw.T))[0] < -1e-12 * max(1.0, np.max(np.abs(Qw))):
        raise ValueError("Qw must be positive semidefinite")
    if not Ru > 0:
        raise ValueError("Ru must be > 0")
    return 0.5 * (Qw + Qw.T)


def dare_residual(A, B, Qw, Ru, P):
    S = Ru + B.T @ P @ B
    R = Qw + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) - P
    return float(np.max(np.abs(R)))


def solve_dare(A, B, Qw, Ru, tol=1e-12, max_iter=10000, method="doubling"):
    """Stabilizing solution of P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA.

    ``method="recursion"`` iterates the Riccati map from P = Q.  The default
    ``"doubling"`` evaluates the same map 2^k steps at a time (structure
    preserving doubling), which matters when a closed-loop pole sits close
    to the unit circle and the plain recursion converges very slowly.
    Returns (P, K) with K = (R + BᵀPB)⁻¹BᵀPA.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = _check_weights(Qw, Ru)
    R = np.atleast_2d(np.asarray(Ru, dtype=float))
    if method == "recursion":
        P = Q.copy()
        for _ in range(max_iter):
            S = R + B.T @ P @ B
            Pn = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
            Pn = 0.5 * (Pn + Pn.T)
            done = np.max(np.abs(Pn - P)) <= tol * max(1.0, np.max(np.abs(Pn)))
            P = Pn
            if done:
                break
        else:
            raise DareError(f"Riccati recursion did not converge in {max_iter} iterations")
    elif method == "doubling":
        Ak = A.copy()
        Gk = B @ np.linalg.solve(R, B.T)
        Hk = Q.copy()
        eye = np.eye(n)
        for _ in range(max_iter):
            W = np.linalg.solve(eye + Gk @ Hk, np.hstack([Ak, Gk]))
            W_A, W_G = W[:, :n], W[:, n:]
            H_next = Hk + Ak.T @ Hk @ W_A
            Gk = Gk + Ak @ W_G @ Ak.T
            Ak = Ak @ W_A
            H_next = 0.5 * (H_next + H_next.T)
            done = np.max(np.abs(H_next - Hk)) <= tol * max(1.0, np.max(np.abs(H_next)))
            Hk = H_next
            if done:
                break
        else:
            raise DareError(f"Riccati doubling did not converge in {max_iter} iterations")
        P = Hk
    else:
        raise ValueError(f"unknown DARE method {method!r}")
    S = R + B.T @ P @ B
    K = np.linalg.solve(S, B.T @ P @ A)
    scale = max(1.0, float(np.max(np.abs(P))))
    if dare_residual(A, B, Q, R, P) > max(tol, 1e-9) * scale:
        raise DareError("Riccati solution residual above tolerance")
    return P, K


def preview_gains(A, B, Bd, P, K, Ru, Np):
    """Kd[i] = (R + BᵀPB)⁻¹ Bᵀ (Acᵀ)ⁱ P Bd with Ac = A − BK, i = 0..Np-1."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, 1)
    Bd = np.asarray(Bd, dtype=float).reshape(n, 1)
    P = np.asarray(P, dtype=float)
    K = np.asarray(K, dtype=float).reshape(1, n)
    if P.shape != (n, n):
        raise ValueError("P does not match A")
    if Np < 1:
        raise ValueError("Np must be >= 1")
    Ac = A - B @ K
    S = (Ru + B.T @ P @ B).item()
    Kd = np.empty(Np)
    v = P @ Bd
    for i in range(Np):
        Kd[i] = (B.T @ v).item() / S
        v = Ac.T @ v
    return Kd


def augment(model: LinearModel):
    """Append the speed-error integrator z+ = z + Ts·y to the design model."""
    n = model.n
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = model.A
    A[n, :n] = model.Ts * model.C[0]
    A[n, n] = 1.0
    B = np.vstack([model.B, [[0.0]]])
    Bd = np.vstack([model.Bd, [[0.0]]])
    return A, B, Bd


def default_weights(Ts):
    """Qw = diag(1, 0, 0.1·Ts²); Ru from Bryson scaling (2 rad/s speed error
    traded against 0.063 rad of pitch, the travel of 0.18 s at full rate)."""
    return np.diag([1.0, 0.0, 0.1 * Ts * Ts]), 1000.0


@dataclass
class LqDesign:
    model: LinearModel
    A: np.ndarray  # augmented
    B: np.ndarray
    Bd: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Kd: np.ndarray
    Qw: np.ndarray
    Ru: float
    Np: int

    @property
    def Ts(self):
        return self.model.Ts

    @property
    def beta_bar(self):
        return self.model.op_point.beta


def design_lq(model: LinearModel, Qw=None, Ru=None, Np=20):
    A, B, Bd = augment(model)
    Q0, R0 = default_weights(model.Ts)
    Qw = Q0 if Qw is None else np.asarray(Qw, dtype=float)
    Ru = R0 if Ru is None else float(Ru)
    if Qw.shape != A.shape:
        raise ValueError(f"Qw must be {A.shape} for the augmented model")
    P, K = solve_dare(A, B, Qw, Ru)
    Kd = preview_gains(A, B, Bd, P, K, Ru, Np)
    return LqDesign(model=model, A=A, B=B, Bd=Bd, P=P, K=K.reshape(-1), Kd=Kd, Qw=Qw, Ru=Ru,
                    Np=int(Np))


def lq_state(design: LqDesign, inp: ControllerInput, integ_state):
    return np.array([inp.omega_err, inp.beta_meas - design.beta_bar, integ_state])


def lq_law(design: LqDesign, x, preview=None):
    """Unsaturated preview-LQ command deviation u = −Kx − Σ Kd[i]·d[i]."""
    u = -float(design.K @ x)
    if preview is not None:
        u -= float(design.Kd @ np.asarray(preview)[:design.Np])
    return u


def lqr_step(design: LqDesign, inp: ControllerInput, integ_state, limits: PitchLimits,
             prev_cmd=None, use_preview=True, rate_limit=False):
    """One LQR tick; returns (output, new integrator state).

    The integrator is frozen (conditional integration) whenever the command
    had to be clipped by the position or rate limits.
    """
    if not (_finite_input(inp) and math.isfinite(integ_state)):
        hold = design.beta_bar if prev_cmd is None else prev_cmd
        return ControllerOutput(clamp(hold, limits.pitch_min, limits.pitch_max),
                                CtrlStatus.FAULT), integ_state
    x = lq_state(design, inp, integ_state)
    u = design.beta_bar + lq_law(design, x, inp.preview if use_preview else None)
    positioned = clamp(u, limits.pitch_min, limits.pitch_max)
    cmd = positioned
    if rate_limit and prev_cmd is not None:
        cmd = saturate_rate_limit(u, prev_cmd, limits, design.Ts)
    if cmd == u:
        integ_state = integ_state + design.Ts * inp.omega_err
    return ControllerOutput(cmd, rate_clipped=cmd != positioned), integ_state


# ---------------------------------------------------------------------------
# condensed MPC

def prediction_matrices(A, B, Bd, Np):
    """Stacked predictions X = Φx0 + ΓU + Γd D for X = [x1; ...; xNp]."""
    n = A.shape[0]
    Phi = np.zeros((Np * n, n))
    Gam = np.zeros((Np * n, Np))
    Gd = np.zeros((Np * n, Np))
    Ak = np.eye(n)
    powers = [Ak]
    for _ in range(Np):
        Ak = A @ Ak
        powers.append(Ak)
    for i in range(Np):
        Phi[i * n:(i + 1) * n] = powers[i + 1]
        for j in range(i + 1):
            Gam[i * n:(i + 1) * n, j] = (powers[i - j] @ B)[:, 0]
            Gd[i * n:(i + 1) * n, j] = (powers[i - j] @ Bd)[:, 0]
    return Phi, Gam, Gd


@dataclass
class MpcTemplate:
    """Condensed QP whose Hessian and constraint rows are fixed offline.

    Per tick only g = F·x0 + Fd·D and the bounds of the first rate row
    change; they are written into ``problem`` in place so the solver
    workspace stays cached.
    """

    design: LqDesign
    limits: PitchLimits
    Np: int
    H: np.ndarray
    F: np.ndarray
    Fd: np.ndarray
    problem: QpProblem
    use_box: bool
    use_rate: bool
    solver: ActiveSetSolver = field(default_factory=ActiveSetSolver)


def mpc_build(design: LqDesign, limits: PitchLimits, Np=None, Qw=None, Ru=None,
              P_terminal=None, use_box=True, use_rate=True, rate_horizon=None):
    """Condense min Σ xᵀQx + R u² + x_Npᵀ P x_Np over the input sequence."""
    Np = design.Np if Np is None else int(Np)
    if Np < 1:
        raise ValueError("Np must be >= 1")
    Qw = design.Qw if Qw is None else np.asarray(Qw, dtype=float)
    Ru = design.Ru if Ru is None else float(Ru)
    P = design.P if P_terminal is None else np.asarray(P_terminal, dtype=float)
    A, B, Bd = design.A, design.B, design.Bd
    n = A.shape[0]
    Phi, Gam, Gd = prediction_matrices(A, B, Bd, Np)
    Qbar = np.zeros((Np * n, Np * n))
    for i in range(Np - 1):
        Qbar[i * n:(i + 1) * n, i * n:(i + 1) * n] = Qw
    Qbar[(Np - 1) * n:, (Np - 1) * n:] = P
    GtQ = Gam.T @ Qbar
    H = GtQ @ Gam + Ru * np.eye(Np)
    H = 0.5 * (H + H.T)
    F = GtQ @ Phi  # the stage cost on x0 itself does not depend on U
    Fd = GtQ @ Gd

    lo = limits.pitch_min - design.beta_bar
    hi = limits.pitch_max - design.beta_bar
    if not lo < hi:
        raise ValueError("empty pitch box around the operating point")
    step = limits.rate * design.Ts
    lb = np.full(Np, lo) if use_box else None
    ub = np.full(Np, hi) if use_box else None
    Nc = Np if rate_horizon is None else int(rate_horizon)
    if use_rate and not 1 <= Nc <= Np:
        raise ValueError("rate_horizon must lie in [1, Np]")
    if use_rate:
        D = np.eye(Np)
        D[1:, :-1] -= np.eye(Np - 1)
        D = D[:Nc]
        lbA = np.full(Nc, -step)
        ubA = np.full(Nc, step)
        problem = QpProblem(H=H, g=np.zeros(Np), lb=lb, ub=ub, A_ineq=D, lbA=lbA, ubA=ubA)
    else:
        problem = QpProblem(H=H, g=np.zeros(Np), lb=lb, ub=ub)
    return MpcTemplate(design=design, limits=limits, Np=Np, H=problem.H, F=F, Fd=Fd,
                       problem=problem, use_box=use_box, use_rate=use_rate)


def mpc_gradient(template: MpcTemplate, x0, preview):
    d = np.asarray(preview, dtype=float)[:template.Np]
    return template.F @ x0 + template.Fd @ d


@dataclass
class MpcResult:
    output: ControllerOutput
    integ_state: float
    warm: list | None
    u_seq: np.ndarray | None
    qp_status: QpStatus | None


def mpc_step(template: MpcTemplate, inp: ControllerInput, integ_state, prev_cmd, warm=None,
             deadline_budget_us=10000.0, iter_cost_us=50.0, max_iter=100):
    """Solve one MPC tick.

    The iteration cap is the number of modeled iterations that fit in the
    deadline budget.  A solve that stops short or is infeasible falls back
    to the saturated, rate-limited preview-LQ command.
    """
    design, limits = template.design, template.limits
    if not (_finite_input(inp) and math.isfinite(integ_state) and math.isfinite(prev_cmd)):
        hold = prev_cmd if math.isfinite(prev_cmd) else design.beta_bar
        out = ControllerOutput(clamp(hold, limits.pitch_min, limits.pitch_max), CtrlStatus.FAULT)
        return MpcResult(out, integ_state, warm, None, None)
    x0 = lq_state(design, inp, integ_state)
    prob = template.problem
    prob.g[:] = mpc_gradient(template, x0, inp.preview)
    u_prev = prev_cmd - design.beta_bar
    step = limits.rate * design.Ts
    if template.use_rate:
        prob.lbA[0] = u_prev - step
        prob.ubA[0] = u_prev + step
    cap = int(min(max_iter, deadline_budget_us // iter_cost_us))
    guess = np.full(template.Np, clamp(u_prev, limits.pitch_min - design.beta_bar,
                                       limits.pitch_max - design.beta_bar))
    if cap <= 0:
        sol = None
    else:
        sol = template.solver.solve(prob, warm_start=warm, max_iter=cap, x0=guess)
    if sol is not None and sol.status is QpStatus.SOLVED:
        u0 = float(sol.x[0])
        cmd = clamp(design.beta_bar + u0, limits.pitch_min, limits.pitch_max)
        if cmd != limits.pitch_min and cmd != limits.pitch_max:
            integ_state = integ_state + design.Ts * inp.omega_err
        out = ControllerOutput(cmd, CtrlStatus.OK, sol.iterations, sol.iterations * iter_cost_us)
        return MpcResult(out, integ_state, sol.active_set, sol.x, sol.status)
    fb, new_integ = lqr_step(design, inp, integ_state, limits, prev_cmd=prev_cmd,
                             use_preview=True, rate_limit=template.use_rate)
    iters = 0 if sol is None else sol.iterations
    fb.status = CtrlStatus.FALLBACK
    fb.solve_iterations = iters
    fb.solve_time_us = iters * iter_cost_us
    return MpcResult(fb, new_integ, None if sol is None else sol.active_set, None,
                     None if sol is None else sol.status)


# ---------------------------------------------------------------------------
# baseline PI

@dataclass
class PiGains:
    Kp: float  # rad per rad/s
    Ki: float  # rad per rad
    beta_K: float  # rad, pitch at which the gains are halved

    def __post_init__(self):
        if not self.beta_K > 0:
            raise ValueError("beta_K must be > 0")


def schedule_factor(beta, beta_K):
    return 1.0 / (1.0 + beta / beta_K)


def baseline_pi_step(gains: PiGains, inp: ControllerInput, integ_state, limits: PitchLimits,
                     Ts, prev_cmd=None):
    """Gain-scheduled PI on the speed error; returns (output, new integrator)."""
    if not (_finite_input(inp) and math.isfinite(integ_state)):
        hold = limits.pitch_min if prev_cmd is None else prev_cmd
        return ControllerOutput(clamp(hold, limits.pitch_min, limits.pitch_max),
                                CtrlStatus.FAULT), integ_state
    gk = schedule_factor(inp.beta_meas, gains.beta_K)
    u = gk * (gains.Kp * inp.omega_err + gains.Ki * integ_state)
    cmd = clamp(u, limits.pitch_min, limits.pitch_max)
    if cmd == u:
        integ_state = integ_state + Ts * inp.omega_err
    return ControllerOutput(cmd), integ_state


# ---------------------------------------------------------------------------
# stateful controller objects (shared interface for sim and hil)

class Controller:
    """Owns integrator, previous command and (for MPC) the warm start."""

    name = "controller"
    Np = 1
    Ts = 0.01

    rate_clips = 0

    def initialize(self, beta0, preview=None):
        """Reset internal state so that a zero speed error commands beta0.

        ``preview`` holds the first wind-deviation window; controllers with
        feedforward fold it into the integrator so the first command is bumpless.
        """
        raise NotImplementedError

    def step(self, inp: ControllerInput) -> ControllerOutput:
        raise NotImplementedError


class PiController(Controller):
    def __init__(self, gains: PiGains, limits: PitchLimits, Ts, Np=1, name="pi"):
        self.gains, self.limits, self.Ts, self.Np, self.name = gains, limits, Ts, Np, name
        self.initialize(limits.pitch_min)

    def initialize(self, beta0, preview=None):
        # integrator preloaded so a zero error reproduces beta0
        gk = schedule_factor(beta0, self.gains.beta_K)
        self.integ = beta0 / (gk * self.gains.Ki) if self.gains.Ki != 0 else 0.0
        self.prev = beta0

    def step(self, inp):
        out, self.integ = baseline_pi_step(self.gains, inp, self.integ, self.limits, self.Ts,
                                           self.prev)
        self.prev = out.beta_cmd
        return out


class LqrController(Controller):
    def __init__(self, design: LqDesign, limits: PitchLimits, use_preview=True,
                 rate_limit=False, name="lqr"):
        self.design, self.limits = design, limits
        self.use_preview, self.rate_limit, self.name = use_preview, rate_limit, name
        self.Np, self.Ts = design.Np, design.Ts
        self.initialize(design.beta_bar)

    def initialize(self, beta0, preview=None):
        self.integ = integrator_for(self.design, beta0, preview if self.use_preview else None)
        self.prev = beta0
        self.rate_clips = 0

    def step(self, inp):
        out, self.integ = lqr_step(self.design, inp, self.integ, self.limits, self.prev,
                                   self.use_preview, self.rate_limit)
        self.rate_clips += out.rate_clipped
        self.prev = out.beta_cmd
        return out


def integrator_for(design: LqDesign, beta0, preview=None):
    """Integrator value for which a zero speed error at pitch beta0 commands beta0,
    including the preview feedforward when a deviation window is given."""
    K = design.K
    db = beta0 - design.beta_bar
    if K[2] == 0.0:
        return 0.0
    ff = 0.0
    if preview is not None:
        d = np.asarray(preview, dtype=float)[:design.Np]
        ff = float(design.Kd[:len(d)] @ d)
    return -(db + K[1] * db + ff) / K[2]


class MpcController(Controller):
    def __init__(self, template: MpcTemplate, deadline_budget_us=10000.0, iter_cost_us=50.0,
                 max_iter=100, max_fallbacks=10, name="mpc"):
        self.template = template
        self.deadline_budget_us, self.iter_cost_us = deadline_budget_us, iter_cost_us
        self.max_iter, self.max_fallbacks, self.name = max_iter, max_fallbacks, name
        self.Np, self.Ts = template.Np, template.design.Ts
        self.initialize(template.design.beta_bar)

    def initialize(self, beta0, preview=None):
        self.integ = integrator_for(self.template.design, beta0, preview)
        self.prev = beta0
        self.warm = None
        self.fallback_run = 0
        self.rate_clips = 0

    def step(self, inp):
        res = mpc_step(self.template, inp, self.integ, self.prev, self.warm,
                       self.deadline_budget_us, self.iter_cost_us, self.max_iter)
        out = res.output
        self.rate_clips += out.rate_clipped
        self.integ, self.warm = res.integ_state, res.warm
        if out.status == CtrlStatus.FALLBACK:
            self.fallback_run += 1
            if self.fallback_run > self.max_fallbacks:
                out.status = CtrlStatus.FAULT
        elif out.status == CtrlStatus.OK:
            self.fallback_run = 0
        self.prev = out.beta_cmd
        return out
