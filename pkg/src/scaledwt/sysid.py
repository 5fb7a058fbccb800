"""Linear design model: finite-difference linearization and LS identification."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import TurbineParams, aero_torque, rk4

log = logging.getLogger(__name__)

MODEL_JSON_VERSION = 1


class NoEquilibriumError(ValueError):
    pass


class InsufficientExcitationError(ValueError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    v: float  # m/s
    omega: float  # rad/s
    beta: float  # rad
    q_gen: float  # N·m


@dataclass
class LinearModel:
    """Discrete-time model x+ = A x + B u + Bd d, y = C x (deviation coordinates)."""

    A: np.ndarray
    B: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    Ts: float
    op_point: OperatingPoint
    state_labels: list = field(default_factory=lambda: ["omega_dev", "beta_dev"])
    residual_rms: float | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, 1)
        self.Bd = np.asarray(self.Bd, dtype=float).reshape(n, 1)
        self.C = np.asarray(self.C, dtype=float).reshape(1, n)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if len(self.state_labels) != n:
            raise ValueError("state_labels length does not match A")
        if not self.Ts > 0:
            raise ValueError("Ts must be > 0")

    @property
    def n(self):
        return self.A.shape[0]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def to_dict(self):
        op = self.op_point
        return {
            "version": MODEL_JSON_VERSION,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Bd": self.Bd.tolist(),
            "C": self.C.tolist(),
            "Ts": self.Ts,
            "op_point": {"v": op.v, "omega": op.omega, "beta": op.beta, "q_gen": op.q_gen},
            "state_labels": list(self.state_labels),
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("version")
        if version != MODEL_JSON_VERSION:
            raise ValueError(f"unsupported model.json version {version!r}")
        return cls(A=doc["A"], B=doc["B"], Bd=doc["Bd"], C=doc["C"], Ts=doc["Ts"],
                   op_point=OperatingPoint(**doc["op_point"]),
                   state_labels=list(doc["state_labels"]),
                   residual_rms=doc.get("residual_rms"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# matrix exponential and ZOH discretization

def expm_series(M, tol=1e-12):
    """Matrix exponential by scaling and squaring of a truncated Taylor series.

    The scaled argument has 1-norm <= 0.5, so the series is cut once a term
    drops below ``tol * 2**-(s + 20)`` of the partial sum; the squaring
    stage amplifies that truncation by at most 2**s.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix exponential of a non-finite matrix")
    norm = np.linalg.norm(M, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / 2.0 ** s
    term = np.eye(M.shape[0])
    E = term.copy()
    for k in range(1, 60):
        term = term @ X / k
        E = E + term
        if np.linalg.norm(term, 1) <= tol * 2.0 ** -(s + 20) * np.linalg.norm(E, 1):
            break
    for _ in range(s):
        E = E @ E
    return E


def discretize_zoh(Ac, Bc, Ts):
    """Exact zero-order-hold discretization of (Ac, Bc) via one augmented exponential."""
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.asarray(Bc, dtype=float).reshape(Ac.shape[0], -1)
    if not (math.isfinite(Ts) and Ts > 0):
        raise ValueError(f"Ts must be finite and > 0, got {Ts}")
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac * Ts
    aug[:n, n:] = Bc * Ts
    E = expm_series(aug)
    return E[:n, :n], E[:n, n:]


# ---------------------------------------------------------------------------
# equilibrium and linearization

def find_equilibrium(params: TurbineParams, v_bar, target_omega=None, tol=1e-10):
    """Pitch angle holding ``target_omega`` at wind ``v_bar`` with rated torque.

    Bisection on [pitch_min, pitch_max]; returns (beta, q_gen).
    """
    if target_omega is None:
        target_omega = params.rated_speed
    if not target_omega > 0:
        raise ValueError("target_omega must be > 0")
    q_gen = params.rated_gen_torque

    def residual(beta):
        return aero_torque(v_bar, target_omega, beta, params) - q_gen

    lo, hi = params.pitch_min, params.pitch_max
    f_lo, f_hi = residual(lo), residual(hi)
    if f_lo == 0.0:
        return lo, q_gen
    if f_lo < 0.0 or f_hi > 0.0:
        raise NoEquilibriumError(
            f"no equilibrium at v={v_bar} m/s: torque residual spans "
            f"[{f_hi:.4g}, {f_lo:.4g}] N·m over the pitch range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = residual(mid)
        if abs(f_mid) <= tol or hi - lo <= 1e-15:
            return mid, q_gen
        if f_mid > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), q_gen


def operating_point(params, v_bar, target_omega=None):
    omega = params.rated_speed if target_omega is None else target_omega
    beta, q_gen = find_equilibrium(params, v_bar, omega)
    return OperatingPoint(v=float(v_bar), omega=float(omega), beta=float(beta), q_gen=float(q_gen))


def linearize_dynamics(f, x0, u0, d0, Ts, perturbation=1e-5):
    """Central-difference Jacobians of continuous dynamics ``f(x, u, d)``, then ZOH.

    Returns discrete (A, B, Bd).  The input and the disturbance share the
    same zero-order hold.
    """
    if not 1e-6 <= perturbation <= 1e-2:
        raise ValueError("perturbation must lie in [1e-6, 1e-2]")
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    z0 = np.concatenate([x0, [u0, d0]])

    def fz(z):
        return np.asarray(f(z[:n], z[n], z[n + 1]), dtype=float)

    J = np.zeros((n, n + 2))
    for i in range(n + 2):
        h = perturbation * max(abs(z0[i]), 1.0)
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        J[:, i] = (fz(zp) - fz(zm)) / (2.0 * h)
    Ac, Bc = J[:, :n], J[:, n:]
    if not np.all(np.isfinite(J)):
        raise ValueError("non-finite Jacobian; cannot discretize")
    A, Bboth = discretize_zoh(Ac, Bc, Ts)
    return A, Bboth[:, :1], Bboth[:, 1:2]


def rotor_dynamics(params, q_gen):
    """Continuous rotor + actuator dynamics on x = [omega, beta] (rate limit inactive)."""
    J, tau = params.inertia, params.actuator_tau

    def f(x, u, d):
        omega, beta = x
        return [(aero_torque(d, omega, beta, params) - q_gen) / J, (u - beta) / tau]

    return f


def linearize(params: TurbineParams, op_point: OperatingPoint, perturbation=1e-5, Ts=0.01,
              residual_tol=1e-6):
    """Discrete design model of the rotor + actuator about ``op_point``."""
    residual = aero_torque(op_point.v, op_point.omega, op_point.beta, params) - op_point.q_gen
    if not abs(residual) < residual_tol:
        raise NoEquilibriumError(
            f"operating point is not an equilibrium: torque residual {residual:.3g} N·m")
    f = rotor_dynamics(params, op_point.q_gen)
    A, B, Bd = linearize_dynamics(f, [op_point.omega, op_point.beta], op_point.beta,
                                  op_point.v, Ts, perturbation)
    return LinearModel(A=A, B=B, Bd=Bd, C=[[1.0, 0.0]], Ts=Ts, op_point=op_point)


# ---------------------------------------------------------------------------
# identification

def prbs(n_samples, amplitude=0.02, hold=1, seed=0x1FF):
    """±amplitude maximum-length sequence from a 9-bit LFSR (x^9 + x^5 + 1)."""
    state = seed & 0x1FF or 0x1FF
    out = np.empty(n_samples)
    value = amplitude
    for k in range(n_samples):
        if k % hold == 0:
            bit = ((state >> 8) ^ (state >> 4)) & 1
            state = ((state << 1) | bit) & 0x1FF
            value = amplitude if bit else -amplitude
        out[k] = value
    return out


@dataclass
class IoData:
    """Sampled identification record: input u_k (rad), disturbance d_k (m/s),
    output y_k (rad/s).  ``beta`` holds measured pitch when available."""

    u: np.ndarray
    d: np.ndarray
    y: np.ndarray
    Ts: float
    beta: np.ndarray | None = None
    op_point: OperatingPoint | None = None


def _lstsq(Phi, target, max_cond=1e8):
    cond = np.linalg.cond(Phi)
    if not np.isfinite(cond) or cond > max_cond:
        raise InsufficientExcitationError(
            f"regressor matrix is rank deficient or ill conditioned (cond={cond:.3g})")
    theta, *_ = np.linalg.lstsq(Phi, target, rcond=None)
    return theta


def identify_ls(io: IoData, model_order=2):
    """Least-squares ARX fit around the data mean, returned in state-space form.

    Without measured pitch, a SISO ARX(n) model is fit and realized in
    observer companion form (state 0 is the speed output).  With measured
    pitch and ``model_order == 2`` the states [omega, beta] are both measured,
    so the vector ARX(1) fit x+ = A x + B u + Bd d is already a physical
    state-space model.  A constant disturbance record carries no information
    about Bd; its regressor is dropped and Bd is returned as zeros.
    """
    u = np.asarray(io.u, dtype=float)
    d = np.asarray(io.d, dtype=float)
    y = np.asarray(io.y, dtype=float)
    n = int(model_order)
    if n < 1:
        raise ValueError("model_order must be >= 1")
    N = y.size
    if not (u.size == d.size == N):
        raise ValueError("u, d and y must have equal length")
    if N < 50 * n:
        raise ValueError(f"need at least {50 * n} samples for order {n}, got {N}")
    u = u - u.mean()
    y = y - y.mean()
    d_excited = np.ptp(d) > 1e-12
    d = d - d.mean()
    if not d_excited:
        log.warning("disturbance record is constant; Bd is not identifiable and set to zero")
    op = io.op_point or OperatingPoint(v=float(np.mean(io.d)), omega=float(np.mean(io.y)),
                                       beta=float(np.mean(io.u)), q_gen=float("nan"))

    if io.beta is not None and n == 2:
        beta = np.asarray(io.beta, dtype=float)
        beta = beta - beta.mean()
        X = np.column_stack([y, beta])
        cols = [X[:-1, 0], X[:-1, 1], u[:-1]] + ([d[:-1]] if d_excited else [])
        # the intercept absorbs the offset left by removing full-record means
        Phi = np.column_stack(cols + [np.ones(N - 1)])
        theta = _lstsq(Phi, X[1:])
        resid = X[1:] - Phi @ theta
        A = theta[:2].T
        B = theta[2:3].T
        Bd = theta[3:4].T if d_excited else np.zeros((2, 1))
        return LinearModel(A=A, B=B, Bd=Bd, C=[[1.0, 0.0]], Ts=io.Ts, op_point=op,
                           residual_rms=float(np.sqrt(np.mean(resid ** 2))))

    rows = N - n
    cols = [y[n - i:N - i] for i in range(1, n + 1)]
    cols += [u[n - i:N - i] for i in range(1, n + 1)]
    if d_excited:
        cols += [d[n - i:N - i] for i in range(1, n + 1)]
    Phi = np.column_stack(cols + [np.ones(rows)])
    target = y[n:]
    assert Phi.shape[0] == rows
    theta = _lstsq(Phi, target)
    resid = target - Phi @ theta
    a = theta[:n]
    b = theta[n:2 * n]
    e = theta[2 * n:3 * n] if d_excited else np.zeros(n)
    A = np.zeros((n, n))
    A[:, 0] = a
    A[:-1, 1:] = np.eye(n - 1)
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    labels = ["y"] + [f"z{i}" for i in range(1, n)]
    return LinearModel(A=A, B=b, Bd=e, C=C, Ts=io.Ts, op_point=op, state_labels=labels,
                       residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def linear_prbs_amplitude(params: TurbineParams, cap=0.02):
    """Largest PRBS amplitude whose switches (2A) stay off the actuator rate limit.

    A command jump of 2A drives the lag at 2A/τ initially; keeping that
    below the rate limit keeps the identification data linear.
    """
    return min(cap, 0.45 * params.pitch_rate_limit * params.actuator_tau)


def collect_prbs_data(params: TurbineParams, op_point: OperatingPoint, n_samples=3000,
                      amplitude=None, Ts=0.01, dt_plant=0.001, hold=1, seed=0x1FF):
    """Identification run on the truth model: PRBS pitch about the operating point.

    The wind is held at the operating point, so the returned record has no
    disturbance excitation.  Speed and pitch are sampled every ``Ts``.
    """
    if amplitude is None:
        amplitude = linear_prbs_amplitude(params)
    steps = int(round(Ts / dt_plant))
    if steps < 1 or abs(steps * dt_plant - Ts) > 1e-12:
        raise ValueError("Ts must be an integer multiple of dt_plant")
    u = prbs(n_samples, amplitude, hold, seed)
    omega, beta = op_point.omega, op_point.beta
    y = np.empty(n_samples)
    b = np.empty(n_samples)
    for k in range(n_samples):
        y[k], b[k] = omega, beta
        cmd = op_point.beta + u[k]
        for _ in range(steps):
            omega, beta, _, _, _ = rk4(omega, beta, 0.0, 0.0, op_point.v, op_point.q_gen, cmd,
                                       dt_plant, params)
    return IoData(u=op_point.beta + u, d=np.full(n_samples, op_point.v), y=y, Ts=Ts, beta=b,
                  op_point=op_point)


def simulate_linear(model: LinearModel, u, d, x0=None):
    """Roll a discrete model forward; returns the state trajectory (N+1 × n)."""
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    out = np.empty((u.size + 1, model.n))
    out[0] = x
    B, Bd = model.B[:, 0], model.Bd[:, 0]
    for k in range(u.size):
        x = model.A @ x + B * u[k] + Bd * d[k]
        out[k + 1] = x
    return out


def compare_models(identified: LinearModel, reference: LinearModel, names=("A", "B")):
    """Largest entrywise relative error of ``identified`` against ``reference``.

    Entries that are zero in the reference are judged relative to the largest
    entry of that matrix, so structural zeros do not divide by zero.
    """
    worst = 0.0
    for name in names:
        a = np.asarray(getattr(identified, name), dtype=float)
        r = np.asarray(getattr(reference, name), dtype=float)
        if a.shape != r.shape:
            raise ValueError(f"{name} shapes differ: {a.shape} vs {r.shape}")
        scale = np.where(r != 0.0, np.abs(r), np.max(np.abs(r)) or 1.0)
        worst = max(worst, float(np.max(np.abs(a - r) / scale)))
    return worst
