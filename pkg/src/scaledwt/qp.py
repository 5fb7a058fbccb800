"""Dense primal active-set solver for strictly convex QPs.

    minimize    ½ xᵀHx + gᵀx
    subject to  lb  ≤ x    ≤ ub
                lbA ≤ A x  ≤ ubA

Constraints are numbered 0..n-1 for the box rows and n..n+p-1 for the rows
of ``A_ineq``.  Active sets use signed 1-based ids: ``-(j+1)`` means the
lower bound of constraint j is active, ``+(j+1)`` the upper bound.

Internally every finite bound becomes a one-sided row aᵀx ≥ b.  Steps use
the range-space form of the reduced KKT system: with H = LLᵀ factored once,
the working-set Schur complement S = A_W H⁻¹ A_Wᵀ is Cholesky factored
after every working-set change.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

REG_FLOOR = 1e-9
DEFAULT_MAX_ITER = 100


class QpStatus(str, enum.Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIterReached"
    INFEASIBLE = "Infeasible"


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_ineq: np.ndarray | None = None
    lbA: np.ndarray | None = None
    ubA: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H must be square, got {H.shape}")
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.g.size != n:
            raise ValueError(f"g has length {self.g.size}, expected {n}")
        scale = max(1.0, float(np.max(np.abs(H))) if n else 1.0)
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("H is not symmetric")
        H = 0.5 * (H + H.T)
        lam_min = float(np.linalg.eigvalsh(H)[0]) if n else 1.0
        if lam_min < REG_FLOOR:
            H = H + (REG_FLOOR - lam_min) * np.eye(n)
        self.H = H
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).reshape(-1)
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("box bounds must have length n")
        if self.A_ineq is None:
            self.A_ineq = np.zeros((0, n))
        self.A_ineq = np.atleast_2d(np.asarray(self.A_ineq, dtype=float))
        if self.A_ineq.size == 0:
            self.A_ineq = self.A_ineq.reshape(0, n)
        p = self.A_ineq.shape[0]
        if self.A_ineq.shape[1] != n:
            raise ValueError(f"A_ineq has {self.A_ineq.shape[1]} columns, expected {n}")
        self.lbA = np.full(p, -np.inf) if self.lbA is None else np.asarray(self.lbA, float).reshape(-1)
        self.ubA = np.full(p, np.inf) if self.ubA is None else np.asarray(self.ubA, float).reshape(-1)
        if self.lbA.size != p or self.ubA.size != p:
            raise ValueError("lbA/ubA must have one entry per row of A_ineq")
        if np.any(self.lb > self.ub) or np.any(self.lbA > self.ubA):
            raise ValueError("lower bounds must not exceed upper bounds")
        for name in ("g", "A_ineq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def p(self):
        return self.A_ineq.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def dump(self, path):
        """Plain-text dump: dimensions, then row-major arrays one per line."""
        with open(path, "w") as fh:
            fh.write(f"{self.n} {self.p}\n")
            for name in ("H", "g", "lb", "ub", "A_ineq", "lbA", "ubA"):
                arr = np.asarray(getattr(self, name)).reshape(-1)
                fh.write(name + " " + " ".join(repr(float(v)) for v in arr) + "\n")

    @classmethod
    def load_dump(cls, path):
        with open(path) as fh:
            n, p = (int(t) for t in fh.readline().split())
            arrays = {}
            for line in fh:
                name, *vals = line.split()
                arrays[name] = np.array([float(v) for v in vals])
        return cls(H=arrays["H"].reshape(n, n), g=arrays["g"], lb=arrays["lb"], ub=arrays["ub"],
                   A_ineq=arrays.get("A_ineq", np.zeros(0)).reshape(p, n),
                   lbA=arrays.get("lbA"), ubA=arrays.get("ubA"))


@dataclass
class QpSolution:
    x: np.ndarray
    active_set: list
    iterations: int
    status: QpStatus
    objective: float
    kkt_residual: float
    multipliers: dict = field(default_factory=dict)
    solve_time_us: float = 0.0
    objective_trace: list | None = None


@dataclass
class _Rows:
    """One-sided standard form rows Nx ≥ b with their signed ids."""

    N: np.ndarray
    b: np.ndarray
    ids: np.ndarray  # signed 1-based constraint ids, row order = tie-break order


def _one_sided_ids(problem):
    n = problem.n
    lo = np.concatenate([problem.lb, problem.lbA])
    hi = np.concatenate([problem.ub, problem.ubA])
    ids = []
    for j in range(n + problem.p):
        if np.isfinite(lo[j]):
            ids.append(-(j + 1))
        if np.isfinite(hi[j]):
            ids.append(j + 1)
    return np.array(ids, dtype=int)


def _rows_for(problem, ids):
    n = problem.n
    full = np.vstack([np.eye(n), problem.A_ineq])
    lo = np.concatenate([problem.lb, problem.lbA])
    hi = np.concatenate([problem.ub, problem.ubA])
    j = np.abs(ids) - 1
    sign = np.where(ids < 0, 1.0, -1.0)
    N = full[j] * sign[:, None]
    b = np.where(ids < 0, lo[j], -hi[j])
    return _Rows(N=N.reshape(len(ids), n), b=b, ids=ids)


def _signed_rows(problem, signed_ids):
    ids = np.asarray(signed_ids, dtype=int)
    n_con = problem.n + problem.p
    if ids.size and (np.any(ids == 0) or np.any(np.abs(ids) > n_con)):
        raise ValueError(f"warm-start active set references unknown constraints: {list(ids)}")
    return ids


class ActiveSetSolver:
    """Reusable solver workspace.

    Factorizations of H and of N H⁻¹ Nᵀ are cached against the identity of
    ``H`` and ``A_ineq`` and the finite-bound pattern, so repeated solves of
    problems that only change g and the bound values (the MPC case) skip
    the setup.  One instance must not be shared between threads.
    """

    def __init__(self, tol=1e-10):
        self.tol = tol
        self._key = None

    def _setup(self, problem):
        ids = _one_sided_ids(problem)
        key = (id(problem.H), id(problem.A_ineq), ids.tobytes())
        if key == self._key:
            return
        self._H_ref, self._A_ref = problem.H, problem.A_ineq  # keep ids alive
        self._cho = cho_factor(problem.H, lower=True)
        rows = _rows_for(problem, ids)
        self._N = rows.N
        self._ids = ids
        self._M = cho_solve(self._cho, rows.N.T) if len(ids) else np.zeros((problem.n, 0))
        self._G = rows.N @ self._M
        self._pos = {int(s): k for k, s in enumerate(ids)}
        self._key = key

    def solve(self, problem: QpProblem, warm_start=None, max_iter=DEFAULT_MAX_ITER, x0=None,
              record_trace=False):
        t0 = time.perf_counter()
        self._setup(problem)
        rows = _rows_for(problem, self._ids)
        b = rows.b
        N, G, M = self._N, self._G, self._M
        Hinv_g = cho_solve(self._cho, problem.g)
        iterations = 0

        W = None
        x = None
        if warm_start:
            W, x = self._warm_point(problem, _signed_rows(problem, warm_start), b, Hinv_g)
        if x is None:
            x, used = self._feasible_start(problem, b, x0, max_iter)
            iterations += used
            W = []
            if x is None:
                sol = self._finish(problem, self._phase1_x, [], iterations, QpStatus.INFEASIBLE)
                sol.solve_time_us = (time.perf_counter() - t0) * 1e6
                return sol

        trace = [problem.objective(x)] if record_trace else None
        status, x, W, used = _primal_active_set(N, b, G, M, Hinv_g, x, W,
                                                max_iter - iterations, self.tol, trace, problem)
        iterations += used
        sol = self._finish(problem, x, W, iterations, status)
        sol.objective_trace = trace
        sol.solve_time_us = (time.perf_counter() - t0) * 1e6
        return sol

    def _warm_point(self, problem, signed, b, Hinv_g):
        """Minimizer on the face of the warm-start set, if that face point is feasible."""
        W = []
        for s in signed.tolist():
            k = self._pos.get(int(s))
            if k is None or k in W:
                raise ValueError(f"warm-start id {s} is not a finite bound")
            trial = sorted(W + [k])
            try:
                np.linalg.cholesky(self._G[np.ix_(trial, trial)])
            except np.linalg.LinAlgError:
                continue  # linearly dependent on rows already kept
            W = trial
        if not W:
            x = -Hinv_g
        else:
            S = self._G[np.ix_(W, W)]
            mu = np.linalg.solve(S, b[W] + self._N[W] @ Hinv_g)
            x = self._M[:, W] @ mu - Hinv_g
        slack = self._N @ x - b
        if np.all(slack >= -1e-12 * (1.0 + np.abs(b))):
            return W, x
        return None, None

    def _feasible_start(self, problem, b, x0, max_iter):
        N = self._N
        if x0 is not None:
            x = np.asarray(x0, dtype=float).copy()
            if np.all(N @ x - b >= -1e-12 * (1.0 + np.abs(b))):
                return x, 0
        x = np.clip(np.zeros(problem.n), problem.lb, problem.ub)
        if np.all(N @ x - b >= -1e-12 * (1.0 + np.abs(b))):
            return x, 0
        return self._phase1(problem, x, max_iter)

    def _phase1(self, problem, x_box, max_iter):
        """Find a point satisfying the general rows, starting from a box point.

        Solves min ½|x - x_box|² + ½s² + ρs over z = (x, s) with the general
        rows relaxed by s >= 0, using the same active-set core (H = I).  This
        is an exact penalty: once ρ exceeds the multiplier mass the optimum
        has s = 0 whenever the rows are feasible, so ρ is raised until s
        vanishes or the retries run out.
        """
        n, p = problem.n, problem.p
        A = problem.A_ineq
        rows_N, rows_b = [], []
        for j in range(n):
            e = np.zeros(n + 1)
            e[j] = 1.0
            if np.isfinite(problem.lb[j]):
                rows_N.append(e)
                rows_b.append(problem.lb[j])
            if np.isfinite(problem.ub[j]):
                rows_N.append(-e)
                rows_b.append(-problem.ub[j])
        s_row = np.zeros(n + 1)
        s_row[n] = 1.0
        rows_N.append(s_row)
        rows_b.append(0.0)
        for r in range(p):
            if np.isfinite(problem.lbA[r]):
                rows_N.append(np.concatenate([A[r], [1.0]]))
                rows_b.append(problem.lbA[r])
            if np.isfinite(problem.ubA[r]):
                rows_N.append(np.concatenate([-A[r], [1.0]]))
                rows_b.append(-problem.ubA[r])
        N1 = np.array(rows_N)
        b1 = np.array(rows_b)
        G1 = N1 @ N1.T
        M1 = N1.T
        viol = b1 - N1[:, :n] @ x_box
        scale = 1.0 + float(np.max(np.abs(b1), initial=0.0)) + float(np.max(np.abs(x_box), initial=0.0))
        rho = 10.0 * scale
        cap = max(max_iter, 10 * (n + p) + 50)
        used = 0
        for _ in range(4):
            z = np.concatenate([x_box, [max(0.0, float(viol.max())) * 1.01 + 1e-12]])
            Hinv_g1 = np.concatenate([-x_box, [rho]])
            status, z, _, it = _primal_active_set(N1, b1, G1, M1, Hinv_g1, z, [], cap,
                                                  self.tol, None, None)
            used += it
            self._phase1_x = z[:n]
            if status is not QpStatus.SOLVED:
                break
            if z[n] <= 1e-12 * scale:
                return z[:n], used
            rho *= 100.0
        return None, used

    def _finish(self, problem, x, W, iterations, status):
        active = [int(self._ids[k]) for k in W]
        mult = {}
        if W:
            grad = problem.H @ x + problem.g
            S = self._G[np.ix_(W, W)]
            lam = np.linalg.solve(S, self._M[:, W].T @ grad)
            mult = {int(self._ids[k]): float(v) for k, v in zip(W, lam)}
        res = kkt_residual(problem, x, active) if status is not QpStatus.INFEASIBLE else math.inf
        return QpSolution(x=x, active_set=active, iterations=iterations, status=status,
                          objective=problem.objective(x), kkt_residual=res, multipliers=mult)


def _primal_active_set(N, b, G, M, Hinv_g, x, W, max_iter, tol, trace, problem):
    """Core iteration from a feasible x.  Returns (status, x, W, iterations)."""
    W = sorted(W)
    x = x.copy()
    m = N.shape[0]
    in_W = np.zeros(m, dtype=bool)
    in_W[W] = True
    it = 0
    chol = None
    while it < max_iter:
        it += 1
        h = x + Hinv_g  # H⁻¹·gradient
        if len(W) == N.shape[1]:
            # vertex: the working set pins x, so the step is exactly zero
            if chol is None:
                chol = cho_factor(G[np.ix_(W, W)], lower=True)
            lam = cho_solve(chol, N[W] @ h)
            p = np.zeros_like(x)
        elif W:
            if chol is None:
                chol = cho_factor(G[np.ix_(W, W)], lower=True)
            lam = cho_solve(chol, N[W] @ h)
            p = M[:, W] @ lam - h
        else:
            lam = np.zeros(0)
            p = -h
        step_scale = max(1.0, np.max(np.abs(x), initial=0.0), np.max(np.abs(h), initial=0.0))
        if np.max(np.abs(p), initial=0.0) <= tol * step_scale:
            if lam.size == 0 or lam.min() >= -tol * max(1.0, np.max(np.abs(lam))):
                return QpStatus.SOLVED, x, W, it
            drop = int(np.argmin(lam))  # first minimum = smallest constraint index
            in_W[W[drop]] = False
            del W[drop]
            chol = None
            continue
        Np = N @ p
        cand = (~in_W) & (Np < -1e-14 * max(1.0, np.max(np.abs(p))))
        alpha = 1.0
        block = -1
        if np.any(cand):
            idx = np.nonzero(cand)[0]
            slack = np.maximum(N[idx] @ x - b[idx], 0.0)
            ratios = slack / (-Np[idx])
            k = int(np.argmin(ratios))
            if ratios[k] < 1.0:
                alpha = float(ratios[k])
                block = int(idx[k])
        x = x + alpha * p
        if block >= 0:
            W = sorted(W + [block])
            in_W[block] = True
            chol = None
        if trace is not None:
            trace.append(problem.objective(x))
    return QpStatus.MAX_ITER, x, W, it


def solve(problem: QpProblem, warm_start=None, max_iter=DEFAULT_MAX_ITER, x0=None,
          record_trace=False):
    """One-shot solve with a fresh workspace."""
    return ActiveSetSolver().solve(problem, warm_start=warm_start, max_iter=max_iter, x0=x0,
                                   record_trace=record_trace)


def kkt_residual(problem: QpProblem, x, active_set):
    """Max of stationarity, primal infeasibility and complementarity/dual-sign violation.

    Multipliers for the given active set are recovered by least squares on
    the stationarity condition.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != problem.n:
        raise ValueError(f"x has length {x.size}, expected {problem.n}")
    grad = problem.H @ x + problem.g
    all_ids = _one_sided_ids(problem)
    rows = _rows_for(problem, all_ids)
    slack = rows.N @ x - rows.b
    primal = float(max(0.0, -slack.min())) if slack.size else 0.0
    active = _signed_rows(problem, list(active_set))
    if active.size == 0:
        return max(float(np.max(np.abs(grad), initial=0.0)), primal)
    act = _rows_for(problem, active)
    lam, *_ = np.linalg.lstsq(act.N.T, grad, rcond=None)
    stationarity = float(np.max(np.abs(grad - act.N.T @ lam)))
    act_slack = act.N @ x - act.b
    comp = float(np.max(np.abs(lam * act_slack)))
    dual = float(max(0.0, -lam.min()))
    return max(stationarity, primal, comp, dual)
