"""Brute-force QP oracles, independent of the active-set solver's linear algebra.

Problems are passed as plain arrays so nothing from scaledwt.qp is reused.
"""
from itertools import combinations, product

import numpy as np


def one_sided(H, g, lb, ub, A, lbA, ubA):
    """All finite bounds as rows C x >= d, tagged with (constraint, side)."""
    n = H.shape[0]
    full = np.vstack([np.eye(n), A.reshape(-1, n)])
    lo = np.concatenate([lb, lbA])
    hi = np.concatenate([ub, ubA])
    C, d, tags = [], [], []
    for j in range(full.shape[0]):
        if np.isfinite(lo[j]):
            C.append(full[j]); d.append(lo[j]); tags.append((j, -1))
        if np.isfinite(hi[j]):
            C.append(-full[j]); d.append(-hi[j]); tags.append((j, +1))
    return np.array(C).reshape(-1, n), np.array(d), tags


def enumerate_kkt(H, g, lb, ub, A, lbA, ubA, tol=1e-9):
    """Exhaustive search over candidate active sets (each constraint inactive,
    at its lower bound or at its upper bound; at most n active).

    Returns the unique KKT point of the strictly convex problem, or None if
    no candidate passes.
    """
    n = H.shape[0]
    full = np.vstack([np.eye(n), A.reshape(-1, n)])
    lo = np.concatenate([lb, lbA])
    hi = np.concatenate([ub, ubA])
    m = full.shape[0]
    C, d, _ = one_sided(H, g, lb, ub, A, lbA, ubA)
    for size in range(0, n + 1):
        for subset in combinations(range(m), size):
            side_choices = []
            for j in subset:
                sides = []
                if np.isfinite(lo[j]):
                    sides.append(-1)
                if np.isfinite(hi[j]) and hi[j] != lo[j]:
                    sides.append(+1)
                side_choices.append(sides)
            for sides in product(*side_choices):
                rows = np.array([full[j] for j in subset]).reshape(size, n)
                rhs = np.array([lo[j] if s < 0 else hi[j] for j, s in zip(subset, sides)])
                K = np.zeros((n + size, n + size))
                K[:n, :n] = H
                K[:n, n:] = rows.T
                K[n:, :n] = rows
                try:
                    sol = np.linalg.solve(K, np.concatenate([-g, rhs]))
                except np.linalg.LinAlgError:
                    continue
                if size and np.linalg.matrix_rank(rows) < size:
                    continue
                x = sol[:n]
                nu = sol[n:]  # H x + g + rowsᵀ nu = 0
                # lower side needs nu <= 0, upper side nu >= 0
                ok = all((s < 0 and v <= tol) or (s > 0 and v >= -tol) for s, v in zip(sides, nu))
                if not ok:
                    continue
                if C.size and np.min(C @ x - d) < -tol * (1 + np.max(np.abs(d))):
                    continue
                return x
    return None


def dual_projected_gradient(H, g, lb, ub, A, lbA, ubA, tol=1e-12, max_iter=400000):
    """Accelerated projected gradient on the dual (λ >= 0) of min ½xᵀHx+gᵀx s.t. Cx >= d.

    x(λ) = H⁻¹(Cᵀλ - g).  Stops once successive primal iterates move less
    than ``tol`` and the primal point is feasible to ``100 * tol``.
    """
    C, d, _ = one_sided(H, g, lb, ub, A, lbA, ubA)
    Hinv = np.linalg.inv(H)
    if C.shape[0] == 0:
        return -Hinv @ g
    Q = C @ Hinv @ C.T
    q = d + C @ Hinv @ g
    L = np.linalg.eigvalsh(Q)[-1]
    lam = np.zeros(C.shape[0])
    y = lam.copy()
    t = 1.0
    x_prev = Hinv @ (C.T @ lam - g)
    for _ in range(max_iter):
        lam_new = np.maximum(0.0, y - (Q @ y - q) / L)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if (Q @ lam_new - q) @ (lam_new - lam) > 0:  # gradient restart
            t_new = 1.0
            y = lam_new
        else:
            y = lam_new + (t - 1) / t_new * (lam_new - lam)
        lam, t = lam_new, t_new
        x = Hinv @ (C.T @ lam - g)
        if np.max(np.abs(x - x_prev)) <= tol and np.min(C @ x - d) >= -100 * tol:
            return x
        x_prev = x
    return x


def random_qp(rng, n=None, p=None):
    """Random feasible strictly convex QP with diagonally dominant H (n <= 6, p <= 8)."""
    n = int(rng.integers(1, 7)) if n is None else n
    p = int(rng.integers(0, 9)) if p is None else p
    R = rng.uniform(-1, 1, (n, n))
    H = 0.5 * (R + R.T)
    np.fill_diagonal(H, 0.0)
    H[np.diag_indices(n)] = np.abs(H).sum(axis=1) + rng.uniform(0.5, 2.0, n)
    g = rng.normal(0, 3, n)
    x_f = rng.normal(0, 1, n)
    lb = x_f - rng.uniform(0, 2, n)
    ub = x_f + rng.uniform(0, 2, n)
    lb[rng.random(n) < 0.3] = -np.inf
    ub[rng.random(n) < 0.3] = np.inf
    A = rng.normal(0, 1, (p, n))
    lbA = A @ x_f - rng.uniform(0, 1, p)
    ubA = A @ x_f + rng.uniform(0, 1, p)
    lbA[rng.random(p) < 0.3] = -np.inf
    ubA[rng.random(p) < 0.3] = np.inf
    return dict(H=H, g=g, lb=lb, ub=ub, A=A, lbA=lbA, ubA=ubA)


def oracle_solution(prob):
    """Enumeration for n <= 4 (cross-checked by projected gradient), projected gradient above."""
    args = (prob["H"], prob["g"], prob["lb"], prob["ub"], prob["A"], prob["lbA"], prob["ubA"])
    x_pg = dual_projected_gradient(*args)
    if prob["H"].shape[0] <= 4:
        x_en = enumerate_kkt(*args)
        if x_en is None or np.max(np.abs(x_en - x_pg)) > 1e-6:
            raise AssertionError("oracles disagree")
        return x_en
    return x_pg
