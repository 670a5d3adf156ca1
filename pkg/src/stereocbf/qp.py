"""Dense dual active-set solver for the projection QP of a CBF filter.

Solves ``min 0.5 * ||u - u_des||^2  s.t.  A u >= b`` with the
Goldfarb-Idnani dual method: start from the unconstrained minimiser and
repeatedly add the most violated constraint, dropping active ones whose
multiplier would turn negative. Infeasibility shows up as a constraint that
can be neither satisfied by a primal step nor unblocked by a dual step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class QPSolution:
    u: np.ndarray
    multipliers: np.ndarray  # one per constraint row, zero when inactive
    active: list
    feasible: bool
    iterations: int


def solve_qp(u_des, A, b, tol: float = 1e-12, max_iter: int = 1000) -> QPSolution:
    u_des = np.asarray(u_des, dtype=float)
    n = u_des.shape[0]
    A = np.asarray(A, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).reshape(-1)
    m = A.shape[0]
    x = u_des.copy()
    active: list[int] = []
    lam = np.zeros(0)
    scale = 1.0 + np.abs(b) + np.linalg.norm(A, axis=1) * (1.0 + np.linalg.norm(u_des))

    it = 0
    while it < max_iter:
        it += 1
        s = A @ x - b
        viol = s / scale
        if active:
            viol[active] = np.inf
        p = int(np.argmin(viol)) if m else -1
        if m == 0 or viol[p] >= -tol:
            break
        n_p = A[p]
        lam_p = 0.0
        while True:
            if active:
                N = A[active]
                r = np.linalg.solve(N @ N.T, N @ n_p)
                z = n_p - N.T @ r
            else:
                r = np.zeros(0)
                z = n_p
            t1, drop = np.inf, None
            for j, rj in enumerate(r):
                if rj > tol and lam[j] / rj < t1:
                    t1, drop = lam[j] / rj, j
            zn = z @ n_p
            t2 = -(n_p @ x - b[p]) / zn if np.linalg.norm(z) > 1e-14 * np.linalg.norm(n_p) and zn > 0 else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                mult = np.zeros(m)
                mult[active] = lam
                return QPSolution(x, mult, active, False, it)
            if np.isfinite(t2):
                x = x + t * z
            lam = lam - t * r
            lam_p += t
            if t == t2:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            del active[drop]
            lam = np.delete(lam, drop)

    x, lam = _polish(u_des, A, b, active, x, lam)
    mult = np.zeros(m)
    mult[active] = lam
    return QPSolution(x, mult, list(active), True, it)


def _polish(u_des, A, b, active, x, lam):
    """Re-solve the equality-constrained projection on the final active set."""
    if not active:
        return u_des.copy(), lam
    N = A[active]
    try:
        lam_new = np.linalg.solve(N @ N.T, b[active] - N @ u_des)
    except np.linalg.LinAlgError:
        return x, lam
    if np.any(lam_new < -1e-12):
        return x, lam
    return u_des + N.T @ lam_new, np.maximum(lam_new, 0.0)


def kkt_residuals(u, u_des, A, b, multipliers) -> dict:
    """Absolute KKT residuals of a candidate solution."""
    u = np.asarray(u, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, u.shape[0])
    b = np.asarray(b, dtype=float).reshape(-1)
    lam = np.asarray(multipliers, dtype=float)
    slack = A @ u - b
    return {
        "stationarity": float(np.max(np.abs(u - u_des - A.T @ lam))),
        "primal": float(max(0.0, -slack.min())) if len(b) else 0.0,
        "dual": float(max(0.0, -lam.min())) if len(lam) else 0.0,
        "complementarity": float(np.max(np.abs(lam * slack))) if len(b) else 0.0,
    }
