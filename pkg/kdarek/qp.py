"""
Dense primal active-set solver for small strictly convex QPs

    min 1/2 x^T H x + f^T x   s.t.   A x <= b
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from kdarek.errors import MaxIterations, QpInfeasible

logger = logging.getLogger("kdarek.qp")


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    active: tuple
    multipliers: np.ndarray
    iterations: int
    kkt_residual: float


def kkt_residual(H, f, A, b, x, multipliers):
    """max of stationarity, primal infeasibility, dual infeasibility and complementarity."""
    stationarity = H @ x + f + (A.T @ multipliers if len(A) else 0.0)
    parts = [np.max(np.abs(stationarity))]
    if len(A):
        slack = A @ x - b
        parts += [np.max(np.maximum(slack, 0.0)), np.max(np.maximum(-multipliers, 0.0)),
                  np.max(np.abs(multipliers * slack))]
    return float(max(parts))


def _equality_qp(H, f, A_w, b_w):
    """Solve min 1/2 x^T H x + f^T x s.t. A_w x = b_w through its KKT system."""
    n, k = len(f), len(A_w)
    if k == 0:
        return np.linalg.solve(H, -f), np.zeros(0)
    KKT = np.block([[H, A_w.T], [A_w, np.zeros((k, k))]])
    sol = np.linalg.solve(KKT, np.concatenate([-f, b_w]))
    return sol[:n], sol[n:]


def _feasible_start(A, b, tol):
    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * A.shape[1], method="highs")
    if res.status != 0 or np.max(A @ res.x - b) > 1e3 * tol:
        raise QpInfeasible(f"No feasible point ({res.message})")
    return res.x


def _independent_subset(A, candidates):
    chosen = []
    for i in candidates:
        if np.linalg.matrix_rank(A[chosen + [i]]) == len(chosen) + 1:
            chosen.append(i)
    return chosen


def qp_solve(H, f, A=None, b=None, x0=None, max_iters=200, tol=1e-10):
    H = np.atleast_2d(np.asarray(H, dtype=float))
    f = np.asarray(f, dtype=float).ravel()
    n = len(f)
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    m = len(A)
    if len(b) != m:
        raise ValueError(f"{m} constraint rows but {len(b)} bounds")

    x = np.linalg.solve(H, -f)
    if m == 0 or np.all(A @ x <= b + tol * (1.0 + np.abs(b))):
        lam = np.zeros(m)
        return QpSolution(x, (), lam, 0, kkt_residual(H, f, A, b, x, lam))

    x = _feasible_start(A, b, tol) if x0 is None else np.asarray(x0, dtype=float)
    near = np.flatnonzero(np.abs(A @ x - b) <= 1e3 * tol * (1.0 + np.abs(b)))
    working = _independent_subset(A, list(near))[:n]

    for it in range(1, max_iters + 1):
        g = H @ x + f
        p, lam_w = _equality_qp(H, g, A[working], np.zeros(len(working)))
        if np.linalg.norm(p) <= 1e3 * tol * (1.0 + np.linalg.norm(x)):
            if not working or np.min(lam_w) >= -tol:
                # polish x on the final working set
                x, lam_w = _equality_qp(H, f, A[working], b[working])
                lam = np.zeros(m)
                lam[working] = lam_w
                return QpSolution(x, tuple(sorted(working)), lam, it, kkt_residual(H, f, A, b, x, lam))
            working.pop(int(np.argmin(lam_w)))
            continue

        step, blocking = 1.0, None
        Ap = A @ p
        for i in range(m):
            if i in working or Ap[i] <= tol:
                continue
            reach = max((b[i] - A[i] @ x) / Ap[i], 0.0)
            if reach < step:
                step, blocking = reach, i
        x = x + step * p
        if blocking is not None:
            working.append(blocking)

    logger.error(f"Active-set QP did not terminate in {max_iters} iterations")
    raise MaxIterations(f"Active-set QP did not terminate in {max_iters} iterations")
