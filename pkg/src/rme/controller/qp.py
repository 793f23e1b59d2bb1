"""Small dense QP with inequality constraints, solved exactly by active set.

Problem:  min 1/2 x^T Q x - p^T x   s.t.  A x >= c,  with Q positive definite.

With ``x0 = Q^-1 p`` the optimum is ``x = x0 + Q^-1 A^T lam`` where ``lam``
solves the bound-constrained dual

    min_{lam >= 0} 1/2 lam^T H lam - d^T lam,   H = A Q^-1 A^T,  d = c - A x0.

The dual is always feasible (lam = 0), so the active-set iteration can be
warm-started from any index set; the previous tick's set is the usual choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "optimal"
DEGENERATE = "degenerate"


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    lam: np.ndarray
    active: tuple[int, ...]
    status: str
    iterations: int


def kkt_closed_form(Q_inv, x0, A_act, c_act) -> tuple[np.ndarray, np.ndarray]:
    """Optimum when the rows ``A_act`` are exactly the active constraints."""
    QA = Q_inv @ A_act.T
    lam = np.linalg.solve(A_act @ QA, c_act - A_act @ x0)
    return x0 + QA @ lam, lam


def _solve_sub(H, d, idx):
    if not idx:
        return np.zeros(0)
    sub = H[np.ix_(idx, idx)]
    try:
        return np.linalg.solve(sub, d[idx])
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(sub, d[idx], rcond=None)[0]


def solve_dual_active_set(H, d, warm=(), max_iter: int = 50, tol: float = 1e-12):
    """Lawson-Hanson style active set for ``min 1/2 l^T H l - d^T l, l >= 0``."""
    m = len(d)
    lam = np.zeros(m)
    passive = [i for i in sorted(set(warm)) if 0 <= i < m]
    scale = max(1.0, float(np.abs(d).max(initial=0.0)))
    it = 0
    while it < max_iter:
        it += 1
        # Inner loop: move toward the subspace solution while keeping lam >= 0.
        while True:
            s = np.zeros(m)
            s[passive] = _solve_sub(H, d, passive)
            bad = [i for i in passive if s[i] <= 0.0]
            if not bad:
                lam = s
                break
            alpha = min(lam[i] / (lam[i] - s[i]) for i in bad)
            lam = lam + alpha * (s - lam)
            passive = [i for i in passive if lam[i] > tol * scale]
            lam[[i for i in range(m) if i not in passive]] = 0.0
        w = d - H @ lam
        candidates = [i for i in range(m) if i not in passive and w[i] > tol * scale]
        if not candidates:
            return lam, tuple(passive), OPTIMAL, it
        passive.append(max(candidates, key=lambda i: w[i]))
        passive.sort()
    return lam, tuple(passive), DEGENERATE, it


def solve_qp(Q_inv, x0, A, c, warm=(), max_iter: int = 50) -> QPResult:
    """Solve the primal through its dual; ``Q_inv`` and ``x0 = Q^-1 p`` are supplied."""
    A = np.atleast_2d(A)
    if A.size == 0 or np.all(A @ x0 >= c):
        return QPResult(x0.copy(), np.zeros(len(c)), (), OPTIMAL, 0)
    QA = Q_inv @ A.T
    H = A @ QA
    d = c - A @ x0
    lam, active, status, it = solve_dual_active_set(H, d, warm, max_iter)
    return QPResult(x0 + QA @ lam, lam, active, status, it)
