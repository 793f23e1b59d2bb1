"""Constrained passive interaction controller.

The task torque tracks the impedance wrench in the least-squares sense
``|P tau - F_c|^2`` with ``P = (J J^T)^-1 J`` (the map from joint torque to the
wrench it realises), plus a small penalty on the null-space component of
``tau``.  The unconstrained optimum is exactly ``J^T F_c``.  Exponential CBFs
on the joint limits enter as linear inequalities in ``tau`` through the
nominal forward dynamics.

A separate null-space torque ``N (G - d_n dq)`` holds up the part of gravity
that a redundant arm's task wrench cannot express and damps self-motion.  It
is added outside the QP but is included in the dynamics the constraints see.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from rme.controller.qp import OPTIMAL, solve_qp
from rme.errors import DomainError
from rme.robot.chain import KinematicChain
from rme.robot.dynamics import (
    MismatchParams,
    RobotSnapshot,
    mismatch_torque_from,
)

log = logging.getLogger(__name__)

RANK_TOL = 1e-3
JACOBIAN_DAMPING = 1e-2


@dataclass(frozen=True)
class CbfConstraint:
    """Degree-2 exponential barrier evaluated at the current state."""

    h: float
    grad: np.ndarray
    hess: np.ndarray
    k1: float = 100.0
    k2: float = 20.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise DomainError("CBF gains must be positive")
        # s^2 + k2 s + k1 needs real negative roots
        if self.k2**2 < 4.0 * self.k1 - 1e-9:
            raise DomainError("CBF gains give complex roots")

    def rhs(self, dq) -> float:
        return -self.k1 * self.h - self.k2 * float(self.grad @ dq) - float(dq @ self.hess @ dq)


def joint_limit_constraints(chain: KinematicChain, q, k1=100.0, k2=20.0) -> list[CbfConstraint]:
    """One barrier per joint per side: ``q_max - q >= 0`` and ``q - q_min >= 0``."""
    n = chain.n
    zero = np.zeros((n, n))
    out = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        out.append(CbfConstraint(chain.upper[i] - q[i], -e, zero, k1, k2))
        out.append(CbfConstraint(q[i] - chain.lower[i], e, zero, k1, k2))
    return out


@dataclass
class ControlCommand:
    tau_c: np.ndarray  # QP task torque
    tau_null: np.ndarray
    tau_hat_c: np.ndarray  # applied torque: task + null + compensation, clipped
    active_constraint_set: tuple[int, ...] = ()
    qp_status: str = OPTIMAL
    rank_deficient: bool = False
    clipped: bool = False
    storage_derivative_residual: float = float("nan")
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class TaskProjection:
    P: np.ndarray  # torque -> realised wrench
    N: np.ndarray  # null-space projector (exact case: symmetric idempotent)
    Q_inv: np.ndarray
    tau0: np.ndarray
    rank_deficient: bool


def task_projection(J, F_c, null_weight: float = 1.0) -> TaskProjection:
    n = J.shape[1]
    JJt = J @ J.T
    sv_min = np.sqrt(max(np.linalg.eigvalsh(JJt)[0], 0.0))
    deficient = sv_min < RANK_TOL
    if not deficient:
        P = np.linalg.solve(JJt, J)
        N = np.eye(n) - J.T @ P
        # Q = 2 (P^T P + w N) has this inverse in closed form.
        Q_inv = 0.5 * (J.T @ J + N / null_weight)
        tau0 = J.T @ F_c
    else:
        P = np.linalg.solve(JJt + JACOBIAN_DAMPING * np.eye(6), J)
        N = np.eye(n) - J.T @ P
        Q = 2.0 * (P.T @ P + null_weight * N.T @ N)
        Q_inv = np.linalg.inv(Q)
        tau0 = Q_inv @ (2.0 * P.T @ F_c)
    return TaskProjection(P, N, Q_inv, tau0, deficient)


def cpic_solve(
    chain: KinematicChain,
    snap: RobotSnapshot,
    F_c,
    constraints: list[CbfConstraint],
    warm=(),
    null_damping: float = 2.0,
    null_weight: float = 1.0,
    max_iter: int = 50,
) -> ControlCommand:
    proj = task_projection(snap.J, np.asarray(F_c, dtype=float), null_weight)
    tau_null = proj.N @ (snap.G - null_damping * snap.dq)
    if constraints:
        grads = np.array([c.grad for c in constraints])
        A = np.linalg.solve(snap.M, grads.T).T  # grad^T M^-1 (M symmetric)
        rho = tau_null - snap.bias
        c = np.array([con.rhs(snap.dq) for con in constraints]) - A @ rho
        res = solve_qp(proj.Q_inv, proj.tau0, A, c, warm, max_iter)
    else:
        res = solve_qp(proj.Q_inv, proj.tau0, np.zeros((0, chain.n)), np.zeros(0))
    if res.status != OPTIMAL:
        log.warning("QP active set hit the iteration cap; using best iterate")
    return ControlCommand(
        tau_c=res.x,
        tau_null=tau_null,
        tau_hat_c=res.x + tau_null,
        active_constraint_set=res.active,
        qp_status=res.status,
        rank_deficient=proj.rank_deficient,
        lam=res.lam,
    )


def compensation_torque(snap: RobotSnapshot, theta_hat: MismatchParams, gravity) -> np.ndarray:
    """``-tau_mm(theta_hat)``; negative masses are clamped to zero before use."""
    if not np.all(np.isfinite(theta_hat.as_vector())):
        raise DomainError("theta_hat must be finite")
    if theta_hat.m <= 0.0:
        return np.zeros(len(snap.q))
    return -mismatch_torque_from(snap.kin, snap.J, theta_hat, gravity)


def augment_with_compensation(
    cmd: ControlCommand, chain: KinematicChain, snap: RobotSnapshot, theta_hat: MismatchParams | None
) -> ControlCommand:
    """Add payload compensation after the QP and clip to the actuator limits."""
    tau = cmd.tau_c + cmd.tau_null
    if theta_hat is not None:
        tau = tau + compensation_torque(snap, theta_hat, chain.gravity)
    limits = chain.effort_limits
    clipped = bool(np.any(np.abs(tau) > limits))
    if clipped:
        log.warning("commanded torque clipped to actuator limits")
        tau = np.clip(tau, -limits, limits)
    cmd.tau_hat_c = tau
    cmd.clipped = clipped
    return cmd
