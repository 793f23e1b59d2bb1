"""Kinematics and rigid-body dynamics of a serial chain of revolute joints.

Everything here is expressed in the world frame.  The mass matrix comes from
the link Jacobians, the Coriolis matrix from the Christoffel symbols of the
analytic mass-matrix derivative (so that dM/dt - 2C is skew-symmetric by
construction), and inverse dynamics from recursive Newton-Euler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from rme.errors import DomainError, SimulationFault
from rme.robot.chain import KinematicChain
from rme.robot.so3 import cross, is_rotation, skew

# Fixed-point tolerance on ``M`` conditioning before the plant is declared faulty.
MAX_MASS_MATRIX_CONDITION = 1e12
DEFAULT_PINV_DAMPING = 1e-2


@dataclass(frozen=True)
class EePose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        if not is_rotation(self.orientation):
            raise DomainError("orientation must be a proper rotation matrix")


@dataclass(frozen=True)
class MismatchParams:
    """Point payload at the end-effector: mass (kg) and CoM offset in the EE frame (m)."""

    m: float
    r: np.ndarray

    @classmethod
    def from_vector(cls, theta) -> "MismatchParams":
        theta = np.asarray(theta, dtype=float)
        return cls(float(theta[0]), theta[1:4].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.m], self.r])


@dataclass(frozen=True)
class DynamicsTerms:
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray


@dataclass(frozen=True)
class Kinematics:
    """Per-configuration kinematic quantities, computed once and reused."""

    q: np.ndarray
    joint_pos: np.ndarray  # (n, 3) joint origins
    axes: np.ndarray  # (n, 3) joint axes
    rotations: np.ndarray  # (n, 3, 3) link orientations
    coms: np.ndarray  # (n, 3) link CoMs
    inertias: np.ndarray  # (n, 3, 3) link inertia about CoM, world frame
    ee_pos: np.ndarray
    ee_rot: np.ndarray

    @property
    def pose(self) -> EePose:
        return EePose(self.ee_pos, self.ee_rot)


def _check(vec, n, what):
    arr = np.asarray(vec, dtype=float)
    if arr.shape != (n,):
        raise DomainError(f"{what}: expected shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what}: non-finite entries")
    return arr


def forward_kinematics(chain: KinematicChain, q) -> Kinematics:
    n = chain.n
    q = _check(q, n, "q")
    pos = np.empty((n, 3))
    axes = np.empty((n, 3))
    rots = np.empty((n, 3, 3))
    R = np.eye(3)
    p = np.zeros(3)
    eye = np.eye(3)
    K, K2 = chain._axis_K, chain._axis_K2
    for i, link in enumerate(chain.links):
        p = p + R @ link.translation
        R = R @ link.rotation
        axes[i] = R @ link.axis
        R = R @ (eye + np.sin(q[i]) * K[i] + (1.0 - np.cos(q[i])) * K2[i])
        pos[i] = p
        rots[i] = R
    coms = pos + np.einsum("nij,nj->ni", rots, chain._coms)
    inertias = rots @ chain._inertias @ rots.transpose(0, 2, 1)
    return Kinematics(
        q=q,
        joint_pos=pos,
        axes=axes,
        rotations=rots,
        coms=coms,
        inertias=inertias,
        ee_pos=p + R @ chain.ee_translation,
        ee_rot=R @ chain.ee_rotation,
    )


def ee_pose(chain: KinematicChain, q) -> EePose:
    return forward_kinematics(chain, q).pose


def jacobian_from(kin: Kinematics) -> np.ndarray:
    """Geometric 6xn Jacobian at the EE origin: rows are [linear; angular]."""
    lin = np.cross(kin.axes, kin.ee_pos - kin.joint_pos)
    return np.vstack([lin.T, kin.axes.T])


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    return jacobian_from(forward_kinematics(chain, q))


def _link_jacobians(kin: Kinematics):
    """Per-link CoM Jacobians as (k, j, 3) arrays, zero for j > k."""
    n = len(kin.q)
    lower = np.tril(np.ones((n, n)))[:, :, None]  # [k, j] = 1 if j <= k
    lever = kin.coms[:, None, :] - kin.joint_pos[None, :, :]
    Jv = np.cross(np.broadcast_to(kin.axes[None], lever.shape), lever) * lower
    Jw = np.broadcast_to(kin.axes[None], lever.shape) * lower
    return Jv, Jw, lever


def mass_matrix_from(chain: KinematicChain, kin: Kinematics) -> np.ndarray:
    Jv, Jw, _ = _link_jacobians(kin)
    M = np.einsum("k,kja,kia->ji", chain._masses, Jv, Jv)
    M += np.einsum("kja,kab,kib->ji", Jw, kin.inertias, Jw)
    M[np.diag_indices_from(M)] += chain._armature
    return 0.5 * (M + M.T)


def mass_matrix(chain: KinematicChain, q) -> np.ndarray:
    return mass_matrix_from(chain, forward_kinematics(chain, q))


def mass_matrix_derivative(chain: KinematicChain, q) -> np.ndarray:
    """Analytic partials of ``M``: ``dM[i] = dM/dq_i`` with shape (n, n, n)."""
    kin = forward_kinematics(chain, q)
    n = chain.n
    Jv, Jw, _ = _link_jacobians(kin)
    z = kin.axes
    m = chain._masses
    dM = np.zeros((n, n, n))
    for i in range(n):
        dJv = np.zeros_like(Jv)
        dJw = np.zeros_like(Jw)
        # Links k >= i move with joint i; j indexes the Jacobian column.
        for k in range(i, n):
            # columns i <= j <= k rotate rigidly about z_i
            dJv[k, i : k + 1] = np.cross(z[i], Jv[k, i : k + 1])
            # columns j < i see only the CoM moving about z_i
            if i > 0:
                dJv[k, :i] = np.cross(z[:i], cross(z[i], kin.coms[k] - kin.joint_pos[i]))
            dJw[k, i + 1 : k + 1] = np.cross(z[i], z[i + 1 : k + 1])
        S = skew(z[i])
        dI = np.zeros_like(kin.inertias)
        dI[i:] = S @ kin.inertias[i:] - kin.inertias[i:] @ S
        d = np.einsum("k,kja,kia->ji", m, dJv, Jv)
        d = d + d.T
        w = np.einsum("kja,kab,kib->ji", dJw, kin.inertias, Jw)
        d += w + w.T
        d += np.einsum("kja,kab,kib->ji", Jw, dI, Jw)
        dM[i] = d
    return dM


def coriolis_matrix(chain: KinematicChain, q, dq) -> np.ndarray:
    """Coriolis matrix from the Christoffel symbols of the mass matrix."""
    dq = _check(dq, chain.n, "dq")
    dM = mass_matrix_derivative(chain, q)
    # C[k, j] = 1/2 sum_i (dM_kj/dq_i + dM_ki/dq_j - dM_ij/dq_k) dq_i
    t1 = np.einsum("ikj,i->kj", dM, dq)
    t2 = np.einsum("jki,i->kj", dM, dq)
    t3 = np.einsum("kij,i->kj", dM, dq)
    return 0.5 * (t1 + t2 - t3)


def rnea_from(chain: KinematicChain, kin: Kinematics, dq, ddq, gravity: bool = True) -> np.ndarray:
    """Recursive Newton-Euler: M ddq + C dq (+ G when ``gravity``)."""
    n = chain.n
    z = kin.axes
    a = -chain.gravity if gravity else np.zeros(3)
    w = np.zeros(3)
    dw = np.zeros(3)
    p_prev = np.zeros(3)
    ws = np.empty((n, 3))
    dws = np.empty((n, 3))
    acs = np.empty((n, 3))
    for i in range(n):
        r = kin.joint_pos[i] - p_prev
        a = a + cross(dw, r) + cross(w, cross(w, r))
        w_next = w + z[i] * dq[i]
        dw = dw + z[i] * ddq[i] + cross(w, z[i]) * dq[i]
        w = w_next
        rc = kin.coms[i] - kin.joint_pos[i]
        acs[i] = a + cross(dw, rc) + cross(w, cross(w, rc))
        ws[i] = w
        dws[i] = dw
        p_prev = kin.joint_pos[i]
    tau = np.empty(n)
    f = np.zeros(3)
    mom = np.zeros(3)
    for i in range(n - 1, -1, -1):
        F = chain._masses[i] * acs[i]
        Iw = kin.inertias[i]
        N = Iw @ dws[i] + cross(ws[i], Iw @ ws[i])
        rc = kin.coms[i] - kin.joint_pos[i]
        if i + 1 < n:
            mom = mom + cross(kin.joint_pos[i + 1] - kin.joint_pos[i], f)
        mom = N + cross(rc, F) + mom
        f = F + f
        tau[i] = z[i] @ mom
    return tau + chain._armature * ddq


def gravity_vector(chain: KinematicChain, q) -> np.ndarray:
    n = chain.n
    return rnea_from(chain, forward_kinematics(chain, q), np.zeros(n), np.zeros(n))


def dynamics_terms(chain: KinematicChain, q, dq) -> DynamicsTerms:
    kin = forward_kinematics(chain, q)
    dq = _check(dq, chain.n, "dq")
    zeros = np.zeros(chain.n)
    return DynamicsTerms(
        M=mass_matrix_from(chain, kin),
        C=coriolis_matrix(chain, q, dq),
        G=rnea_from(chain, kin, zeros, zeros),
    )


# --- payload mismatch -------------------------------------------------------


def mismatch_wrench(theta: MismatchParams, ee_rot, gravity) -> np.ndarray:
    """World-frame wrench [F_m; (R r) x F_m] of a point mass hanging on the EE."""
    F = theta.m * np.asarray(gravity)
    return np.concatenate([F, cross(ee_rot @ theta.r, F)])


def mismatch_torque_from(kin: Kinematics, J, theta: MismatchParams, gravity) -> np.ndarray:
    return J.T @ mismatch_wrench(theta, kin.ee_rot, gravity)


def mismatch_torque(chain: KinematicChain, q, theta: MismatchParams) -> np.ndarray:
    """Joint torque produced by the payload's weight (enters the plant like tau_ext)."""
    kin = forward_kinematics(chain, q)
    return mismatch_torque_from(kin, jacobian_from(kin), theta, chain.gravity)


def mismatch_torque_jacobian(chain: KinematicChain, q, theta: MismatchParams) -> np.ndarray:
    """d tau_mm / d [m, r_x, r_y, r_z] as an (n, 4) matrix."""
    kin = forward_kinematics(chain, q)
    J = jacobian_from(kin)
    g = chain.gravity
    d_m = J.T @ np.concatenate([g, cross(kin.ee_rot @ theta.r, g)])
    d_r = -J[3:].T @ skew(theta.m * g) @ kin.ee_rot
    return np.column_stack([d_m, d_r])


def mismatch_basis(chain: KinematicChain, qs) -> tuple[np.ndarray, np.ndarray]:
    """Linear structure of tau_mm over a batch of configurations.

    Returns ``(a, B)`` with shapes (N, n) and (N, n, 3) such that
    ``tau_mm(q_i, theta) = m * (a[i] + B[i] @ r)``.
    """
    qs = np.atleast_2d(qs)
    g = chain.gravity
    a = np.empty((len(qs), chain.n))
    B = np.empty((len(qs), chain.n, 3))
    Sg = skew(g)
    for idx, q in enumerate(qs):
        kin = forward_kinematics(chain, q)
        J = jacobian_from(kin)
        a[idx] = J[:3].T @ g
        B[idx] = -J[3:].T @ Sg @ kin.ee_rot
    return a, B


def inverse_dynamics(
    chain: KinematicChain,
    q,
    dq,
    ddq,
    theta: MismatchParams | None = None,
    mismatch_only: bool = False,
) -> np.ndarray:
    """Actuator torque for the requested motion, optionally carrying a payload.

    With ``theta`` the payload's torque is subtracted (the payload pulls on the
    arm, so the motors supply that much less). ``mismatch_only`` skips the
    nominal terms and returns tau_mm itself, the quantity the estimator's
    likelihood compares against measured external torque.
    """
    n = chain.n
    kin = forward_kinematics(chain, q)
    dq = _check(dq, n, "dq")
    ddq = _check(ddq, n, "ddq")
    if mismatch_only:
        if theta is None:
            raise DomainError("mismatch_only requires theta")
        return mismatch_torque_from(kin, jacobian_from(kin), theta, chain.gravity)
    tau = rnea_from(chain, kin, dq, ddq)
    if theta is not None:
        tau = tau - mismatch_torque_from(kin, jacobian_from(kin), theta, chain.gravity)
    return tau


def solve_mass_matrix(M, rhs) -> np.ndarray:
    """Solve ``M x = rhs`` through a Cholesky factorisation, refusing ill-conditioned M."""
    eig = np.linalg.eigvalsh(M)
    if eig[0] <= 0.0 or eig[-1] / eig[0] > MAX_MASS_MATRIX_CONDITION:
        raise SimulationFault(f"mass matrix singular (eigenvalues {eig[0]:.3e}..{eig[-1]:.3e})")
    return cho_solve(cho_factor(M), rhs)


def forward_dynamics(chain: KinematicChain, q, dq, tau_total) -> np.ndarray:
    n = chain.n
    kin = forward_kinematics(chain, q)
    dq = _check(dq, n, "dq")
    tau_total = _check(tau_total, n, "tau_total")
    M = mass_matrix_from(chain, kin)
    h = rnea_from(chain, kin, dq, np.zeros(n))
    return solve_mass_matrix(M, tau_total - h)


def pseudo_wrench(chain: KinematicChain, q, tau_ext, damping: float = DEFAULT_PINV_DAMPING):
    """EE wrench reconstructed from joint torques: (J J^T + damping I)^-1 J tau_ext."""
    if damping <= 0:
        raise DomainError("damping must be positive")
    J = jacobian(chain, q)
    return pseudo_wrench_from_jacobian(J, tau_ext, damping)


def pseudo_wrench_from_jacobian(J, tau_ext, damping: float = DEFAULT_PINV_DAMPING):
    return np.linalg.solve(J @ J.T + damping * np.eye(J.shape[0]), J @ tau_ext)


@dataclass(frozen=True)
class RobotSnapshot:
    """Everything the controller needs at one tick, computed from a single FK pass."""

    q: np.ndarray
    dq: np.ndarray
    kin: Kinematics
    J: np.ndarray
    M: np.ndarray
    bias: np.ndarray  # C dq + G
    G: np.ndarray

    @property
    def xdot(self) -> np.ndarray:
        return self.J @ self.dq


def snapshot(chain: KinematicChain, q, dq) -> RobotSnapshot:
    kin = forward_kinematics(chain, q)
    dq = _check(dq, chain.n, "dq")
    zeros = np.zeros(chain.n)
    return RobotSnapshot(
        q=kin.q,
        dq=dq,
        kin=kin,
        J=jacobian_from(kin),
        M=mass_matrix_from(chain, kin),
        bias=rnea_from(chain, kin, dq, zeros),
        G=rnea_from(chain, kin, zeros, zeros),
    )
