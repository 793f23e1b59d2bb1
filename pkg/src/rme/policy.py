"""Analytic dynamical-system motion policies with Lyapunov certificates.

A policy maps an end-effector pose to a desired twist ``[v; w]`` (world frame).
Each policy also splits its field into a conservative part ``f_c = -grad U_c``
and a remainder ``f_nc`` that is orthogonal to ``grad V``; the controller needs
this split to keep the closed loop passive when ``f`` is not a gradient field.

Pose error convention: ``e = [p - p*, log(R R*^T)]``.  For this rotation
vector the identity ``d/dt (1/2 |e_r|^2) = e_r . w`` holds exactly, so ``e``
doubles as the gradient of ``1/2 |e|^2`` in twist coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rme.errors import DomainError
from rme.robot.dynamics import EePose
from rme.robot.so3 import log_map


def pose_error(x: EePose, target_rot, target_pos) -> np.ndarray:
    return np.concatenate([x.position - target_pos, log_map(x.orientation @ target_rot.T)])


@dataclass(frozen=True)
class FieldSplit:
    f_c: np.ndarray  # conservative part, -grad U_c
    f_nc: np.ndarray  # circulating part, orthogonal to grad V
    U_t: float  # translational potential
    U_r: float  # rotational potential

    @property
    def f(self) -> np.ndarray:
        return self.f_c + self.f_nc


@dataclass(frozen=True)
class PointAttractorDS:
    """``f(x) = A e(x)`` with ``A`` symmetric negative definite.

    ``A`` must be block-diagonal with an isotropic rotational block for the
    potential in :meth:`split` to be exact; the shipped gains are of that form.
    """

    target: EePose
    A: np.ndarray = field(default_factory=lambda: -np.diag([5.0, 5.0, 5.0, 5.0, 5.0, 5.0]))
    max_speed: float = 1.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.shape != (6, 6):
            raise DomainError("A must be 6x6")
        if np.linalg.eigvalsh(0.5 * (A + A.T)).max() >= 0.0:
            raise DomainError("A + A^T must be negative definite")
        object.__setattr__(self, "A", A)

    @classmethod
    def with_gains(cls, target: EePose, linear: float, angular: float, **kw):
        return cls(target, -np.diag([linear] * 3 + [angular] * 3), **kw)

    def error(self, x: EePose) -> np.ndarray:
        return pose_error(x, self.target.orientation, self.target.position)

    def desired_velocity(self, x: EePose) -> np.ndarray:
        return self.A @ self.error(x)

    def lyapunov(self, x: EePose) -> float:
        e = self.error(x)
        return 0.5 * float(e @ e)

    def lyapunov_gradient(self, x: EePose) -> np.ndarray:
        return self.error(x)

    def split(self, x: EePose) -> FieldSplit:
        e = self.error(x)
        f = self.A @ e
        U_t = -0.5 * float(e[:3] @ self.A[:3, :3] @ e[:3])
        U_r = -0.5 * float(e[3:] @ self.A[3:, 3:] @ e[3:])
        return FieldSplit(f, np.zeros(6), U_t, U_r)


@dataclass(frozen=True)
class LimitCycleDS:
    """Planar circular limit cycle with a fixed desired orientation.

    In-plane: rigid rotation at ``omega`` plus radial contraction toward
    ``radius``.  Out of plane: exponential attraction to the plane.
    """

    center: np.ndarray
    radius: float = 0.15
    omega: float = np.pi
    u: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    v: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    k_radial: float = 5.0
    k_normal: float = 5.0
    k_rot: float = 5.0
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise DomainError("radius must be positive")
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        G = np.array([[u @ u, u @ v], [v @ u, v @ v]])
        if np.abs(G - np.eye(2)).max() > 1e-9:
            raise DomainError("cycle plane vectors must be orthonormal")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "normal", np.cross(u, v))

    def _coords(self, x: EePose):
        d = x.position - self.center
        a, b, z = d @ self.u, d @ self.v, d @ self.normal
        rho = np.hypot(a, b)
        e_r = log_map(x.orientation @ self.orientation.T)
        return a, b, z, rho, e_r

    def radial_error(self, x: EePose) -> float:
        return float(self._coords(x)[3] - self.radius)

    def split(self, x: EePose) -> FieldSplit:
        a, b, z, rho, e_r = self._coords(x)
        # Radial pull; at the exact center the direction is undefined and the term is dropped.
        radial = np.zeros(3)
        if rho > 1e-12:
            radial = -self.k_radial * (rho - self.radius) * (a * self.u + b * self.v) / rho
        f_c = np.concatenate([radial - self.k_normal * z * self.normal, -self.k_rot * e_r])
        tangential = self.omega * (a * self.v - b * self.u)
        f_nc = np.concatenate([tangential, np.zeros(3)])
        U_t = 0.5 * self.k_radial * (rho - self.radius) ** 2 + 0.5 * self.k_normal * z**2
        U_r = 0.5 * self.k_rot * float(e_r @ e_r)
        return FieldSplit(f_c, f_nc, U_t, U_r)

    def desired_velocity(self, x: EePose) -> np.ndarray:
        return self.split(x).f

    def lyapunov(self, x: EePose) -> float:
        _, _, z, rho, e_r = self._coords(x)
        return 0.5 * (rho - self.radius) ** 2 + 0.5 * z**2 + 0.5 * float(e_r @ e_r)

    def lyapunov_gradient(self, x: EePose) -> np.ndarray:
        a, b, z, rho, e_r = self._coords(x)
        g = z * self.normal
        if rho > 1e-12:
            g = g + (rho - self.radius) * (a * self.u + b * self.v) / rho
        return np.concatenate([g, e_r])


@dataclass
class DecreaseReport:
    n_samples: int
    violations: int
    max_value: float
    worst_index: int


def lyapunov_decrease_check(policy, samples, tol: float = 1e-10) -> DecreaseReport:
    """Evaluate grad V . f at every sampled pose and count violations of <= tol."""
    values = np.array([policy.lyapunov_gradient(x) @ policy.desired_velocity(x) for x in samples])
    worst = int(np.argmax(values)) if len(values) else -1
    return DecreaseReport(
        n_samples=len(values),
        violations=int(np.sum(values > tol)),
        max_value=float(values.max()) if len(values) else 0.0,
        worst_index=worst,
    )


def policy_from_dict(cfg: dict, home_pose: EePose):
    """Build a policy from a scenario's ``policy`` block.

    Positions default to the home pose so scenario files can stay short.
    """
    kind = cfg.get("type", "point_attractor")
    if kind == "point_attractor":
        target = EePose(
            np.asarray(cfg.get("target", home_pose.position), dtype=float), home_pose.orientation
        )
        return PointAttractorDS.with_gains(
            target, float(cfg.get("linear_gain", 20.0)), float(cfg.get("angular_gain", 10.0))
        )
    if kind == "limit_cycle":
        radius = float(cfg.get("radius", 0.15))
        center = cfg.get("center")
        if center is None:
            # Start on the cycle: home pose sits at the cycle's -u extreme.
            center = home_pose.position + radius * np.asarray(cfg.get("u", [0, 1, 0]), dtype=float)
        return LimitCycleDS(
            center=np.asarray(center, dtype=float),
            radius=radius,
            omega=float(cfg.get("omega", np.pi)),
            u=np.asarray(cfg.get("u", [0.0, 1.0, 0.0]), dtype=float),
            v=np.asarray(cfg.get("v", [0.0, 0.0, 1.0]), dtype=float),
            k_radial=float(cfg.get("k_radial", 5.0)),
            k_normal=float(cfg.get("k_normal", 5.0)),
            k_rot=float(cfg.get("k_rot", 5.0)),
            orientation=home_pose.orientation,
        )
    raise DomainError(f"unknown policy type {kind!r}")
