"""Energy tank for circulating motion fields, storage function, and the passivity audit.

Storage used throughout:

    S = 1/2 dq^T M dq + k_t U_t(x) + k_r U_r(x) + s

with ``U_t``/``U_r`` the translational/rotational potentials of the field's
conservative part, ``k_t``/``k_r`` the damping gains along ``f`` (both
lambda_1 for full alignment) and ``s`` the tank level.  Joint-space kinetic
energy is used rather than the task-space form because a redundant arm also
carries self-motion energy.

Without constraints, clipping or Jacobian damping the closed loop satisfies
``dS/dt <= dq^T (J^T F_ext + tau_mm - tau_comp)``: the controller's only
power sources are the field's circulating part, paid for out of the tank, and
the tank is filled only by energy the damping has already removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EnergyTank:
    level: float = 2.0
    lower: float = 0.1
    upper: float = 5.0
    smoothing: float = 0.1  # width of the gate ramp above ``lower`` (J)
    # Share of damped energy recycled into the tank.  Keeping some back leaves
    # strict dissipation to absorb the error of a sample-and-hold controller.
    fill_fraction: float = 0.9

    def gate(self, circulating_power: float) -> float:
        """Fraction of the circulating field to apply this tick.

        Power flowing back into the tank is always allowed; drawing from it
        ramps to zero as the level approaches ``lower``.
        """
        if circulating_power <= 0.0:
            return 1.0
        return float(np.clip((self.level - self.lower) / self.smoothing, 0.0, 1.0))

    def fill_rate(self, dissipated_power: float) -> float:
        return self.fill_fraction if self.level < self.upper else 0.0

    def step(self, dt: float, dissipated_power: float, drawn_power: float) -> float:
        """Advance the level; returns the tank derivative used."""
        ds = self.fill_rate(dissipated_power) * dissipated_power - drawn_power
        self.level += dt * ds
        return ds


def storage(M, dq, U_t: float, U_r: float, gains, tank_level: float) -> float:
    """Kinetic energy + field potential (scaled by the damping gains along f) + tank."""
    return 0.5 * float(dq @ M @ dq) + gains[0] * U_t + gains[3] * U_r + tank_level


@dataclass(frozen=True)
class AuditReport:
    residual: np.ndarray  # dS/dt - supplied power, per tick (length T-1)
    flagged: np.ndarray  # ticks where constraints/clipping/damped J were active
    tolerance: float

    @property
    def max_unflagged(self) -> float:
        vals = self.residual[~self.flagged]
        return float(vals.max()) if vals.size else float("-inf")

    @property
    def violations(self) -> np.ndarray:
        """Indices of unflagged ticks whose residual exceeds the tolerance."""
        return np.flatnonzero((self.residual > self.tolerance) & ~self.flagged)

    @property
    def positive_flagged(self) -> np.ndarray:
        return np.flatnonzero((self.residual > self.tolerance) & self.flagged)

    @property
    def passed(self) -> bool:
        return self.violations.size == 0


def passivity_audit(t, S, supply, flagged, tolerance: float = 1e-3) -> AuditReport:
    """Finite-difference check of ``dS/dt <= supplied power``.

    ``supply[k]`` is the external power over the step from ``t[k]`` to
    ``t[k+1]``; a step is flagged when either endpoint tick was flagged, since
    the constrained command acts across the whole step.
    """
    t = np.asarray(t, dtype=float)
    S = np.asarray(S, dtype=float)
    supply = np.asarray(supply, dtype=float)
    flagged = np.asarray(flagged, dtype=bool)
    dS = np.diff(S) / np.diff(t)
    resid = dS - supply[:-1]
    return AuditReport(resid, flagged[:-1] | flagged[1:], tolerance)
