"""Velocity-aligned damping and the passive impedance wrench."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rme.errors import DomainError

DEFAULT_EIGENVALUES = (60.0, 120.0, 120.0, 8.0, 8.0, 8.0)


def complete_basis(e1: np.ndarray) -> np.ndarray:
    """Orthonormal basis whose first column is ``e1`` (Gram-Schmidt on the identity)."""
    dim = len(e1)
    cols = [e1]
    for k in range(dim):
        v = np.zeros(dim)
        v[k] = 1.0
        for c in cols:
            v = v - (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            cols.append(v / norm)
        if len(cols) == dim:
            break
    return np.column_stack(cols)


@dataclass
class DampingDesign:
    """``D(x) = V Lambda V^T`` with the first basis vector along ``f(x)``.

    Below ``eps_f`` the previous basis is reused (identity on first use), so
    the damping does not chatter while the desired velocity passes through 0.

    ``alignment="full"`` aligns one 6-D basis with the whole twist.  With
    ``"split"`` the translational block (lambda_1..3) is aligned with the
    linear part of ``f`` and the rotational block (lambda_4..6) with the
    angular part, so translational gains never act on wrist rotation.
    """

    eigenvalues: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_EIGENVALUES))
    eps_f: float = 1e-3
    basis: np.ndarray | None = None
    alignment: str = "full"

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if self.eigenvalues.shape != (6,):
            raise DomainError("damping needs six eigenvalues")
        if np.any(self.eigenvalues < 0) or self.eigenvalues[0] <= 0:
            raise DomainError("damping eigenvalues must be >= 0 with lambda_1 > 0")
        if self.alignment not in ("full", "split"):
            raise DomainError(f"unknown damping alignment {self.alignment!r}")

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def field_gains(self) -> np.ndarray:
        """Per-component ``k`` with ``D f = k * f`` whenever the basis is aligned."""
        if self.alignment == "full":
            return np.full(6, self.eigenvalues[0])
        return np.repeat(self.eigenvalues[[0, 3]], 3)

    def copy(self) -> "DampingDesign":
        return DampingDesign(self.eigenvalues.copy(), self.eps_f, None, self.alignment)


def _aligned(prev, vec, eps):
    norm = np.linalg.norm(vec)
    if norm > eps:
        return complete_basis(vec / norm)
    return np.eye(len(vec)) if prev is None else prev


def damping_matrix(design: DampingDesign, f_x) -> np.ndarray:
    f_x = np.asarray(f_x, dtype=float)
    lam = design.eigenvalues
    if design.alignment == "full":
        V = design.basis = _aligned(design.basis, f_x, design.eps_f)
        D = (V * lam) @ V.T
    else:
        prev = design.basis if design.basis is not None else np.eye(6)
        Vt = _aligned(prev[:3, :3] if design.basis is not None else None, f_x[:3], design.eps_f)
        Vr = _aligned(prev[3:, 3:] if design.basis is not None else None, f_x[3:], design.eps_f)
        V = np.zeros((6, 6))
        V[:3, :3] = Vt
        V[3:, 3:] = Vr
        design.basis = V
        D = (V * lam) @ V.T
    return 0.5 * (D + D.T)


def passive_impedance_wrench(xdot, f_x, D, G_x) -> np.ndarray:
    """``F_c = G_x - D (xdot - f)``."""
    return G_x - D @ (np.asarray(xdot) - np.asarray(f_x))


def tank_impedance_wrench(xdot, f_c, f_nc, D, G_x, gains, beta: float) -> np.ndarray:
    """Impedance wrench with the circulating part of the field gated by ``beta``.

    ``gains`` is :attr:`DampingDesign.field_gains`.  For ``beta = 1`` and an
    aligned basis this is identical to :func:`passive_impedance_wrench`.
    """
    return G_x - D @ xdot + gains * (f_c + beta * f_nc)
