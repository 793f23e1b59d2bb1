"""Declarative serial-chain description and its YAML loader."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from rme.errors import DomainError

CHAIN_SCHEMA_VERSION = 1


def rpy_to_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll/pitch/yaw to rotation matrix (R = Rz(yaw) Ry(pitch) Rx(roll))."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


@dataclass(frozen=True)
class Link:
    """One revolute joint plus the rigid body it moves.

    ``rotation``/``translation`` place the joint frame in the parent link frame;
    the joint then rotates about ``axis`` (expressed in the joint frame).
    """

    name: str
    rotation: np.ndarray
    translation: np.ndarray
    axis: np.ndarray
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    lower: float
    upper: float
    velocity_limit: float
    effort_limit: float
    armature: float = 0.0  # reflected rotor inertia about the joint axis (kg m^2)


@dataclass(frozen=True)
class KinematicChain:
    links: tuple[Link, ...]
    ee_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    ee_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    home: np.ndarray | None = None
    name: str = "chain"

    def __post_init__(self):
        for link in self.links:
            if abs(np.linalg.norm(link.axis) - 1.0) > 1e-12:
                raise DomainError(f"{link.name}: joint axis must have unit norm")
            inertia = link.inertia
            if not np.allclose(inertia, inertia.T, atol=1e-15):
                raise DomainError(f"{link.name}: inertia tensor is not symmetric")
            if np.linalg.eigvalsh(inertia).min() <= 0.0:
                raise DomainError(f"{link.name}: inertia tensor is not positive definite")
            if link.mass <= 0.0:
                raise DomainError(f"{link.name}: mass must be positive")
            if link.armature < 0.0:
                raise DomainError(f"{link.name}: armature must be non-negative")
            if not link.lower < link.upper:
                raise DomainError(f"{link.name}: joint limits need lower < upper")
        # Cached arrays used by the hot loops in kinematics/dynamics.
        axes = np.array([l.axis for l in self.links])
        K = np.array([[[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]] for a in axes])
        object.__setattr__(self, "_axes", axes)
        object.__setattr__(self, "_axis_K", K)
        object.__setattr__(self, "_axis_K2", K @ K)
        object.__setattr__(self, "_masses", np.array([l.mass for l in self.links]))
        object.__setattr__(self, "_coms", np.array([l.com for l in self.links]))
        object.__setattr__(self, "_inertias", np.array([l.inertia for l in self.links]))
        object.__setattr__(self, "_armature", np.array([l.armature for l in self.links]))

    @property
    def n(self) -> int:
        return len(self.links)

    @property
    def lower(self) -> np.ndarray:
        return np.array([l.lower for l in self.links])

    @property
    def upper(self) -> np.ndarray:
        return np.array([l.upper for l in self.links])

    @property
    def velocity_limits(self) -> np.ndarray:
        return np.array([l.velocity_limit for l in self.links])

    @property
    def effort_limits(self) -> np.ndarray:
        return np.array([l.effort_limit for l in self.links])

    @property
    def g_z(self) -> float:
        """Signed vertical gravity component (negative when pointing down)."""
        return float(self.gravity[2])


def _vec(values, size, what):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (size,):
        raise DomainError(f"{what}: expected {size} values, got shape {arr.shape}")
    return arr


def chain_from_dict(cfg: dict) -> KinematicChain:
    version = cfg.get("schema_version")
    if version != CHAIN_SCHEMA_VERSION:
        raise DomainError(f"unsupported chain schema_version {version!r}")
    links = []
    for i, raw in enumerate(cfg["links"]):
        name = raw.get("name", f"link{i + 1}")
        origin = raw.get("origin", {})
        limits = raw.get("limits", {})
        links.append(
            Link(
                name=name,
                rotation=rpy_to_matrix(_vec(origin.get("rpy", [0, 0, 0]), 3, f"{name}.rpy")),
                translation=_vec(origin.get("xyz", [0, 0, 0]), 3, f"{name}.xyz"),
                axis=_vec(raw.get("axis", [0, 0, 1]), 3, f"{name}.axis"),
                mass=float(raw["mass"]),
                com=_vec(raw["com"], 3, f"{name}.com"),
                inertia=np.asarray(raw["inertia"], dtype=float).reshape(3, 3),
                lower=float(limits.get("lower", -np.pi)),
                upper=float(limits.get("upper", np.pi)),
                velocity_limit=float(limits.get("velocity", 2.0)),
                effort_limit=float(limits.get("effort", 100.0)),
                armature=float(raw.get("armature", 0.0)),
            )
        )
    ee = cfg.get("end_effector", {}).get("origin", {})
    home = cfg.get("home")
    return KinematicChain(
        links=tuple(links),
        ee_rotation=rpy_to_matrix(_vec(ee.get("rpy", [0, 0, 0]), 3, "end_effector.rpy")),
        ee_translation=_vec(ee.get("xyz", [0, 0, 0]), 3, "end_effector.xyz"),
        gravity=_vec(cfg.get("gravity", [0, 0, -9.81]), 3, "gravity"),
        home=None if home is None else _vec(home, len(links), "home"),
        name=cfg.get("name", "chain"),
    )


def load_chain(source: str | Path = "panda") -> KinematicChain:
    """Load a chain from a YAML file path, or a bundled model name such as ``"panda"``."""
    path = Path(source)
    if path.suffix in (".yaml", ".yml") and path.exists():
        text = path.read_text()
    else:
        try:
            text = resources.files("rme.data").joinpath(f"{source}.yaml").read_text()
        except FileNotFoundError as exc:
            raise DomainError(f"no chain file or bundled model named {source!r}") from exc
    return chain_from_dict(yaml.safe_load(text))


def planar_two_link(m1=1.0, m2=1.0, l1=1.0, l2=1.0, gravity=9.81) -> KinematicChain:
    """Two-link planar arm, point masses at the distal ends, joints about z.

    Gravity acts along -y so the arm moves in the vertical x-y plane.  Tiny
    isotropic inertias keep the tensors positive definite; they are included
    in any closed-form comparison.
    """
    eps = 1e-6
    link = dict(axis=np.array([0.0, 0.0, 1.0]), rotation=np.eye(3), lower=-np.pi, upper=np.pi,
                velocity_limit=10.0, effort_limit=1000.0)
    links = (
        Link(name="l1", translation=np.zeros(3), mass=m1, com=np.array([l1, 0.0, 0.0]),
             inertia=eps * np.eye(3), **link),
        Link(name="l2", translation=np.array([l1, 0.0, 0.0]), mass=m2,
             com=np.array([l2, 0.0, 0.0]), inertia=eps * np.eye(3), **link),
    )
    return KinematicChain(
        links=links,
        ee_translation=np.array([l2, 0.0, 0.0]),
        gravity=np.array([0.0, -gravity, 0.0]),
        name="planar-2link",
    )
