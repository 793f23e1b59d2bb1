"""Payload-change detector over the last 500 torque samples, plus window collection.

Index windows are 1-based and inclusive, sample 1 being the oldest in the
buffer and sample 500 the newest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rme.dataset import WindowDataset
from rme.errors import DomainError

ADDED = "added"
REMOVED = "removed"
SIGN_SAMPLES = 20


@dataclass(frozen=True)
class DetectionConfig:
    activation_threshold: float = 0.9
    stabilization_threshold: float = 0.2
    side_force_limit: float = 2.5
    window: int = 500
    stabilization_windows: tuple = ((431, 450), (351, 370), (271, 290))
    end_window: tuple = (491, 500)
    force_window: tuple = (451, 500)
    # Extra predicate, off by default: |mean F_z| must exceed this (N).  Rejects
    # the falling edge of a lateral push, where every force mean is near zero.
    min_principal_force: float = 0.0

    def __post_init__(self):
        windows = [*self.stabilization_windows, self.end_window, self.force_window]
        for lo, hi in windows:
            if not 1 <= lo <= hi <= self.window:
                raise DomainError(f"index window [{lo}, {hi}] outside [1, {self.window}]")
        if min(self.activation_threshold, self.stabilization_threshold, self.side_force_limit) <= 0:
            raise DomainError("detection thresholds must be positive")

    @classmethod
    def from_dict(cls, cfg: dict | None) -> "DetectionConfig":
        cfg = dict(cfg or {})
        for key in ("stabilization_windows",):
            if key in cfg:
                cfg[key] = tuple(tuple(w) for w in cfg[key])
        for key in ("end_window", "force_window"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)


@dataclass(frozen=True)
class DetectionEvent:
    tick: int
    sign: str
    means: dict


def _mean(arr, window):
    lo, hi = window
    return arr[lo - 1 : hi].mean(axis=0)


def activation_condition(cfg: DetectionConfig, sq: np.ndarray, wrench: np.ndarray):
    """Evaluate every predicate on an ordered window; returns (fired, snapshot)."""
    rapid = abs(sq[-1] - sq[0]) > cfg.activation_threshold
    checks = [float(_mean(sq, w)) for w in cfg.stabilization_windows]
    end = float(_mean(sq, cfg.end_window))
    F = _mean(wrench[:, :3], cfg.force_window)
    fx, fy, fz = np.abs(F)
    principal = fz > fx and fz > fy and fz > cfg.min_principal_force
    side = fx < cfg.side_force_limit and fy < cfg.side_force_limit
    stable = all(abs(c - end) < cfg.stabilization_threshold for c in checks)
    snapshot = {
        "rapid_change": bool(rapid),
        "stabilization": bool(stable),
        "principal_force": bool(principal),
        "side_forces": bool(side),
        "first": float(sq[0]),
        "last": float(sq[-1]),
        "stabilization_checks": checks,
        "end_stabilization": end,
        "mean_force": F.tolist(),
    }
    return bool(rapid and stable and principal and side), snapshot


class TorqueWindow:
    """Fixed-capacity ring buffer of (|tau_ext|^2, pseudo-wrench) samples."""

    def __init__(self, capacity: int = 500):
        self.capacity = capacity
        self._sq = np.zeros(capacity)
        self._wrench = np.zeros((capacity, 6))
        self._count = 0
        self._head = 0
        self._last_tick: int | None = None

    def push(self, tick: int, sq: float, wrench) -> None:
        if self._last_tick is not None and tick <= self._last_tick:
            raise DomainError("window timestamps must increase")
        self._sq[self._head] = sq
        self._wrench[self._head] = wrench
        self._head = (self._head + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)
        self._last_tick = tick

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def clear(self) -> None:
        self._count = 0
        self._head = 0

    def ordered(self):
        idx = (self._head + np.arange(self.capacity)) % self.capacity
        return self._sq[idx], self._wrench[idx]


@dataclass
class MismatchDetector:
    config: DetectionConfig = field(default_factory=DetectionConfig)
    suppressed_until: int = -1

    def __post_init__(self):
        self.window = TorqueWindow(self.config.window)

    def update(self, tick: int, tau_ext, wrench) -> DetectionEvent | None:
        """Push one sample; evaluate only when the buffer is full and not suppressed."""
        tau_ext = np.asarray(tau_ext)
        self.window.push(tick, float(tau_ext @ tau_ext), wrench)
        if tick <= self.suppressed_until or not self.window.full:
            return None
        sq, wr = self.window.ordered()
        fired, snap = activation_condition(self.config, sq, wr)
        if not fired:
            return None
        # The torque norm only says *that* something changed: on a residual
        # signal a removal also grows it. Gravity says which way.
        dfz = snap["mean_force"][2] - wr[:SIGN_SAMPLES, 2].mean()
        return DetectionEvent(tick, ADDED if dfz < 0 else REMOVED, snap)

    def suppress(self, until_tick: int) -> None:
        self.suppressed_until = max(self.suppressed_until, until_tick)

    def rearm(self, clear: bool = True) -> None:
        """Lift suppression; clearing drops samples that straddle a compensation change."""
        self.suppressed_until = -1
        if clear:
            self.window.clear()


class DatasetCollector:
    """Accumulates ``duration`` worth of samples after a detection.

    A gap in the stream larger than ``max_gap`` aborts the collection; the
    caller re-arms detection and no partial dataset is emitted.
    """

    def __init__(self, duration: float = 0.2, rate: float = 1000.0, max_gap: float = 2e-3):
        self.size = int(round(duration * rate))
        if self.size < 1:
            raise DomainError("collection window shorter than one sample")
        self.max_gap = max_gap
        self._t: list[float] = []
        self._q: list[np.ndarray] = []
        self._tau: list[np.ndarray] = []
        self.aborted = False

    def push(self, t: float, q, tau_ext) -> WindowDataset | None:
        if self.aborted:
            return None
        if self._t and t - self._t[-1] > self.max_gap + 1e-9:
            self.aborted = True
            return None
        self._t.append(float(t))
        self._q.append(np.array(q, dtype=float))
        self._tau.append(np.array(tau_ext, dtype=float))
        if len(self._t) == self.size:
            return WindowDataset(np.array(self._t), np.array(self._q), np.array(self._tau))
        return None


def collect_dataset(stream, duration: float = 0.2, rate: float = 1000.0) -> WindowDataset | None:
    """Consume ``(t, q, tau_ext)`` tuples until the window is full; None on gap or short stream."""
    collector = DatasetCollector(duration, rate)
    for t, q, tau in stream:
        out = collector.push(t, q, tau)
        if out is not None:
            return out
        if collector.aborted:
            return None
    return None
