"""Scenario files: robot, policy, gains, scripted events, noise and estimation settings."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from rme.errors import DomainError

SCENARIO_SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCENARIO_SCHEMA_VERSION,
    "name": "unnamed",
    "chain": "panda",
    "dt": 1e-3,
    "duration": 3.0,
    "seed": 0,
    "integrator": "semi_implicit_euler",
    "initial_q": None,
    "policy": {"type": "point_attractor", "linear_gain": 20.0, "angular_gain": 10.0},
    "controller": {
        "damping": [60.0, 120.0, 120.0, 8.0, 8.0, 8.0],
        "eps_f": 1e-3,
        "alignment": "split",
        "cbf_gains": [100.0, 20.0],
        "constraints": True,
        "null_damping": 2.0,
        "null_weight": 1.0,
        "qp_max_iter": 50,
        "field_ramp": 0.5,  # s over which the circulating field fades in
        "tank": {"level": 4.0, "lower": 0.1, "upper": 5.0, "smoothing": 0.1, "fill_fraction": 0.9},
    },
    "noise": {"tau_std": 0.05},
    "events": [],
    "detection": {},
    "estimation": {
        "enabled": True,
        "mode": "inline",  # inline | async | oracle
        "window_ms": 200,
        "publish_delay": 0.25,
        "guard": 0.1,
        "prior": "nn",  # nn | zero
        "weights": None,
        "vi": {},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass(frozen=True)
class Event:
    kind: str
    t: float
    t_end: float = float("nan")
    m: float = 0.0
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))
    shape: str = "step"
    frequency: float = 0.0

    def wrench_at(self, t: float) -> np.ndarray:
        if not self.t <= t < self.t_end:
            return np.zeros(6)
        if self.shape == "step":
            return self.wrench
        phase = (t - self.t) / (self.t_end - self.t)
        if self.shape == "half_sine":
            return self.wrench * np.sin(np.pi * phase)
        if self.shape == "sinusoid":
            return self.wrench * np.sin(2 * np.pi * self.frequency * (t - self.t))
        raise DomainError(f"unknown wrench shape {self.shape!r}")


def _parse_event(raw: dict) -> Event:
    kind = raw.get("type")
    if kind == "attach_mass":
        if raw["m"] <= 0:
            raise DomainError("attached mass must be positive")
        return Event(kind, float(raw["t"]), m=float(raw["m"]), r=np.asarray(raw.get("r", [0, 0, 0]), float))
    if kind == "detach_mass":
        return Event(kind, float(raw["t"]))
    if kind == "external_wrench":
        t0, t1 = float(raw["t_start"]), float(raw["t_end"])
        if t1 <= t0:
            raise DomainError("external wrench needs t_end > t_start")
        w = np.asarray(raw.get("wrench", [0] * 6), float)
        if w.shape != (6,):
            raise DomainError("external wrench must have 6 components")
        return Event(kind, t0, t1, wrench=w, shape=raw.get("shape", "step"),
                     frequency=float(raw.get("frequency", 0.0)))
    raise DomainError(f"unknown event type {kind!r}")


@dataclass(frozen=True)
class Scenario:
    config: dict
    events: tuple[Event, ...]

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def dt(self) -> float:
        return float(self.config["dt"])

    @property
    def duration(self) -> float:
        return float(self.config["duration"])

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def with_overrides(self, **over) -> "Scenario":
        return scenario_from_dict(_merge(self.config, over))

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()


def scenario_from_dict(raw: dict) -> Scenario:
    if raw.get("schema_version", SCENARIO_SCHEMA_VERSION) != SCENARIO_SCHEMA_VERSION:
        raise DomainError(f"unsupported scenario schema_version {raw.get('schema_version')!r}")
    cfg = _merge(DEFAULTS, raw)
    dt = float(cfg["dt"])
    if not 1e-4 <= dt <= 2e-3:
        raise DomainError(f"dt={dt} outside [1e-4, 2e-3]")
    if float(cfg["duration"]) <= 0:
        raise DomainError("duration must be positive")
    events = tuple(_parse_event(e) for e in cfg["events"])
    times = [e.t for e in events]
    if times != sorted(times):
        raise DomainError("events must be time-ordered")
    return Scenario(cfg, events)


def load_scenario(source: str | Path) -> Scenario:
    """Load a scenario from a YAML path or a bundled scenario name."""
    path = Path(source)
    if path.suffix in (".yaml", ".yml") and path.exists():
        text = path.read_text()
    else:
        ref = resources.files("rme.data").joinpath("scenarios", f"{source}.yaml")
        if not ref.is_file():
            raise DomainError(f"no scenario file or bundled scenario named {source!r}")
        text = ref.read_text()
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise DomainError("scenario file must contain a mapping")
    return scenario_from_dict(raw)


def bundled_scenarios() -> list[str]:
    root = resources.files("rme.data").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))
