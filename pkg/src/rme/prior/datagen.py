"""Simulated training data for the prior network.

Each simulation holds the home pose, attaches a random payload and runs the
detector; windows are cut from the log starting right after detection (the
point where the runtime collector starts) plus a few time shifts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rme.dataset import WindowDataset
from rme.errors import DomainError
from rme.prior.model import preprocess
from rme.robot.chain import load_chain
from rme.robot.dynamics import MismatchParams

DATA_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    n_sims: int = 350
    shifts: tuple[int, ...] = (0, 50, 100)  # ticks after the collection start
    window: int = 200  # samples per window
    noise_std: float = 0.05  # augmentation noise on tau_ext (N m)
    mass_range: tuple[float, float] = (0.2, 1.5)
    lateral: float = 0.1  # |r_x|, |r_y| bound (m)
    axial_range: tuple[float, float] = (0.0, 0.2)  # r_z (m)
    attach_time: float = 0.3
    duration: float = 1.4
    seed: int = 0
    chain: str = "panda"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def sample_theta(rng, cfg: DataConfig) -> MismatchParams:
    m = rng.uniform(*cfg.mass_range)
    r = np.array([rng.uniform(-cfg.lateral, cfg.lateral), rng.uniform(-cfg.lateral, cfg.lateral),
                  rng.uniform(*cfg.axial_range)])
    return MismatchParams(m, r)


def static_scenario(theta: MismatchParams, seed: int, cfg: DataConfig, tau_std: float = 0.0,
                    duration: float | None = None):
    from rme.sim.scenario import scenario_from_dict

    return scenario_from_dict({
        "name": "static_hold",
        "chain": cfg.chain,
        "seed": int(seed),
        "duration": cfg.duration if duration is None else duration,
        "noise": {"tau_std": tau_std},
        "estimation": {"enabled": False},
        "events": [{"type": "attach_mass", "t": cfg.attach_time, "m": float(theta.m),
                    "r": [float(v) for v in theta.r]}],
    })


@dataclass
class StaticRun:
    """Log columns needed to cut windows, plus where collection would start."""

    t: np.ndarray
    q: np.ndarray
    tau: np.ndarray
    start: int
    detected: bool

    def window(self, offset: int, length: int, meta: dict | None = None) -> WindowDataset:
        lo = self.start + offset
        hi = lo + length
        if hi > len(self.t):
            raise DomainError(f"window [{lo}, {hi}) runs past the simulated {len(self.t)} ticks")
        return WindowDataset(self.t[lo:hi], self.q[lo:hi], self.tau[lo:hi], dict(meta or {}))


def simulate_static(theta: MismatchParams, seed: int, cfg: DataConfig, tau_std: float = 0.0,
                    duration: float | None = None) -> StaticRun:
    from rme.sim.engine import run

    scenario = static_scenario(theta, seed, cfg, tau_std, duration)
    log = run(scenario, log_meta=False)
    if log.meta["fault"] is not None:
        raise DomainError(f"static simulation faulted: {log.meta['fault']}")
    attach_tick = int(round(cfg.attach_time / scenario.dt))
    hits = [d["tick"] for d in log.meta["detections"] if d["tick"] > attach_tick]
    # Without a detection, fall back to the typical detection delay.
    start = hits[0] + 1 if hits else attach_tick + 230
    return StaticRun(log["t"], log["q"], log["tau_ext_measured"], start, bool(hits))


@dataclass
class TrainingSet:
    X: np.ndarray  # (K, 20, 6) pseudo-wrench sequences
    Y: np.ndarray  # (K, 4) true theta
    groups: np.ndarray  # (K,) simulation index
    meta: list  # per example: sim seed, theta, offset, detected

    def __len__(self) -> int:
        return len(self.X)

    def save(self, path: str | Path, config: DataConfig) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"schema_version": DATA_SCHEMA_VERSION, "config": asdict(config),
                  "digest": config.digest(), "examples": self.meta}
        with open(path, "wb") as fh:
            np.savez(fh, X=self.X, Y=self.Y, groups=self.groups, header=json.dumps(header))
        return path

    @classmethod
    def load(cls, path: str | Path, config: DataConfig | None = None) -> "TrainingSet":
        with np.load(path, allow_pickle=False) as f:
            header = json.loads(str(f["header"]))
            if header.get("schema_version") != DATA_SCHEMA_VERSION:
                raise DomainError("training data cache has an unsupported schema")
            if config is not None and header.get("digest") != config.digest():
                raise DomainError("training data cache was generated with different settings")
            return cls(f["X"], f["Y"], f["groups"], header["examples"])


def generate_training_data(cfg: DataConfig = DataConfig(), cache: str | Path | None = None,
                           progress=None) -> TrainingSet:
    """``n_sims`` static-hold simulations, ``len(shifts)`` noisy windows each.

    With ``cache`` set, a matching cache file is reused and a fresh result is
    written there.
    """
    if cache is not None and Path(cache).exists():
        try:
            return TrainingSet.load(cache, cfg)
        except DomainError:
            pass
    chain = load_chain(cfg.chain)
    rng = np.random.default_rng(cfg.seed)
    X, Y, groups, meta = [], [], [], []
    for i in range(cfg.n_sims):
        theta = sample_theta(rng, cfg)
        sim_seed = cfg.seed * 100_000 + i
        run = simulate_static(theta, sim_seed, cfg)
        noise_rng = np.random.default_rng(sim_seed + 7)
        for offset in cfg.shifts:
            win = run.window(offset, cfg.window)
            if cfg.noise_std > 0:
                noisy = win.tau_ext + cfg.noise_std * noise_rng.standard_normal(win.tau_ext.shape)
                win = WindowDataset(win.t, win.q, noisy, win.meta)
            X.append(preprocess(win, chain))
            Y.append(theta.as_vector())
            groups.append(i)
            meta.append({"sim": i, "seed": sim_seed, "theta": theta.as_vector().tolist(),
                         "offset": int(offset), "detected": run.detected})
        if progress is not None:
            progress(i + 1, cfg.n_sims)
    out = TrainingSet(np.array(X), np.array(Y), np.array(groups), meta)
    if cache is not None:
        out.save(cache, cfg)
    return out
