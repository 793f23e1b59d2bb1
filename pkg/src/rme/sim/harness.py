"""Batch experiments on top of the simulator: prior ablation, window ablation, static suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rme.dataset import WindowDataset
from rme.detection import ADDED
from rme.pipeline import Estimator
from rme.prior.datagen import DataConfig, sample_theta, simulate_static, static_scenario
from rme.robot.dynamics import MismatchParams

PARAM_NAMES = ("m", "r_x", "r_y", "r_z")

# Applied payloads of the hardware static-hold experiments (kg, m).
STATIC_PAYLOADS = (
    (0.300, (0.03, 0.00, 0.13)),
    (0.500, (0.06, 0.00, 0.13)),
    (0.700, (0.06, 0.00, 0.13)),
    (0.900, (0.05, -0.03, 0.13)),
    (1.100, (0.05, 0.02, 0.13)),
    (1.290, (0.05, 0.01, 0.13)),
)

# Evaluation sets never share seeds with the training data (seed 0).
ABLATION_SEED = 1


@dataclass
class Sample:
    theta: MismatchParams
    seed: int
    run: object  # StaticRun

    def window(self, window_ms: float, dt: float = 1e-3) -> WindowDataset:
        n = int(round(window_ms * 1e-3 / dt))
        return self.run.window(0, n, {"sign": ADDED, "seed": self.seed})


def regenerate(n: int, seed: int = ABLATION_SEED, tau_std: float = 0.05,
               duration: float = 1.6, progress=None) -> list[Sample]:
    """``n`` static-hold runs with payloads drawn like the training data."""
    cfg = DataConfig(seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        theta = sample_theta(rng, cfg)
        sim_seed = seed * 100_000 + i
        out.append(Sample(theta, sim_seed, simulate_static(theta, sim_seed, cfg, tau_std, duration)))
        if progress is not None:
            progress(i + 1, n)
    return out


def _mse(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.mean((est - truth) ** 2, axis=0)


def ablate_prior(samples: list[Sample], arms: dict[str, Estimator], window_ms: float = 200.0):
    """Fit every sample with every estimator.

    Returns (table rows, per-fit rows, timing rows); only the last holds wall-clock numbers.
    """
    truth = np.array([s.theta.as_vector() for s in samples])
    table, fits, timing = [], [], []
    for arm, est in arms.items():
        means = []
        for s in samples:
            theta_hat, report = est(s.window(window_ms), seed=s.seed)
            means.append(theta_hat.as_vector())
            fits.append({"arm": arm, "seed": s.seed, **_named("true", s.theta.as_vector()),
                         **_named("est", theta_hat.as_vector()),
                         "iterations": report["iterations"], "status": report["status"]})
            timing.append({"arm": arm, "seed": s.seed, "wall_ms": report["total_wall_ms"]})
        mse = _mse(np.array(means), truth)
        table.append({"prior": arm, **{f"mse_{k}": float(v) for k, v in zip(PARAM_NAMES, mse)}})
    return table, fits, timing


def ablate_window(samples: list[Sample], estimator: Estimator, intervals=(50, 100, 200, 300)):
    """Same samples, different collection windows; returns (table rows, timing rows)."""
    truth = np.array([s.theta.as_vector() for s in samples])
    table, timing = [], []
    for ms in intervals:
        means, walls = [], []
        for s in samples:
            theta_hat, report = estimator(s.window(ms), seed=s.seed)
            means.append(theta_hat.as_vector())
            walls.append(report["wall_ms"])
        mse = _mse(np.array(means), truth)
        table.append({"window_ms": int(ms), **{f"mse_{k}": float(v) for k, v in zip(PARAM_NAMES, mse)}})
        timing.append({"window_ms": int(ms), "mean_fit_wall_ms": float(np.mean(walls)),
                       "median_fit_wall_ms": float(np.median(walls))})
    return table, timing


def static_suite(seeds: int = 10, tau_std: float = 0.05, estimation: dict | None = None,
                 payloads=STATIC_PAYLOADS, progress=None):
    """Closed-loop runs with estimation on; returns (summary rows, parity rows)."""
    from rme.sim.engine import run

    cfg = DataConfig(duration=2.0)
    summary, parity = [], []
    for m, r in payloads:
        theta = MismatchParams(m, np.asarray(r, dtype=float))
        ests = []
        for k in range(seeds):
            scen = static_scenario(theta, 10_000 + k, cfg, tau_std)
            scen = scen.with_overrides(estimation={"enabled": True, **(estimation or {})})
            log = run(scen, log_meta=False)
            done = [e for e in log.meta["estimates"] if e.get("total") is not None]
            est = np.array(done[0]["total"]) if done else np.full(4, np.nan)
            ests.append(est)
            parity.append({"seed": scen.seed, **_named("true", theta.as_vector()), **_named("est", est),
                           "detected": bool(done)})
            if progress is not None:
                progress(len(parity), seeds * len(payloads))
        ests = np.array(ests)
        summary.append({**_named("true", theta.as_vector()),
                        **{f"mean_{k}": float(v) for k, v in zip(PARAM_NAMES, np.nanmean(ests, axis=0))},
                        **{f"std_{k}": float(v) for k, v in zip(PARAM_NAMES, np.nanstd(ests, axis=0))},
                        "detected": int(np.sum(np.isfinite(ests[:, 0])))})
    return summary, parity


def _named(prefix: str, vec) -> dict:
    return {f"{prefix}_{k}": float(v) for k, v in zip(PARAM_NAMES, vec)}


def write_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
