"""Window -> prior -> variational fit: the estimator the simulation calls after a detection."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from rme import vi
from rme.dataset import WindowDataset
from rme.detection import REMOVED
from rme.errors import DomainError
from rme.prior.model import PriorModel, load_prior, preprocess
from rme.robot.chain import KinematicChain
from rme.robot.dynamics import MismatchParams


@dataclass
class Estimator:
    """Callable ``(window, seed) -> (residual MismatchParams, report)``."""

    chain: KinematicChain
    prior_kind: str = "nn"  # nn | zero
    model: PriorModel | None = None
    vi_config: vi.VIConfig = vi.VIConfig()
    prior_sigma: tuple = vi.PRIOR_SIGMA

    def __post_init__(self):
        if self.prior_kind not in ("nn", "zero"):
            raise DomainError(f"unknown prior {self.prior_kind!r}")
        if self.prior_kind == "nn" and self.model is None:
            raise DomainError("the nn prior needs a trained model")

    def prior_mean(self, window: WindowDataset) -> np.ndarray:
        if self.prior_kind == "zero":
            return np.zeros(4)
        seq = preprocess(window, self.chain)
        # A removal produces the negated wrench of the payload that left;
        # the network only knows positive masses.
        if window.meta.get("sign") == REMOVED:
            mu = self.model.predict(-seq)
            mu[0] = -mu[0]
            return mu
        return self.model.predict(seq)

    def __call__(self, window: WindowDataset, seed: int = 0):
        t0 = time.perf_counter()
        mu0 = self.prior_mean(window)
        prior = vi.GaussianPrior(mu0, np.asarray(self.prior_sigma, dtype=float))
        lik = vi.build_likelihood(window, self.chain)
        cfg = vi.VIConfig(**{**self.vi_config.__dict__, "seed": int(seed)})
        result = vi.fit(lik, prior, cfg)
        report = result.report()
        report.update({
            "prior": self.prior_kind,
            "prior_mu": mu0.tolist(),
            "likelihood_sigma": lik.sigma.tolist(),
            "total_wall_ms": 1e3 * (time.perf_counter() - t0),
        })
        return result.posterior.params, report


def build_estimator(estimation_cfg: dict, chain: KinematicChain) -> Estimator:
    kind = estimation_cfg.get("prior", "nn")
    model = load_prior(estimation_cfg.get("weights")) if kind == "nn" else None
    return Estimator(chain, kind, model, vi.VIConfig.from_dict(estimation_cfg.get("vi")))
