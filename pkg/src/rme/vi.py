"""Mean-field Gaussian variational inference over the payload parameters.

The payload torque is linear in ``w = (m, m r_x, m r_y, m r_z)``:
``tau_mm(q_i) = Phi_i w`` with ``Phi_i = [a_i, B_i]`` from the robot model.
The Gaussian log-likelihood of a whole window therefore reduces to three
sufficient statistics (``H``, ``g``, ``c``), which makes each Monte Carlo
evaluation O(1) in the window length while staying exactly equal to summing
per-sample log densities.

Optimisation details worth knowing:

* means are updated in rotated, prior-scaled coordinates ``mu = anchor + D V u``
  (``D`` the prior sigmas, ``V`` the eigenvectors of the prior-whitened
  Gauss-Newton curvature, refreshed on a doubling schedule), so an Adam step
  moves the mean by about ``lr`` prior standard deviations and the stiff
  m/r_z valley lines up with Adam's per-coordinate scaling;
* the reported posterior and the stopping rule use an exponential average of
  the iterates, which removes most of the jitter that Adam keeps under
  Monte Carlo gradient noise;
* stabilisation means the averaged iterate moved less than ``threshold`` over
  the last ``patience`` iterations, with means measured in prior standard
  deviations and sigmas in log units.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from rme.dataset import WindowDataset
from rme.errors import DomainError
from rme.robot.chain import KinematicChain
from rme.robot.dynamics import MismatchParams, mismatch_basis

PRIOR_SIGMA = (0.5, 0.02, 0.02, 0.05)
NOISE_FLOOR = 1e-3
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianPrior:
    mu: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.array(PRIOR_SIGMA))

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(4))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float).reshape(4))
        if np.any(self.sigma <= 0):
            raise DomainError("prior sigma must be strictly positive")

    @classmethod
    def zero(cls, sigma=PRIOR_SIGMA) -> "GaussianPrior":
        return cls(np.zeros(4), np.asarray(sigma, dtype=float))


def estimate_likelihood_noise(tau_ext, floor: float = NOISE_FLOOR) -> np.ndarray:
    """Per-joint std of the linearly detrended torque series, floored."""
    tau = np.asarray(tau_ext, dtype=float)
    if tau.ndim != 2 or tau.shape[0] == 0:
        raise DomainError("need a non-empty (N, n) torque array")
    N = tau.shape[0]
    if N < 3:
        return np.full(tau.shape[1], floor)
    X = np.column_stack([np.ones(N), np.arange(N, dtype=float)])
    coef, *_ = np.linalg.lstsq(X, tau, rcond=None)
    resid = tau - X @ coef
    return np.maximum(resid.std(axis=0, ddof=2), floor)


@dataclass(frozen=True)
class LikelihoodModel:
    """Sufficient statistics of ``sum_i log N(tau_i | Phi_i w, diag(sigma^2))``."""

    H: np.ndarray
    g: np.ndarray
    c: float
    sigma: np.ndarray
    count: int

    def log_likelihood(self, theta) -> float:
        w = _w(np.asarray(theta, dtype=float))
        quad = w @ self.H @ w - 2.0 * self.g @ w + self.c
        n = len(self.sigma)
        return -0.5 * quad - self.count * (np.log(self.sigma).sum() + 0.5 * n * LOG_2PI)


def _w(theta):
    return np.concatenate([theta[..., :1], theta[..., :1] * theta[..., 1:4]], axis=-1)


def build_likelihood(window: WindowDataset, chain: KinematicChain, sigma=None) -> LikelihoodModel:
    if sigma is None:
        # the detrending assumes time order, not storage order
        sigma = estimate_likelihood_noise(window.tau_ext[np.argsort(window.t, kind="stable")])
    else:
        sigma = np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise DomainError("likelihood sigma must be positive")
    a, B = mismatch_basis(chain, window.q)
    Phi = np.concatenate([a[:, :, None], B], axis=2)  # (N, n, 4)
    Wphi = Phi / sigma[None, :, None] ** 2
    H = np.einsum("inj,ink->jk", Phi, Wphi)
    g = np.einsum("inj,in->j", Wphi, window.tau_ext)
    c = float(np.sum(window.tau_ext**2 / sigma**2))
    return LikelihoodModel(0.5 * (H + H.T), g, c, sigma, len(window))


def _loglik_grad(lik: LikelihoodModel, thetas: np.ndarray):
    """Log-likelihood and its theta-gradient for a batch of samples (S, 4)."""
    w = _w(thetas)
    Hw = w @ lik.H
    quad = np.einsum("sj,sj->s", w, Hw) - 2.0 * w @ lik.g + lik.c
    n = len(lik.sigma)
    ll = -0.5 * quad - lik.count * (np.log(lik.sigma).sum() + 0.5 * n * LOG_2PI)
    gam = lik.g - Hw  # d ll / d w
    grad = np.empty_like(thetas)
    grad[:, 0] = gam[:, 0] + np.einsum("sj,sj->s", gam[:, 1:], thetas[:, 1:4])
    grad[:, 1:] = thetas[:, :1] * gam[:, 1:]
    return ll, grad


def antithetic_normals(rng, S: int) -> np.ndarray:
    """``S`` standard normal draws in ``(eps, -eps)`` pairs (one extra draw if ``S`` is odd).

    Pairing cancels every odd-order term of the Monte Carlo error, which for
    this model is most of it.
    """
    half = rng.standard_normal(((S + 1) // 2, 4))
    return np.concatenate([half, -half])[:S]


def loglik_hessian(lik: LikelihoodModel, theta) -> np.ndarray:
    """Hessian of the log-likelihood in theta (4x4)."""
    theta = np.asarray(theta, dtype=float)
    m, r = theta[0], theta[1:4]
    Jw = np.zeros((4, 4))  # dw/dtheta
    Jw[0, 0] = 1.0
    Jw[1:, 0] = r
    Jw[1:, 1:] = m * np.eye(3)
    gam = lik.g - lik.H @ _w(theta)
    hess = -Jw.T @ lik.H @ Jw
    hess[0, 1:] += gam[1:]
    hess[1:, 0] += gam[1:]
    return hess


def elbo_loss(mu, log_sigma, lik: LikelihoodModel, prior: GaussianPrior, S: int, rng, eps=None,
              fixed_mask=None, control_variate: bool = False):
    """Negative ELBO and its gradient wrt ``(mu, log_sigma)``.

    The likelihood expectation uses ``S`` reparameterised draws
    ``theta = mu + sigma * eps`` (antithetic pairs unless ``eps`` is given); the prior cross-entropy and the entropy of
    ``q`` are Gaussian closed forms.  Pass ``eps`` (S, 4) to reuse draws.
    Dimensions in ``fixed_mask`` are held at ``mu`` exactly (zero spread).

    ``control_variate`` adds a zero-mean term built from the likelihood
    Hessian at ``mu`` that cancels the sampling error of the quadratic part
    of the likelihood in the log-sigma gradient.  Leave it off when comparing the
    gradient against finite differences of the loss.
    """
    if S < 1:
        raise DomainError("need at least one Monte Carlo sample")
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    sigma = np.exp(log_sigma)
    free = np.ones(4, bool) if fixed_mask is None else ~np.asarray(fixed_mask, bool)
    if eps is None:
        eps = antithetic_normals(rng, S)
    eps = eps * free
    thetas = mu + sigma * eps
    ll, grad = _loglik_grad(lik, thetas)
    if not np.all(np.isfinite(ll)):
        bad = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise DomainError(f"non-finite log-likelihood at sample {bad}: theta={thetas[bad].tolist()}")
    sp2 = prior.sigma**2
    # E_q[-log p(theta)] and -H[q], restricted to the free dimensions
    cross = 0.5 * (((mu - prior.mu) ** 2 + sigma**2) / sp2 + np.log(2 * np.pi * sp2))
    ent = 0.5 * (1.0 + LOG_2PI) + log_sigma
    loss = -ll.mean() + float(np.sum((cross - ent) * free))
    g_mu = -grad.mean(axis=0) + (mu - prior.mu) / sp2 * free
    g_ls = (-(grad * eps).mean(axis=0) * sigma + (sigma**2 / sp2 - 1.0)) * free
    if control_variate:
        # E[eps eps^T] = I, so this term has zero mean
        outer = np.einsum("si,sj->ij", eps, eps) / len(eps) - np.diag(free.astype(float))
        scaled = loglik_hessian(lik, mu) * np.outer(sigma, sigma)
        g_ls = g_ls + np.sum(scaled * outer, axis=1) * free
    return float(loss), g_mu, g_ls


@dataclass(frozen=True)
class VIConfig:
    lr: float = 0.025
    clip_norm: float = 10.0
    samples: int = 8
    threshold: float = 1e-3
    patience: int = 30
    max_iter: int = 2000
    average: float = 0.9  # EMA factor for the reported iterate
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        vals = (self.lr, self.clip_norm, self.samples, self.threshold, self.patience, self.max_iter)
        if min(vals) <= 0:
            raise DomainError("VI settings must be positive")
        if not 0.0 <= self.average < 1.0:
            raise DomainError("average must lie in [0, 1)")

    @classmethod
    def from_dict(cls, cfg: dict | None) -> "VIConfig":
        return cls(**(cfg or {}))


@dataclass(frozen=True)
class VariationalPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def params(self) -> MismatchParams:
        return MismatchParams.from_vector(self.mu)


@dataclass
class VIResult:
    posterior: VariationalPosterior
    converged: bool
    iterations: int
    wall_s: float
    loss_trace: np.ndarray

    @property
    def status(self) -> str:
        return "converged" if self.converged else "unconverged"

    def report(self) -> dict:
        return {
            "mu": self.posterior.mu.tolist(),
            "sigma": self.posterior.sigma.tolist(),
            "iterations": self.iterations,
            "status": self.status,
            "wall_ms": 1e3 * self.wall_s,
            "final_loss": float(self.loss_trace[-1]) if len(self.loss_trace) else None,
        }


def gauss_newton_precision(lik: LikelihoodModel, prior: GaussianPrior, theta) -> np.ndarray:
    """Positive semi-definite curvature of the negative log joint at ``theta``.

    Drops the residual-weighted second derivatives of ``w(theta)`` from the
    exact Hessian, which keeps it usable far from the optimum.
    """
    theta = np.asarray(theta, dtype=float)
    Jw = np.zeros((4, 4))
    Jw[0, 0] = 1.0
    Jw[1:, 0] = theta[1:4]
    Jw[1:, 1:] = theta[0] * np.eye(3)
    return Jw.T @ lik.H @ Jw + np.diag(1.0 / prior.sigma**2)


def _mean_basis(lik, prior, mu, mask) -> np.ndarray:
    """Columns: prior-scaled eigenvectors of the prior-whitened curvature (free dims only)."""
    free = np.flatnonzero(~mask)
    D = prior.sigma
    basis = np.zeros((4, 4))
    if free.size:
        P = gauss_newton_precision(lik, prior, mu) * np.outer(D, D)
        _, V = np.linalg.eigh(P[np.ix_(free, free)])
        basis[np.ix_(free, free)] = V
    return D[:, None] * basis


def fit(lik: LikelihoodModel, prior: GaussianPrior, config: VIConfig = VIConfig(), fixed=None,
        rng=None) -> VIResult:
    """Adam on the negative ELBO from ``phi_0 = (mu_prior, log sigma_prior)``.

    ``fixed`` maps parameter indices to values held constant (e.g. the CoM
    for a mass-only problem).
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mask = np.zeros(4, bool)
    mu = prior.mu.copy()
    for idx, val in (fixed or {}).items():
        mask[idx] = True
        mu[idx] = val
    scale = prior.sigma
    ls = np.log(prior.sigma).copy()
    free = np.concatenate([~mask, ~mask])
    b1, b2, adam_eps = config.beta1, config.beta2, 1e-8
    m1, m2 = np.zeros(8), np.zeros(8)
    steps = np.zeros(8)  # Adam step counters; the mean block restarts with its basis
    avg_mu, avg_ls = mu.copy(), ls.copy()
    history = deque([np.concatenate([avg_mu / scale, avg_ls])], maxlen=config.patience + 1)
    losses = []
    converged = False
    refresh = 1
    it = 0
    for it in range(1, config.max_iter + 1):
        if it == refresh:
            # Re-anchor the mean coordinates on a rotation that diagonalises the
            # local curvature, so Adam's per-coordinate scaling fits the valley.
            anchor = mu.copy()
            basis = _mean_basis(lik, prior, avg_mu if it > 1 else mu, mask)
            u = np.zeros(4)
            m1[:4] = m2[:4] = steps[:4] = 0.0
            refresh *= 2
        mu = anchor + basis @ u
        loss, g_mu, g_ls = elbo_loss(mu, ls, lik, prior, config.samples, rng, fixed_mask=mask,
                                       control_variate=True)
        losses.append(loss)
        grad = np.concatenate([basis.T @ g_mu, g_ls]) * free
        # elementwise clamp: a stiff mean gradient must not shrink the sigma step
        grad = np.clip(grad, -config.clip_norm, config.clip_norm)
        steps += 1
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad**2
        step = config.lr * (m1 / (1 - b1**steps)) / (np.sqrt(m2 / (1 - b2**steps)) + adam_eps)
        u = u - step[:4]
        ls = ls - step[4:]
        mu = anchor + basis @ u
        avg_mu = config.average * avg_mu + (1 - config.average) * mu
        avg_ls = config.average * avg_ls + (1 - config.average) * ls
        history.append(np.concatenate([avg_mu / scale, avg_ls]))
        if len(history) > config.patience and np.abs(history[-1] - history[0]).max() < config.threshold:
            converged = True
            break
    post = VariationalPosterior(np.where(mask, mu, avg_mu), avg_ls.copy())
    return VIResult(post, converged, it, time.perf_counter() - t0, np.array(losses))


def smoothed(trace, window: int = 25) -> np.ndarray:
    trace = np.asarray(trace, dtype=float)
    if len(trace) < window:
        return trace.copy()
    kernel = np.ones(window) / window
    return np.convolve(trace, kernel, mode="valid")
