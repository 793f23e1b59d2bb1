"""Adam training of the prior network on (wrench sequence, theta) pairs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from rme.errors import DomainError, TrainingDiverged
from rme.prior import net
from rme.prior.model import PriorModel


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    iterations: int = 50_000
    batch_size: int = 32
    dropout: float = net.DROPOUT
    weight_decay: float = 2.0  # decoupled; lr * wd = 2e-4 shrink per step
    val_fraction: float = 0.2
    eval_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.iterations <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise DomainError("training settings must be positive")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError("dropout must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DomainError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, cfg: dict | None) -> "TrainingConfig":
        return cls(**(cfg or {}))


@dataclass
class TrainResult:
    model: PriorModel
    history: dict = field(default_factory=dict)  # iteration, train_mse, val_mse, batch_mse
    best_model: PriorModel | None = None  # lowest validation MSE seen at an evaluation
    best_iteration: int = 0
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    wall_s: float = 0.0

    @property
    def final_train_mse(self) -> float:
        return float(self.history["train_mse"][-1])

    @property
    def final_val_mse(self) -> float:
        return float(self.history["val_mse"][-1])

    @property
    def final_ratio(self) -> float:
        return self.final_val_mse / self.final_train_mse


def split_groups(groups, val_fraction: float, seed: int):
    """Train/validation indices with every group (simulation) on one side only."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(uniq)
    n_val = int(round(val_fraction * len(uniq)))
    val_groups = set(perm[:n_val].tolist())
    is_val = np.array([g in val_groups for g in groups])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


class Adam:
    """Adam with optional decoupled weight decay (matrices only, not biases)."""

    def __init__(self, params: net.Params, lr: float, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.weight_decay = weight_decay
        self.m = net.zeros_like(params)
        self.v = net.zeros_like(params)
        self.t = 0

    def step(self, params: net.Params, grads: net.Params) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.weight_decay and params[k].ndim > 1:
                params[k] *= 1.0 - self.lr * self.weight_decay
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _eval_mse(params, X, Y) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean((net.forward(params, X) - Y) ** 2))


def train(X, Y, config: TrainingConfig = TrainingConfig(), groups=None, progress=None) -> TrainResult:
    """Fit the network to sequences ``X`` (K, 20, 6) and targets ``Y`` (K, 4).

    Losses are MSE on standardised targets.  ``groups`` ties examples that
    must share a side of the train/validation split (default: each alone).
    ``progress(iteration, train_mse, val_mse)`` is called at every evaluation.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 3 or X.shape[1:] != (net.SEQ_LEN, net.IN_DIM) or Y.shape != (len(X), net.OUT_DIM):
        raise DomainError(f"bad training shapes {X.shape}, {Y.shape}")
    groups = np.arange(len(X)) if groups is None else np.asarray(groups)
    tr, va = split_groups(groups, config.val_fraction, config.seed)
    if len(tr) == 0:
        raise DomainError("empty training split")

    in_mean = X[tr].reshape(-1, net.IN_DIM).mean(axis=0)
    in_std = np.maximum(X[tr].reshape(-1, net.IN_DIM).std(axis=0), 1e-8)
    out_mean = Y[tr].mean(axis=0)
    out_std = np.maximum(Y[tr].std(axis=0), 1e-8)
    Xn = (X - in_mean) / in_std
    Yn = (Y - out_mean) / out_std

    params = net.init_params(config.seed)
    opt = Adam(params, config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    hist = {"iteration": [], "train_mse": [], "val_mse": [], "batch_mse": []}
    batch = min(config.batch_size, len(tr))
    best, best_it, best_val = None, 0, np.inf

    def snapshot(p):
        return PriorModel({k: v.copy() for k, v in p.items()}, in_mean, in_std, out_mean, out_std,
                          seed=config.seed)
    for it in range(1, config.iterations + 1):
        pick = tr[rng.choice(len(tr), size=batch, replace=False)]
        loss, grads = net.mse_and_grad(params, Xn[pick], Yn[pick], train=True, rng=rng,
                                       dropout=config.dropout)
        if not np.isfinite(loss):
            last = hist["batch_mse"][-1] if hist["batch_mse"] else None
            raise TrainingDiverged(f"loss became non-finite at iteration {it} "
                                   f"(last recorded batch MSE {last})")
        opt.step(params, grads)
        if it % config.eval_every == 0 or it == config.iterations:
            tr_mse = _eval_mse(params, Xn[tr], Yn[tr])
            va_mse = _eval_mse(params, Xn[va], Yn[va])
            hist["iteration"].append(it)
            hist["train_mse"].append(tr_mse)
            hist["val_mse"].append(va_mse)
            hist["batch_mse"].append(loss)
            if len(va) and va_mse < best_val:
                best, best_it, best_val = snapshot(params), it, va_mse
            if progress is not None:
                progress(it, tr_mse, va_mse)
    model = PriorModel(params, in_mean, in_std, out_mean, out_std, seed=config.seed)
    history = {k: np.asarray(v) for k, v in hist.items()}
    return TrainResult(model, history, best, best_it, tr, va, time.perf_counter() - t0)
