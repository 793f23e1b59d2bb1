"""Wrench-sequence regressor: conv1d -> positional embedding -> self-attention -> mean pool -> MLP x3 -> head.

Plain numpy with a hand-written backward pass.  The three MLP blocks share
one set of weights; that is the only layout consistent with a total of
53,252 parameters (three independent blocks would give 119,428).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rme.errors import DomainError

SEQ_LEN = 20
IN_DIM = 6
WIDTH = 64
KERNEL = 5
HEADS = 8
HEAD_DIM = WIDTH // HEADS
HIDDEN = 256
OUT_DIM = 4
MLP_REPEATS = 3
DROPOUT = 0.1

# name -> (shape, fan_in used for the uniform init bound)
LAYOUT: dict[str, tuple[tuple[int, ...], int]] = {
    "conv_w": ((WIDTH, IN_DIM, KERNEL), IN_DIM * KERNEL),
    "conv_b": ((WIDTH,), IN_DIM * KERNEL),
    "pos": ((SEQ_LEN, WIDTH), WIDTH),
    "wq": ((WIDTH, WIDTH), WIDTH),
    "bq": ((WIDTH,), WIDTH),
    "wk": ((WIDTH, WIDTH), WIDTH),
    "bk": ((WIDTH,), WIDTH),
    "wv": ((WIDTH, WIDTH), WIDTH),
    "bv": ((WIDTH,), WIDTH),
    "wo": ((WIDTH, WIDTH), WIDTH),
    "bo": ((WIDTH,), WIDTH),
    "mlp_w1": ((WIDTH, HIDDEN), WIDTH),
    "mlp_b1": ((HIDDEN,), WIDTH),
    "mlp_w2": ((HIDDEN, WIDTH), HIDDEN),
    "mlp_b2": ((WIDTH,), HIDDEN),
    "head_w": ((WIDTH, OUT_DIM), WIDTH),
    "head_b": ((OUT_DIM,), WIDTH),
}
PARAM_COUNT = sum(int(np.prod(shape)) for shape, _ in LAYOUT.values())

Params = dict[str, np.ndarray]


def init_params(seed: int = 0) -> Params:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, drawn in LAYOUT order."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (shape, fan_in) in LAYOUT.items():
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    return out


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def count(params: Params) -> int:
    return sum(v.size for v in params.values())


def check_shapes(params: Params) -> None:
    if set(params) != set(LAYOUT):
        raise DomainError(f"parameter names differ from layout: {sorted(set(params) ^ set(LAYOUT))}")
    for name, (shape, _) in LAYOUT.items():
        if params[name].shape != shape:
            raise DomainError(f"{name}: expected shape {shape}, got {params[name].shape}")


@dataclass
class _Cache:
    cols: np.ndarray
    H0: np.ndarray
    Qh: np.ndarray
    Kh: np.ndarray
    Vh: np.ndarray
    A: np.ndarray
    O: np.ndarray
    mlp: list  # per repeat: (h_in, pre_relu, relu_out, mask)
    h_out: np.ndarray


def _split_heads(x):
    B, M, _ = x.shape
    return x.reshape(B, M, HEADS, HEAD_DIM).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, _, M, _ = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, M, WIDTH)


def forward(params: Params, X, train: bool = False, rng=None, return_cache: bool = False,
            dropout: float = DROPOUT):
    """Batch forward pass.  ``X`` is (B, 20, 6) or a single (20, 6) sequence."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1:] != (SEQ_LEN, IN_DIM):
        raise DomainError(f"expected input (B, {SEQ_LEN}, {IN_DIM}), got {X.shape}")
    if train and rng is None:
        raise DomainError("train mode needs an rng for dropout")
    B = X.shape[0]
    pad = KERNEL // 2
    Xp = np.pad(X, ((0, 0), (pad, pad), (0, 0)))
    cols = np.stack([Xp[:, k:k + SEQ_LEN, :] for k in range(KERNEL)], axis=3).reshape(B, SEQ_LEN, -1)
    H0 = cols @ params["conv_w"].reshape(WIDTH, -1).T + params["conv_b"] + params["pos"]

    Qh = _split_heads(H0 @ params["wq"] + params["bq"])
    Kh = _split_heads(H0 @ params["wk"] + params["bk"])
    Vh = _split_heads(H0 @ params["wv"] + params["bv"])
    S = Qh @ Kh.transpose(0, 1, 3, 2) / np.sqrt(HEAD_DIM)
    S -= S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    O = _merge_heads(A @ Vh)
    Z = O @ params["wo"] + params["bo"]
    h = Z.mean(axis=1)

    mlp = []
    for _ in range(MLP_REPEATS):
        pre = h @ params["mlp_w1"] + params["mlp_b1"]
        act = np.maximum(pre, 0.0)
        z = act @ params["mlp_w2"] + params["mlp_b2"]
        if train:
            mask = (rng.random(z.shape) >= dropout) / (1.0 - dropout)
            h_next = z * mask
        else:
            mask = None
            h_next = z
        mlp.append((h, pre, act, mask))
        h = h_next
    y = h @ params["head_w"] + params["head_b"]
    out = y[0] if single else y
    if return_cache:
        return out, _Cache(cols, H0, Qh, Kh, Vh, A, O, mlp, h)
    return out


def backward(params: Params, cache: _Cache, dy) -> Params:
    """Gradients of a scalar loss given ``dy = dL/dy`` (B, 4)."""
    g = zeros_like(params)
    dy = np.atleast_2d(dy)
    g["head_w"] = cache.h_out.T @ dy
    g["head_b"] = dy.sum(axis=0)
    dh = dy @ params["head_w"].T
    for h_in, pre, act, mask in reversed(cache.mlp):
        dz = dh if mask is None else dh * mask
        g["mlp_w2"] += act.T @ dz
        g["mlp_b2"] += dz.sum(axis=0)
        dpre = (dz @ params["mlp_w2"].T) * (pre > 0)
        g["mlp_w1"] += h_in.T @ dpre
        g["mlp_b1"] += dpre.sum(axis=0)
        dh = dpre @ params["mlp_w1"].T

    B = dh.shape[0]
    # mean pooling: every token receives the same upstream gradient
    dz_tok = dh / SEQ_LEN
    g["wo"] = cache.O.sum(axis=1).T @ dz_tok
    g["bo"] = dh.sum(axis=0)
    dO = np.repeat((dz_tok @ params["wo"].T)[:, None, :], SEQ_LEN, axis=1)
    dOh = _split_heads(dO)
    A = cache.A
    dA = dOh @ cache.Vh.transpose(0, 1, 3, 2)
    dVh = A.transpose(0, 1, 3, 2) @ dOh
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(HEAD_DIM)
    dQ = _merge_heads(dS @ cache.Kh)
    dK = _merge_heads(dS.transpose(0, 1, 3, 2) @ cache.Qh)
    dV = _merge_heads(dVh)
    H0 = cache.H0
    dH0 = np.zeros_like(H0)
    H0_flat = H0.reshape(-1, WIDTH)
    for name, d in (("q", dQ), ("k", dK), ("v", dV)):
        g["w" + name] = H0_flat.T @ d.reshape(-1, WIDTH)
        g["b" + name] = d.sum(axis=(0, 1))
        dH0 += d @ params["w" + name].T
    g["pos"] = dH0.sum(axis=0)
    g["conv_b"] = dH0.sum(axis=(0, 1))
    g["conv_w"] = (dH0.reshape(-1, WIDTH).T @ cache.cols.reshape(B * SEQ_LEN, -1)).reshape(
        WIDTH, IN_DIM, KERNEL)
    return g


def mse_and_grad(params: Params, X, T, train: bool = False, rng=None, dropout: float = DROPOUT):
    """Mean squared error over all outputs and its parameter gradient."""
    y, cache = forward(params, X, train=train, rng=rng, return_cache=True, dropout=dropout)
    diff = y - T
    loss = float(np.mean(diff**2))
    grads = backward(params, cache, 2.0 * diff / diff.size)
    return loss, grads
