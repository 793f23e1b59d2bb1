"""Pseudo-wrench preprocessing, the trained prior model and its weights file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from rme.dataset import WindowDataset
from rme.errors import DomainError, WeightsFormatError
from rme.prior import net
from rme.robot.chain import KinematicChain
from rme.robot.dynamics import DEFAULT_PINV_DAMPING, jacobian, pseudo_wrench_from_jacobian

MAGIC = b"RMEPRIOR"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<IIqQ")  # version, tensor count, seed, network parameter count
NORM_KEYS = ("in_mean", "in_std", "out_mean", "out_std")
BUNDLED_WEIGHTS = "prior_weights.bin"


def subsample_indices(n_samples: int, m: int = net.SEQ_LEN) -> np.ndarray:
    """``m`` indices evenly spaced over ``[0, n_samples - 1]``, rounded to the nearest sample."""
    if n_samples < m:
        raise DomainError(f"window has {n_samples} samples, need at least {m}")
    return np.rint(np.linspace(0, n_samples - 1, m)).astype(int)


def preprocess(window: WindowDataset, chain: KinematicChain,
               damping: float = DEFAULT_PINV_DAMPING) -> np.ndarray:
    """The (20, 6) pseudo-wrench sequence fed to the network."""
    idx = subsample_indices(len(window))
    return np.array([
        pseudo_wrench_from_jacobian(jacobian(chain, window.q[i]), window.tau_ext[i], damping)
        for i in idx
    ])


@dataclass
class PriorModel:
    """Network weights plus the input/target standardisation learned with them."""

    params: net.Params
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    seed: int = 0

    def __post_init__(self):
        net.check_shapes(self.params)
        for key, size in zip(NORM_KEYS, (net.IN_DIM, net.IN_DIM, net.OUT_DIM, net.OUT_DIM)):
            val = np.asarray(getattr(self, key), dtype=float).reshape(size)
            setattr(self, key, val)
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise DomainError("standardisation scales must be positive")

    def normalize(self, seqs) -> np.ndarray:
        return (np.asarray(seqs, dtype=float) - self.in_mean) / self.in_std

    def predict(self, seqs) -> np.ndarray:
        """theta mean for one (20, 6) sequence or a batch (B, 20, 6)."""
        y = net.forward(self.params, self.normalize(seqs))
        return y * self.out_std + self.out_mean

    def predict_window(self, window: WindowDataset, chain: KinematicChain) -> np.ndarray:
        return self.predict(preprocess(window, chain))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tensors = list(self.params.items()) + [(f"norm.{k}", getattr(self, k)) for k in NORM_KEYS]
        chunks = [MAGIC, _HEADER.pack(WEIGHTS_VERSION, len(tensors), int(self.seed), net.count(self.params))]
        for name, arr in tensors:
            raw = name.encode()
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        path.write_bytes(b"".join(chunks))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PriorModel":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PriorModel":
        reader = _Reader(blob)
        if reader.take(len(MAGIC)) != MAGIC:
            raise WeightsFormatError("not a prior weights file")
        version, n_tensors, seed, n_params = reader.unpack(_HEADER)
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        if n_params != net.PARAM_COUNT:
            raise WeightsFormatError(f"header declares {n_params} parameters, expected {net.PARAM_COUNT}")
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = reader.unpack(struct.Struct("<H"))
            name = reader.take(name_len).decode()
            (ndim,) = reader.unpack(struct.Struct("<B"))
            shape = reader.unpack(struct.Struct(f"<{ndim}I"))
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).astype(float)
        if reader.remaining:
            raise WeightsFormatError(f"{reader.remaining} trailing bytes after the last tensor")
        try:
            norm = {k: tensors.pop(f"norm.{k}") for k in NORM_KEYS}
            return cls(tensors, seed=seed, **norm)
        except (KeyError, DomainError) as exc:
            raise WeightsFormatError(f"weights file does not match the network layout: {exc}") from exc


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.pos

    def take(self, size: int) -> bytes:
        if size > self.remaining:
            raise WeightsFormatError(f"truncated weights file at byte {self.pos}")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_bundled() -> PriorModel | None:
    """The weights shipped with the package, if present."""
    ref = resources.files("rme.data").joinpath(BUNDLED_WEIGHTS)
    if not ref.is_file():
        return None
    return PriorModel.from_bytes(ref.read_bytes())


def load_prior(source: str | Path | None) -> PriorModel:
    if source is None:
        model = load_bundled()
        if model is None:
            raise DomainError("no bundled prior weights; train them with `rme train-prior`")
        return model
    return PriorModel.load(source)
