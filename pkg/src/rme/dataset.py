"""The estimation window: timestamped joint positions and external torques."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rme.errors import DomainError

WINDOW_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class WindowDataset:
    t: np.ndarray  # (N,) seconds
    q: np.ndarray  # (N, n)
    tau_ext: np.ndarray  # (N, n) residual external torque seen by the estimator
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.q.shape != self.tau_ext.shape or self.q.shape[0] != self.t.shape[0]:
            raise DomainError("window arrays have inconsistent shapes")
        if self.q.shape[0] == 0:
            raise DomainError("empty window")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.tau_ext))):
            raise DomainError("window contains non-finite samples")

    def __len__(self) -> int:
        return self.q.shape[0]

    def head(self, count: int) -> "WindowDataset":
        return WindowDataset(self.t[:count], self.q[:count], self.tau_ext[:count], dict(self.meta))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"schema_version": WINDOW_SCHEMA_VERSION, **self.meta}
        np.savez(path, t=self.t, q=self.q, tau_ext=self.tau_ext, meta=json.dumps(meta, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "WindowDataset":
        path = Path(path)
        if not path.exists() and path.with_suffix(".npz").exists():
            path = path.with_suffix(".npz")
        try:
            with np.load(path, allow_pickle=False) as f:
                meta = json.loads(str(f["meta"]))
                if meta.get("schema_version") != WINDOW_SCHEMA_VERSION:
                    raise DomainError(f"unsupported window schema {meta.get('schema_version')!r}")
                return cls(f["t"], f["q"], f["tau_ext"], meta)
        except (OSError, KeyError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"cannot read window file {path}: {exc}") from exc
