"""Per-tick telemetry with a columnar CSV body and a JSON metadata sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RUNLOG_SCHEMA_VERSION = 1

DETECTION_ARMED, DETECTION_COLLECTING, DETECTION_ESTIMATING, DETECTION_SUPPRESSED = range(4)


def column_layout(n: int) -> list[tuple[str, int]]:
    """(group, width) pairs in CSV column order."""
    return [
        ("t", 1),
        ("q", n),
        ("dq", n),
        ("x", 6),  # position + rotation vector
        ("xdot", 6),
        ("tau_c", n),
        ("tau_hat_c", n),
        ("tau_ext_true", n),
        ("tau_ext_measured", n),
        ("theta_true", 4),
        ("theta_hat", 4),
        ("detection_state", 1),
        ("active_constraints", 1),  # bitmask over constraint indices
        ("flagged", 1),
        ("S", 1),
        ("V", 1),
        ("supply", 1),
        ("tank", 1),
        ("passivity_residual", 1),
    ]


def column_names(n: int) -> list[str]:
    names = []
    for group, width in column_layout(n):
        names += [group] if width == 1 else [f"{group}_{i}" for i in range(width)]
    return names


@dataclass
class RunLog:
    n: int
    data: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    # Wall-clock measurements; kept out of the replayable files.
    timing: list = field(default_factory=list)
    # Collected estimation windows, in detection order.
    windows: list = field(default_factory=list)

    @classmethod
    def allocate(cls, n: int, ticks: int) -> "RunLog":
        data = {g: np.zeros((ticks, w)) if w > 1 else np.zeros(ticks) for g, w in column_layout(n)}
        data["passivity_residual"][:] = np.nan
        return cls(n, data)

    def __len__(self) -> int:
        return len(self.data["t"])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.data[key]

    def truncate(self, ticks: int) -> None:
        self.data = {k: v[:ticks] for k, v in self.data.items()}

    def matrix(self) -> np.ndarray:
        cols = [v.reshape(len(self), -1) for v in (self.data[g] for g, _ in column_layout(self.n))]
        return np.hstack(cols)

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.json``; identical runs give identical bytes."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        header = ",".join(column_names(self.n))
        np.savetxt(csv_path, self.matrix(), delimiter=",", header=header, comments="", fmt="%.17g")
        meta = {"schema_version": RUNLOG_SCHEMA_VERSION, "n": self.n, **self.meta}
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
        if self.timing:
            stem.with_suffix(".timing.json").write_text(
                json.dumps(self.timing, indent=2, default=_json_default) + "\n")
        return csv_path, json_path

    @classmethod
    def read(cls, stem: str | Path) -> "RunLog":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        n = int(meta["n"])
        mat = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        data, col = {}, 0
        for g, w in column_layout(n):
            block = mat[:, col : col + w]
            data[g] = block[:, 0] if w == 1 else block
            col += w
        return cls(n, data, meta)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj)}")
