"""Pairs of states one sampling interval apart, plus CSV/manifest I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1


@dataclass
class Dataset:
    """Rows ``points[i] -> successors[i]`` under one step of the dynamics."""

    points: np.ndarray
    successors: np.ndarray
    dt: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.successors = np.atleast_2d(np.asarray(self.successors, dtype=np.float64))
        if self.points.shape != self.successors.shape:
            raise ValueError(f"points {self.points.shape} and successors {self.successors.shape} differ")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_series(cls, series, dt: float = 1.0, periodic: bool = False, meta: dict | None = None) -> "Dataset":
        """Consecutive pairs of one time series; ``periodic`` wraps the last state to the first."""
        series = np.atleast_2d(np.asarray(series, dtype=np.float64))
        if periodic:
            return cls(series, np.roll(series, -1, axis=0), dt, dict(meta or {}))
        return cls(series[:-1], series[1:], dt, dict(meta or {}))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.successors).tobytes())
        return h.hexdigest()


def _write_matrix(path: Path, rows: np.ndarray, prefix: str = "x"):
    header = ",".join(f"{prefix}_{j}" for j in range(rows.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def save_dataset(dataset: Dataset, stem: str | Path, recipe: dict | None = None):
    """Write ``<stem>.csv``, ``<stem>.successors.csv`` and ``<stem>.manifest.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix(stem.with_suffix(".csv"), dataset.points)
    _write_matrix(Path(str(stem) + ".successors.csv"), dataset.successors)
    manifest = {
        "format": "candyman-dataset",
        "version": MANIFEST_VERSION,
        "n_samples": len(dataset),
        "ambient_dim": dataset.ambient_dim,
        "dt": dataset.dt,
        "meta": dataset.meta,
        "recipe": recipe or {},
        "sha256": dataset.fingerprint(),
    }
    Path(str(stem) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(stem: str | Path) -> Dataset:
    stem = Path(str(stem).removesuffix(".csv"))
    manifest = json.loads(Path(str(stem) + ".manifest.json").read_text())
    if manifest.get("format") != "candyman-dataset":
        raise ValueError(f"{stem}: not a dataset manifest")
    points = _read_matrix(stem.with_suffix(".csv"))
    successors = _read_matrix(Path(str(stem) + ".successors.csv"))
    ds = Dataset(points, successors, manifest["dt"], manifest.get("meta", {}))
    if ds.fingerprint() != manifest["sha256"]:
        raise ValueError(f"{stem}: data do not match manifest checksum")
    return ds
