"""Atlas construction: overlapping coordinate domains and their chart maps.

The data are split by k-means, made to overlap by growing each cluster along
a symmetric K-nearest-neighbour graph, and each resulting domain gets its own
autoencoder. The encoder is the chart's coordinate map and the decoder its
approximate inverse. Points keep the cluster they started in as their unique
*interior* chart; points picked up while growing are *border* points.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .neighbor import NearestSearch
from .neuralnet import (
    LossReport,
    Mlp,
    PcaAnchoredAutoencoder,
    PlainAutoencoder,
    TrainConfig,
    default_activations,
    glorot_init,
    mlp_from_text,
    mlp_to_text,
    pca_anchored_autoencoder,
    train_autoencoder,
)

ATLAS_FORMAT = "candyman-atlas"
ATLAS_FORMAT_VERSION = 1


class DegenerateDirection(ValueError):
    pass


# ---------------------------------------------------------------------------
# clustering and graph


def kmeans(points, k: int, seed: int = 0, max_iters: int = 300, history: list | None = None,
           n_init: int = 10):
    """Lloyd's algorithm from ``n_init`` k-means++ starts. Returns ``(labels, centroids)``.

    The run with the lowest final inertia wins (earliest on ties). Assignment
    ties go to the lower centroid index. A cluster that empties is re-seeded
    at the point farthest from its current centroid. The winning run's
    inertia after each assignment is appended to ``history`` when given.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_init)):
        trace = []
        labels, centroids = _lloyd(X, k, rng, max_iters, trace)
        inertia = float(((X - centroids[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, labels, centroids, trace)
    if history is not None:
        history.extend(best[3])
    return best[1], best[2]


def _lloyd(X, k, rng, max_iters, history):
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            j = int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=d2 / total))
        centroids[c] = X[j]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iters):
        dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist[np.arange(n), new]))
            centroids[c] = X[far]
            dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(dist, axis=1)
            counts = np.bincount(new, minlength=k)
        history.append(float(dist[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centroids[c] = X[labels == c].mean(axis=0)
    return labels, centroids


@dataclass
class KnnGraph:
    adjacency: list[np.ndarray]
    K: int

    def __len__(self) -> int:
        return len(self.adjacency)

    def edges(self) -> set[tuple[int, int]]:
        return {(i, int(j)) for i, nb in enumerate(self.adjacency) for j in nb if i < j}


def build_knn_graph(points, K: int) -> KnnGraph:
    """Undirected union of every point's ``K`` nearest neighbours (self excluded)."""
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= K < n:
        raise ValueError(f"K={K} must lie in [1, {n - 1}]")
    search = NearestSearch(X)
    nbrs = search.k_nearest_many(X, K + 1)
    sets = [set() for _ in range(n)]
    for i, found in enumerate(nbrs):
        chosen = [j for j, _ in found if j != i][:K]
        for j in chosen:
            sets[i].add(j)
            sets[j].add(i)
    return KnnGraph([np.array(sorted(s), dtype=np.int64) for s in sets], K)


def expand_clusters(labels, graph: KnnGraph, rounds: int, n_clusters: int | None = None):
    """Grow each cluster ``rounds`` hops along the graph.

    Returns a list of ``(interior, border)`` sorted index arrays, one per cluster.
    """
    labels = np.asarray(labels)
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    k = int(labels.max()) + 1 if n_clusters is None else n_clusters
    out = []
    for c in range(k):
        interior = np.flatnonzero(labels == c)
        reached = set(interior.tolist())
        frontier = set(reached)
        for _ in range(rounds):
            nxt = set()
            for i in frontier:
                nxt.update(graph.adjacency[i].tolist())
            frontier = nxt - reached
            reached |= frontier
        border = np.array(sorted(reached - set(interior.tolist())), dtype=np.int64)
        out.append((interior, border))
    _warn_swallowed(out)
    return out


def _warn_swallowed(domains):
    for c, (_, border) in enumerate(domains):
        bset = set(border.tolist())
        for c2, (interior2, _) in enumerate(domains):
            if c2 != c and interior2.size and bset.issuperset(interior2.tolist()):
                warnings.warn(f"border of chart {c} contains the whole interior of chart {c2}")


# ---------------------------------------------------------------------------
# whitening


@dataclass
class Whitener:
    mean: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray

    def apply(self, z):
        return ((np.asarray(z, dtype=np.float64) - self.mean) @ self.rotation) / self.scales

    def invert(self, w):
        return (np.asarray(w, dtype=np.float64) * self.scales) @ self.rotation.T + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "rotation": self.rotation.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Whitener":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["rotation"], dtype=np.float64),
                   np.array(d["scales"], dtype=np.float64))


def fit_whitener(latent_points, rel_tol: float = 1e-10) -> Whitener:
    """Centre, rotate into the PCA basis (no truncation), divide by per-axis std."""
    Z = np.atleast_2d(np.asarray(latent_points, dtype=np.float64))
    if Z.shape[0] < 2:
        raise ValueError("need at least two points to whiten")
    mean = Z.mean(axis=0)
    _, s, vt = np.linalg.svd(Z - mean, full_matrices=False)
    n = Z.shape[1]
    if s.size < n or s[-1] <= rel_tol * max(s[0], 1e-300):
        raise DegenerateDirection("latent data have (near) zero variance along some direction")
    rotation = vt.T.copy()
    idx = np.argmax(np.abs(rotation), axis=0)
    signs = np.sign(rotation[idx, np.arange(n)])
    rotation *= signs
    scales = ((Z - mean) @ rotation).std(axis=0)
    return Whitener(mean, rotation, scales)


# ---------------------------------------------------------------------------
# charts


@dataclass
class ArchSpec:
    layer_dims: list[int]
    activations: list[str] | None = None

    def resolved_activations(self) -> list[str]:
        return list(self.activations) if self.activations else default_activations(len(self.layer_dims) - 1)

    def to_json(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activations": self.resolved_activations()}


@dataclass
class ChartFitConfig:
    """How to fit each chart's coordinate map."""

    latent_dim: int
    encoder: ArchSpec
    decoder: ArchSpec
    train: TrainConfig
    mode: str = "plain"  # or "pca_anchored"
    alpha: float = 1.0
    whiten: bool = False
    overlap_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("plain", "pca_anchored"):
            raise ValueError(f"unknown autoencoder mode {self.mode!r}")


@dataclass
class Chart:
    id: int
    interior: np.ndarray
    border: np.ndarray
    autoencoder: PlainAutoencoder | PcaAnchoredAutoencoder
    normalizer: Whitener | None = None
    loss: LossReport | None = None

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=np.int64)
        self.border = np.asarray(self.border, dtype=np.int64)
        if self.interior.size == 0:
            raise ValueError(f"chart {self.id} has an empty interior")
        if np.intersect1d(self.interior, self.border).size:
            raise ValueError(f"chart {self.id}: interior and border overlap")

    @property
    def members(self) -> np.ndarray:
        return np.union1d(self.interior, self.border)

    @property
    def latent_dim(self) -> int:
        return self.autoencoder.latent_dim

    def encode(self, x):
        h = self.autoencoder.encode(x)
        return self.normalizer.apply(h) if self.normalizer is not None else h

    def decode(self, z):
        h = self.normalizer.invert(z) if self.normalizer is not None else z
        return self.autoencoder.decode(h)

    def reconstruct(self, x):
        return self.decode(self.encode(x))


def fit_chart(dataset: Dataset | np.ndarray, chart_id: int, interior, border, cfg: ChartFitConfig,
              seed: int = 0, sample_weights=None) -> Chart:
    """Train one chart's autoencoder on its domain (interior plus border rows)."""
    points = dataset.points if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    interior = np.asarray(interior, dtype=np.int64)
    border = np.asarray(border, dtype=np.int64)
    members = np.union1d(interior, border)
    if members.size <= cfg.latent_dim:
        raise ValueError(f"chart {chart_id} has {members.size} points for a {cfg.latent_dim}-d latent space")
    X = points[members]
    tc = cfg.train
    if sample_weights is not None:
        tc = TrainConfig(tc.epochs, tc.lr_init, tc.decay_rate, tc.decay_every, tc.staircase,
                         np.asarray(sample_weights, dtype=np.float64), tc.seed)
    if cfg.mode == "plain":
        enc = glorot_init(cfg.encoder.layer_dims, cfg.encoder.resolved_activations(), seed)
        dec = glorot_init(cfg.decoder.layer_dims, cfg.decoder.resolved_activations(), seed + 1)
        ae, report = train_autoencoder(PlainAutoencoder(enc, dec), X, tc)
    else:
        ae, report = pca_anchored_autoencoder(
            X, cfg.latent_dim, cfg.alpha, tc,
            enc_dims=cfg.encoder.layer_dims, dec_dims=cfg.decoder.layer_dims,
            enc_activations=cfg.encoder.resolved_activations(),
            dec_activations=cfg.decoder.resolved_activations(), seed=seed)
    normalizer = fit_whitener(ae.encode(X)) if cfg.whiten else None
    return Chart(chart_id, interior, border, ae, normalizer, report)


def _fit_chart_job(args):
    return fit_chart(*args)


# ---------------------------------------------------------------------------
# atlas


@dataclass
class Atlas:
    charts: list[Chart]
    centroids: np.ndarray
    points: np.ndarray
    labels: np.ndarray
    fingerprint: str = ""
    graph_K: int = 0
    rounds: int = 0
    _local: dict = field(default_factory=dict, repr=False, compare=False)
    _ambient: NearestSearch | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.charts)

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def ambient_search(self) -> NearestSearch:
        if self._ambient is None:
            self._ambient = NearestSearch(self.points)
        return self._ambient

    def locate(self, X) -> np.ndarray:
        """Index of the nearest training point for every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape == self.points.shape and np.array_equal(X, self.points):
            return np.arange(X.shape[0])
        idx, _ = self.ambient_search().nearest_many(X)
        return idx

    def local(self, chart_id: int):
        """``(member indices, member local coords, search)`` for in-chart queries."""
        if chart_id not in self._local:
            chart = self.charts[chart_id]
            members = chart.members
            coords = np.atleast_2d(chart.encode(self.points[members]))
            self._local[chart_id] = (members, coords, NearestSearch(coords))
        return self._local[chart_id]

    def domain_mask(self, chart_id: int) -> np.ndarray:
        mask = np.zeros(self.points.shape[0], dtype=bool)
        mask[self.charts[chart_id].members] = True
        return mask

    def reconstruction_errors(self) -> np.ndarray:
        """Per-point squared error of reconstruction by each point's interior chart."""
        err = np.empty(self.points.shape[0])
        for chart in self.charts:
            X = self.points[chart.interior]
            err[chart.interior] = ((chart.reconstruct(X) - X) ** 2).sum(axis=1)
        return err

    def reconstruction_mse(self) -> float:
        return float(self.reconstruction_errors().mean() / self.ambient_dim)

    def chart_mse(self, chart_id: int) -> float:
        chart = self.charts[chart_id]
        X = self.points[chart.members]
        return float(((chart.reconstruct(X) - X) ** 2).mean())


def transition(atlas: Atlas, from_chart: int, to_chart: int, z):
    """Local coordinates in ``to_chart`` of the point with coordinates ``z`` in ``from_chart``.

    Only meaningful where the two domains overlap; elsewhere the result is
    whatever the target encoder makes of an off-domain point.
    """
    return atlas.charts[to_chart].encode(atlas.charts[from_chart].decode(z))


def overlap_weights(domains, n: int, weight: float) -> np.ndarray:
    counts = np.zeros(n, dtype=np.int64)
    for interior, border in domains:
        counts[interior] += 1
        counts[border] += 1
    return np.where(counts > 1, weight, 1.0)


def build_atlas(dataset: Dataset, n_charts: int, K: int, rounds: int, cfg: ChartFitConfig,
                seed: int = 0, jobs: int = 1, kmeans_iters: int = 300) -> Atlas:
    """Cluster, grow, and fit one chart per cluster.

    Chart ``c`` trains from seed ``seed + 1000 * (c + 1)`` so results do not
    depend on ``jobs``.
    """
    X = dataset.points
    labels, centroids = kmeans(X, n_charts, seed=seed, max_iters=kmeans_iters)
    graph = build_knn_graph(X, K)
    domains = expand_clusters(labels, graph, rounds, n_charts)
    w_all = overlap_weights(domains, X.shape[0], cfg.overlap_weight)
    jobs_args = []
    for c, (interior, border) in enumerate(domains):
        members = np.union1d(interior, border)
        w = None if cfg.overlap_weight == 1.0 else w_all[members]
        jobs_args.append((X, c, interior, border, cfg, seed + 1000 * (c + 1), w))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            charts = list(pool.map(_fit_chart_job, jobs_args))
    else:
        charts = [_fit_chart_job(a) for a in jobs_args]
    return Atlas(charts, centroids, X.copy(), labels, dataset.fingerprint(), K, rounds)


def check_atlas(atlas: Atlas) -> None:
    """Raise ``AssertionError`` unless interiors partition the data and domains cover it."""
    n = atlas.points.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    covered = np.zeros(n, dtype=bool)
    for chart in atlas.charts:
        counts[chart.interior] += 1
        covered[chart.members] = True
    assert np.all(counts == 1), "some point is interior to zero or several charts"
    assert covered.all(), "some point lies in no coordinate domain"
    for chart in atlas.charts:
        assert np.all(atlas.labels[chart.interior] == chart.id)


# ---------------------------------------------------------------------------
# serialisation


def _ae_to_json(ae) -> dict:
    if isinstance(ae, PlainAutoencoder):
        return {"kind": "plain"}
    return {"kind": "pca_anchored", "alpha": ae.alpha, "mean": ae.mean.tolist(), "basis": ae.basis.tolist()}


def save_atlas(atlas: Atlas, directory: str | Path) -> Path:
    """Manifest (JSON), training points (CSV) and one text file per network."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    charts = []
    for chart in atlas.charts:
        nets = {}
        for role, net in chart.autoencoder.networks().items():
            name = f"chart{chart.id}_{role}.mlp"
            (d / name).write_text(mlp_to_text(net))
            nets[role] = name
        charts.append({
            "id": chart.id,
            "interior": chart.interior.tolist(),
            "border": chart.border.tolist(),
            "autoencoder": _ae_to_json(chart.autoencoder),
            "networks": nets,
            "normalizer": chart.normalizer.to_json() if chart.normalizer is not None else None,
            "final_loss": chart.loss.final if chart.loss is not None else None,
        })
    with open(d / "points.csv", "w") as f:
        for row in atlas.points:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    manifest = {
        "format": ATLAS_FORMAT,
        "version": ATLAS_FORMAT_VERSION,
        "dataset_sha256": atlas.fingerprint,
        "K": atlas.graph_K,
        "rounds": atlas.rounds,
        "centroids": atlas.centroids.tolist(),
        "labels": atlas.labels.tolist(),
        "charts": charts,
    }
    (d / "atlas.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_atlas(directory: str | Path) -> Atlas:
    d = Path(directory)
    manifest = json.loads((d / "atlas.json").read_text())
    if manifest.get("format") != ATLAS_FORMAT or manifest.get("version") != ATLAS_FORMAT_VERSION:
        raise ValueError(f"{d}: unsupported atlas manifest")
    points = np.loadtxt(d / "points.csv", delimiter=",", ndmin=2)
    charts = []
    for c in manifest["charts"]:
        nets = {role: mlp_from_text((d / name).read_text()) for role, name in c["networks"].items()}
        spec = c["autoencoder"]
        if spec["kind"] == "plain":
            ae = PlainAutoencoder(nets["encoder"], nets["decoder"])
        else:
            ae = PcaAnchoredAutoencoder(np.array(spec["mean"]), np.array(spec["basis"]),
                                        nets["enc_correction"], nets["dec_correction"], spec["alpha"])
        norm = Whitener.from_json(c["normalizer"]) if c["normalizer"] else None
        loss = LossReport([], c["final_loss"]) if c["final_loss"] is not None else None
        charts.append(Chart(c["id"], np.array(c["interior"], dtype=np.int64),
                            np.array(c["border"], dtype=np.int64), ae, norm, loss))
    return Atlas(charts, np.array(manifest["centroids"], dtype=np.float64), points,
                 np.array(manifest["labels"], dtype=np.int64), manifest["dataset_sha256"],
                 manifest["K"], manifest["rounds"])
