"""Per-chart latent dynamics and the chart-switching global rollout."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas, load_atlas, save_atlas, transition
from .dataset import Dataset
from .neuralnet import LossReport, Mlp, TrainConfig, forward, glorot_init, mlp_from_text, mlp_to_text, train
from .systems import shape_phase_reconstruct, shape_phase_split

MODEL_FORMAT = "candyman-model"
MODEL_FORMAT_VERSION = 1


class ChartHasNoDynamicsData(ValueError):
    pass


class RolloutDiverged(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"rollout produced a non-finite state at step {step}")


@dataclass
class ChartDynamics:
    chart_id: int
    f: Mlp
    phase_net: Mlp | None = None
    loss: LossReport | None = None
    phase_loss: LossReport | None = None


@dataclass
class AtlasModel:
    """An atlas plus one dynamics map per chart.

    With ``shape_phase`` set, the atlas lives on phase-aligned shapes and each
    chart also carries a network for the per-step phase increment.
    """

    atlas: Atlas
    dynamics: list[ChartDynamics]
    shape_phase: bool = False
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# training


@dataclass
class ChartPairs:
    chart_id: int
    index: np.ndarray  # rows of the source dataset
    z0: np.ndarray
    z1: np.ndarray


def pair_owners(atlas: Atlas, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Nearest atlas training point of each pair's start and end state."""
    return atlas.locate(dataset.points), atlas.locate(dataset.successors)


def assemble_chart_pairs(atlas: Atlas, chart_id: int, dataset: Dataset, owners=None) -> ChartPairs:
    """Pairs whose both states fall in the chart's domain, in its local coordinates.

    A state belongs to a domain when its nearest atlas training point does,
    which for the atlas' own data is the point itself.
    """
    own0, own1 = owners if owners is not None else pair_owners(atlas, dataset)
    mask = atlas.domain_mask(chart_id)
    keep = np.flatnonzero(mask[own0] & mask[own1])
    if keep.size == 0:
        raise ChartHasNoDynamicsData(f"chart {chart_id} contains no complete pair")
    chart = atlas.charts[chart_id]
    z0 = np.atleast_2d(chart.encode(dataset.points[keep]))
    z1 = np.atleast_2d(chart.encode(dataset.successors[keep]))
    return ChartPairs(chart_id, keep, z0, z1)


def fit_dynamics(chart_id: int, pairs: ChartPairs, arch, config: TrainConfig, seed: int = 0) -> ChartDynamics:
    """Regress the next local state on the current one."""
    f = glorot_init(arch.layer_dims, arch.resolved_activations(), seed)
    if f.in_dim != pairs.z0.shape[1] or f.out_dim != pairs.z1.shape[1]:
        raise ValueError("dynamics network shape does not match the chart's latent dimension")
    f, report = train(f, pairs.z0, pairs.z1, config)
    return ChartDynamics(chart_id, f, loss=report)


def fit_phase_dynamics(shape_coords, phase_deltas, arch, config: TrainConfig, seed: int = 0):
    """Network giving the phase increment over one step from local shape coordinates.

    Targets are standardised for training and the affine map is folded back
    into the output layer, so the returned network predicts raw increments.
    """
    Z = np.atleast_2d(np.asarray(shape_coords, dtype=np.float64))
    y = np.asarray(phase_deltas, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != Z.shape[0]:
        raise ValueError("shape coordinates and phase increments are not aligned")
    mu = float(y.mean())
    sigma = float(y.std())
    net = glorot_init(arch.layer_dims, arch.resolved_activations(), seed)
    if net.out_dim != 1:
        raise ValueError("phase network must have a scalar output")
    # constant targets: folding with sigma = 0 leaves exactly the constant mu
    net, report = train(net, Z, (y - mu) / (sigma if sigma > 1e-300 else 1.0), config)
    net.weights[-1] = net.weights[-1] * sigma
    net.biases[-1] = net.biases[-1] * sigma + mu
    report = LossReport([h * sigma**2 for h in report.history], report.final * sigma**2)
    return net, report


def wrapped_phase_delta(phase0, phase1) -> np.ndarray:
    return np.angle(np.exp(1j * (np.asarray(phase1) - np.asarray(phase0))))


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutState:
    chart_id: int
    z: np.ndarray
    phase: float | None = None
    step: int = 0


@dataclass
class Trajectory:
    steps: list[int] = field(default_factory=list)
    chart_ids: list[int] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    phases: list[float | None] = field(default_factory=list)
    events: list[tuple[int, int, int]] = field(default_factory=list)  # (step, from, to)

    def __len__(self) -> int:
        return len(self.steps)

    def record(self, state: RolloutState, ambient: np.ndarray):
        self.steps.append(state.step)
        self.chart_ids.append(state.chart_id)
        self.z.append(np.array(state.z, copy=True))
        self.states.append(ambient)
        self.phases.append(state.phase)

    @property
    def ambient(self) -> np.ndarray:
        return np.array(self.states)

    @property
    def charts(self) -> np.ndarray:
        return np.array(self.chart_ids)

    def to_csv(self, path):
        """Columns: step, chart_id, z_0..z_{n-1}, phase, x_0..x_{m-1}."""
        n = max(len(z) for z in self.z) if self.z else 0
        m = len(self.states[0]) if self.states else 0
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "chart_id"] + [f"z_{i}" for i in range(n)] + ["phase"]
                       + [f"x_{i}" for i in range(m)])
            for s, c, z, ph, x in zip(self.steps, self.chart_ids, self.z, self.phases, self.states):
                zs = [repr(float(v)) for v in z] + [""] * (n - len(z))
                w.writerow([s, c] + zs + ["" if ph is None else repr(float(ph))]
                           + [repr(float(v)) for v in x])


def read_trajectory_csv(path) -> Trajectory:
    traj = Trajectory()
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        zcols = [i for i, h in enumerate(header) if h.startswith("z_")]
        xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
        pcol = header.index("phase")
        for row in r:
            traj.steps.append(int(row[0]))
            traj.chart_ids.append(int(row[1]))
            traj.z.append(np.array([float(row[i]) for i in zcols if row[i] != ""]))
            traj.phases.append(float(row[pcol]) if row[pcol] else None)
            traj.states.append(np.array([float(row[i]) for i in xcols]))
    return traj


def assign_initial(atlas: Atlas, p, strategy: str = "nearest_point") -> tuple[int, np.ndarray]:
    """Chart whose interior owns ``p`` and the local coordinates of ``p`` there.

    This is the only search carried out in the ambient space.
    """
    p = np.asarray(p, dtype=np.float64)
    if strategy == "nearest_point":
        j, _ = atlas.ambient_search().nearest(p)
        chart_id = int(atlas.labels[j])
    elif strategy == "nearest_centroid":
        d2 = ((atlas.centroids - p) ** 2).sum(axis=1)
        chart_id = int(np.argmin(d2))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return chart_id, np.asarray(atlas.charts[chart_id].encode(p), dtype=np.float64)


def step(model: AtlasModel, state: RolloutState) -> tuple[RolloutState, tuple[int, int] | None]:
    """Advance one step and switch charts if the new state lands on a border point."""
    atlas = model.atlas
    a = state.chart_id
    dyn = model.dynamics[a]
    z = forward(dyn.f, state.z)
    phase = state.phase
    if phase is not None and dyn.phase_net is not None:
        phase = phase + float(forward(dyn.phase_net, state.z)[0])
    members, _, search = atlas.local(a)
    j, _ = search.nearest(z)
    owner = int(atlas.labels[members[j]])
    event = None
    if owner != a:
        z = np.asarray(transition(atlas, a, owner, z), dtype=np.float64)
        event = (a, owner)
        a = owner
    if not np.all(np.isfinite(z)) or (phase is not None and not math.isfinite(phase)):
        raise RolloutDiverged(state.step + 1)
    return RolloutState(a, z, phase, state.step + 1), event


def decode_state(model: AtlasModel, state: RolloutState) -> np.ndarray:
    x = model.atlas.charts[state.chart_id].decode(state.z)
    if model.shape_phase and state.phase is not None:
        x = shape_phase_reconstruct(x, state.phase)
    return np.asarray(x, dtype=np.float64)


def initial_state(model: AtlasModel, p0, strategy: str = "nearest_point") -> RolloutState:
    p0 = np.asarray(p0, dtype=np.float64)
    phase = None
    if model.shape_phase:
        sp = shape_phase_split(p0)
        p0, phase = sp.shape, float(sp.phase)
    chart_id, z = assign_initial(model.atlas, p0, strategy)
    return RolloutState(chart_id, z, phase, 0)


def rollout(model: AtlasModel, p0, n_steps: int, strategy: str = "nearest_point") -> Trajectory:
    """Assign ``p0`` to a chart and take ``n_steps`` steps, decoding every state."""
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    state = initial_state(model, p0, strategy)
    traj = Trajectory()
    traj.record(state, decode_state(model, state))
    for _ in range(n_steps):
        state, event = step(model, state)
        if event is not None:
            traj.events.append((state.step, event[0], event[1]))
        traj.record(state, decode_state(model, state))
    return traj


# ---------------------------------------------------------------------------
# model assembly and I/O


def fit_model_dynamics(atlas: Atlas, dataset: Dataset, arch, config: TrainConfig, seed: int = 0,
                       phase_arch=None, phase_config: TrainConfig | None = None,
                       phases: tuple[np.ndarray, np.ndarray] | None = None) -> list[ChartDynamics]:
    """Train every chart's dynamics (and phase network when ``phases`` is given).

    ``phases`` holds the phase of each pair's start and end state.
    """
    owners = pair_owners(atlas, dataset)
    out = []
    for c in range(len(atlas)):
        pairs = assemble_chart_pairs(atlas, c, dataset, owners)
        dyn = fit_dynamics(c, pairs, arch, config, seed + 1000 * (c + 1) + 7)
        if phases is not None:
            delta = wrapped_phase_delta(phases[0][pairs.index], phases[1][pairs.index])
            dyn.phase_net, dyn.phase_loss = fit_phase_dynamics(
                pairs.z0, delta, phase_arch, phase_config or config, seed + 1000 * (c + 1) + 13)
        out.append(dyn)
    return out


def save_model(model: AtlasModel, directory) -> Path:
    d = Path(directory)
    save_atlas(model.atlas, d)
    dyn = []
    for cd in model.dynamics:
        entry = {"chart_id": cd.chart_id, "f": f"chart{cd.chart_id}_dynamics.mlp",
                 "final_loss": cd.loss.final if cd.loss else None}
        (d / entry["f"]).write_text(mlp_to_text(cd.f))
        if cd.phase_net is not None:
            entry["phase_net"] = f"chart{cd.chart_id}_phase.mlp"
            entry["phase_final_loss"] = cd.phase_loss.final if cd.phase_loss else None
            (d / entry["phase_net"]).write_text(mlp_to_text(cd.phase_net))
        dyn.append(entry)
    manifest = {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION,
                "shape_phase": model.shape_phase, "dynamics": dyn, "meta": model.meta}
    (d / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_model(directory) -> AtlasModel:
    d = Path(directory)
    manifest = json.loads((d / "model.json").read_text())
    if manifest.get("format") != MODEL_FORMAT or manifest.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"{d}: unsupported model manifest")
    atlas = load_atlas(d)
    dyn = []
    for e in manifest["dynamics"]:
        f = mlp_from_text((d / e["f"]).read_text())
        ph = mlp_from_text((d / e["phase_net"]).read_text()) if e.get("phase_net") else None
        dyn.append(ChartDynamics(e["chart_id"], f, ph))
    return AtlasModel(atlas, dyn, manifest["shape_phase"], manifest.get("meta", {}))
