"""Experiment configs, built-in presets, and the generate/train pipeline behind the CLI."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .atlas import ArchSpec, Atlas, ChartFitConfig, build_atlas
from .dataset import Dataset
from .dynamics import AtlasModel, fit_model_dynamics
from .neuralnet import TrainConfig
from .systems import (KsConfig, gen_bursting_dynamics_dataset, gen_circle, gen_ks_dataset,
                      gen_torus_periodic, gen_torus_quasiperiodic, ks_simulate, shape_phase_split)

SYSTEMS = ("circle", "torus_periodic", "torus_quasiperiodic",
           "ks_beating", "ks_beating_travelling", "ks_bursting")
PRESETS = ("s1", "s2", "s3", "s4", "s5", "s6")

_KS_PARAMS = {"nu", "sample_spacing", "n_samples", "transient_time", "n_modes", "solver_dt"}
SYSTEM_PARAMS = {
    "circle": {"n"},
    "torus_periodic": {"n"},
    "torus_quasiperiodic": {"n"},
    "ks_beating": _KS_PARAMS,
    "ks_beating_travelling": _KS_PARAMS,
    "ks_bursting": _KS_PARAMS | {"dynamics_stride", "dynamics_run_time", "dynamics_keep_time",
                                 "perturbation_amplitude"},
}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment config."""


def _check_keys(d, required: set, optional: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - required - optional
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _arch(d, where) -> ArchSpec:
    _check_keys(d, {"layer_dims"}, {"activations"}, where)
    dims = d["layer_dims"]
    if not (isinstance(dims, list) and len(dims) >= 2 and all(isinstance(x, int) and x >= 1 for x in dims)):
        raise ConfigError(f"{where}.layer_dims: need at least two positive integers")
    acts = d.get("activations")
    if acts is not None and len(acts) != len(dims) - 1:
        raise ConfigError(f"{where}.activations: need one tag per layer gap")
    return ArchSpec(list(dims), list(acts) if acts is not None else None)


def _train(d, where) -> TrainConfig:
    _check_keys(d, {"epochs"}, {"lr_init", "decay_rate", "decay_every"}, where)
    try:
        return TrainConfig(epochs=int(d["epochs"]), lr_init=float(d.get("lr_init", 0.01)),
                           decay_rate=float(d.get("decay_rate", 1.0)), decay_every=int(d.get("decay_every", 200)))
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass
class NetConfig:
    arch: ArchSpec
    train: TrainConfig


def _net(d, where) -> NetConfig:
    _check_keys(d, {"arch", "train"}, set(), where)
    return NetConfig(_arch(d["arch"], where + ".arch"), _train(d["train"], where + ".train"))


@dataclass
class ExperimentConfig:
    """One experiment: the system, the atlas recipe, and every network's shape and schedule.

    ``raw`` keeps the validated source document so manifests can echo it.
    """

    name: str
    system: str
    system_params: dict
    n_charts: int
    K: int
    rounds: int
    latent_dim: int
    chart: ChartFitConfig
    dynamics: NetConfig
    phase: NetConfig | None
    shape_phase: bool
    seed: int
    rollout_steps: int
    rollout_init_row: int
    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, {"system", "n_charts", "K", "rounds", "latent_dim", "autoencoder", "dynamics"},
                    {"name", "description", "system_params", "seed", "shape_phase", "phase", "rollout"},
                    "config")
        system = d["system"]
        if system not in SYSTEMS:
            raise ConfigError(f"config.system: unknown system {system!r}")
        params = dict(d.get("system_params") or {})
        bad = set(params) - SYSTEM_PARAMS[system]
        if bad:
            raise ConfigError(f"config.system_params: unknown keys {sorted(bad)} for {system}")
        a = d["autoencoder"]
        _check_keys(a, {"encoder", "decoder", "train"}, {"mode", "alpha", "whiten", "overlap_weight"},
                    "config.autoencoder")
        latent = int(d["latent_dim"])
        enc, dec = _arch(a["encoder"], "config.autoencoder.encoder"), _arch(a["decoder"], "config.autoencoder.decoder")
        if enc.layer_dims[-1] != latent or dec.layer_dims[0] != latent:
            raise ConfigError("config: encoder output and decoder input must equal latent_dim")
        if enc.layer_dims[0] != dec.layer_dims[-1]:
            raise ConfigError("config: encoder input and decoder output dimensions differ")
        try:
            chart = ChartFitConfig(latent, enc, dec, _train(a["train"], "config.autoencoder.train"),
                                   mode=a.get("mode", "plain"), alpha=float(a.get("alpha", 1.0)),
                                   whiten=bool(a.get("whiten", False)),
                                   overlap_weight=float(a.get("overlap_weight", 1.0)))
        except ValueError as e:
            raise ConfigError(f"config.autoencoder: {e}") from e
        dyn = _net(d["dynamics"], "config.dynamics")
        if dyn.arch.layer_dims[0] != latent or dyn.arch.layer_dims[-1] != latent:
            raise ConfigError("config.dynamics: network must map latent_dim to latent_dim")
        shape_phase = bool(d.get("shape_phase", False))
        phase = _net(d["phase"], "config.phase") if d.get("phase") is not None else None
        if shape_phase and phase is None:
            raise ConfigError("config: shape_phase needs a phase network")
        if phase is not None and (phase.arch.layer_dims[0] != latent or phase.arch.layer_dims[-1] != 1):
            raise ConfigError("config.phase: network must map latent_dim to 1")
        ro = d.get("rollout") or {}
        _check_keys(ro, set(), {"steps", "init_row"}, "config.rollout")
        for key in ("n_charts", "K", "rounds"):
            if int(d[key]) < (0 if key == "rounds" else 1):
                raise ConfigError(f"config.{key}: out of range")
        return cls(name=str(d.get("name", "custom")), system=system, system_params=params,
                   n_charts=int(d["n_charts"]), K=int(d["K"]), rounds=int(d["rounds"]), latent_dim=latent,
                   chart=chart, dynamics=dyn, phase=phase, shape_phase=shape_phase,
                   seed=int(d.get("seed", 0)), rollout_steps=int(ro.get("steps", 1000)),
                   rollout_init_row=int(ro.get("init_row", 0)), raw=copy.deepcopy(d))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """New config with top-level fields replaced (``n_charts``, ``seed``, ...)."""
        raw = copy.deepcopy(self.raw)
        raw.update(kw)
        return ExperimentConfig.from_dict(raw)

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)


def preset_names() -> list[str]:
    return list(PRESETS)


def load_config(name_or_path) -> ExperimentConfig:
    """A preset name (``s1``..``s6``) or a path to a JSON config file."""
    s = str(name_or_path)
    if s in PRESETS:
        text = resources.files("candyman").joinpath("presets", f"{s}.json").read_text()
    else:
        p = Path(s)
        if not p.is_file():
            raise ConfigError(f"no preset or config file named {s!r}")
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{s}: {e}") from e
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# data


def _ks_kwargs(params: dict) -> dict:
    kw = {k: params[k] for k in ("nu", "sample_spacing", "n_samples", "transient_time", "n_modes") if k in params}
    if "solver_dt" in params:
        kw["dt"] = params["solver_dt"]
    return kw


def generate_data(cfg: ExperimentConfig, seed: int | None = None) -> dict[str, Dataset]:
    """``{"train": ...}`` plus ``"dynamics"`` for systems that learn dynamics from separate runs."""
    seed = cfg.seed if seed is None else seed
    p = cfg.system_params
    if cfg.system == "circle":
        return {"train": gen_circle(p.get("n", 40))}
    if cfg.system == "torus_periodic":
        return {"train": gen_torus_periodic(p.get("n", 100))}
    if cfg.system == "torus_quasiperiodic":
        return {"train": gen_torus_quasiperiodic(p.get("n", 1000))}
    train = gen_ks_dataset(**_ks_kwargs(p))
    out = {"train": train}
    if cfg.system == "ks_bursting":
        out["dynamics"] = gen_bursting_dynamics_dataset(
            train, seed, nu=p["nu"], stride=p.get("dynamics_stride", 3),
            run_time=p.get("dynamics_run_time", 1.5), keep_time=p.get("dynamics_keep_time", 1.0),
            sample_spacing=p.get("sample_spacing", 0.05), dt=p.get("solver_dt", 1e-4),
            amplitude=p.get("perturbation_amplitude", 0.05))
    return out


def shape_dataset(ds: Dataset) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Phase-aligned shapes of a field dataset and the phases of each pair's two states."""
    a, b = shape_phase_split(ds.points), shape_phase_split(ds.successors)
    meta = dict(ds.meta, shape_phase=True)
    return Dataset(a.shape, b.shape, ds.dt, meta), np.asarray(a.phase), np.asarray(b.phase)


def reference_run(cfg: ExperimentConfig, u0, n_samples: int) -> np.ndarray:
    """True KS evolution from ``u0`` sampled like the dataset: ``n_samples + 1`` fields."""
    p = cfg.system_params
    dt = p.get("solver_dt", 1e-4)
    every = int(round(p["sample_spacing"] / dt))
    return ks_simulate(KsConfig(nu=p["nu"], n_modes=len(u0), dt=dt), np.asarray(u0, dtype=np.float64),
                       n_samples * every, every)


# ---------------------------------------------------------------------------
# training


def train_atlas(cfg: ExperimentConfig, data: dict[str, Dataset], seed: int | None = None,
                jobs: int = 1) -> Atlas:
    seed = cfg.seed if seed is None else seed
    ds = data["train"]
    if cfg.shape_phase:
        ds = shape_dataset(ds)[0]
    return build_atlas(ds, cfg.n_charts, cfg.K, cfg.rounds, cfg.chart, seed=seed, jobs=jobs)


def train_model(cfg: ExperimentConfig, data: dict[str, Dataset], seed: int | None = None,
                jobs: int = 1) -> AtlasModel:
    """Atlas, per-chart dynamics and (for shape/phase runs) phase networks.

    The model's ``meta`` records the config, seed, dataset checksums, and
    every network's final loss; it carries no timestamps so reruns match.
    """
    seed = cfg.seed if seed is None else seed
    train_ds = data["train"]
    phases = None
    if cfg.shape_phase:
        train_ds, ph0, ph1 = shape_dataset(train_ds)
        phases = (ph0, ph1)
    atlas = build_atlas(train_ds, cfg.n_charts, cfg.K, cfg.rounds, cfg.chart, seed=seed, jobs=jobs)
    dyn_ds = data.get("dynamics") or train_ds
    if cfg.shape_phase and "dynamics" in data:
        raise ConfigError("shape/phase runs learn dynamics from the training series only")
    dynamics = fit_model_dynamics(atlas, dyn_ds, cfg.dynamics.arch, cfg.dynamics.train, seed=seed,
                                  phase_arch=cfg.phase.arch if cfg.phase else None,
                                  phase_config=cfg.phase.train if cfg.phase else None, phases=phases)
    meta = {
        "config": cfg.to_json(),
        "seed": seed,
        "datasets": {k: v.fingerprint() for k, v in sorted(data.items())},
        "reconstruction_mse": atlas.reconstruction_mse(),
        "charts": [{"id": c.id, "n_interior": int(c.interior.size), "n_border": int(c.border.size),
                    "autoencoder_final_loss": c.loss.final if c.loss else None,
                    "dynamics_final_loss": d.loss.final if d.loss else None,
                    "phase_final_loss": d.phase_loss.final if d.phase_loss else None}
                   for c, d in zip(atlas.charts, dynamics)],
    }
    return AtlasModel(atlas, dynamics, shape_phase=cfg.shape_phase, meta=meta)
