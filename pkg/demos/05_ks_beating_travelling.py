"""Beating travelling wave: learn shape dynamics and phase speed separately."""

import sys

import numpy as np

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, train_model
from candyman.systems import shape_phase_series

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = load_config("s5")
dt = cfg.system_params["sample_spacing"]
data = generate_data(cfg)
model = train_model(cfg, data, seed=seed)
traj = rollout(model, data["train"].points[0], 3000)
beat = ev.estimate_period(shape_phase_series(traj.ambient).shape, dt, units="time", discard=100)
travel = ev.travelling_period(np.array(traj.phases, dtype=np.float64), dt)
print("beating period:", beat)
print(f"travelling period {travel.period:.2f} time units")
