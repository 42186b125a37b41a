"""Bursting KS dynamics: six 3-D charts against one wide 6-D chart, then a long rollout."""

import sys

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, train_model

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 1
cfg = load_config("s6")
dt = cfg.system_params["sample_spacing"]
data = generate_data(cfg)

sweep = ev.mse_sweep(data["train"], [(6, 3, "same"), (1, 6, "matched")], trials, cfg.chart,
                     K=cfg.K, rounds=cfg.rounds, reference_charts=cfg.n_charts, seed=cfg.seed)
print(sweep.summary())

model = train_model(cfg, data)
traj = rollout(model, data["train"].points[0], cfg.rollout_steps)
print("bursting verdict:", ev.classify_bursting_behavior(traj.ambient, dt=dt))
print(f"{len(ev.dwell_times(traj.ambient, dt))} dwell intervals")
