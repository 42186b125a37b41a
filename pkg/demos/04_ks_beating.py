"""Beating standing wave of the KS equation with 1-D charts, compared to the true evolution."""

import numpy as np

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, reference_run, train_model

cfg = load_config("s4")
data = generate_data(cfg)
model = train_model(cfg, data)
u0 = data["train"].points[0]
X = rollout(model, u0, cfg.rollout_steps).ambient
ref = reference_run(cfg, u0, cfg.rollout_steps)
print(f"rollout MSE against the solver {((X - ref) ** 2).mean():.2e}")
print("beating period:", ev.estimate_period(X, cfg.system_params["sample_spacing"], units="time"))
