"""Three charts on the unit circle; roll out 25 cycles and check period and transitions."""

import numpy as np

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, train_model

cfg = load_config("s1")
data = generate_data(cfg)
model = train_model(cfg, data)
print(f"reconstruction MSE {model.meta['reconstruction_mse']:.2e}")

traj = rollout(model, data["train"].points[0], 1000)
X = traj.ambient
print(f"max radius error {np.abs(np.linalg.norm(X, axis=1) - 1).max():.4f}")
print("period:", ev.estimate_period(X))
rep = ev.transition_smoothness(X, traj.charts)
print(f"{len(rep.jumps)} chart transitions, largest jump ratio {rep.max_first_ratio():.2f}")
