"""Periodic orbit on a torus, one latent dimension per chart."""

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, train_model
from candyman.systems import torus_angles

cfg = load_config("s2")
data = generate_data(cfg)
model = train_model(cfg, data)
X = rollout(model, data["train"].points[0], 1000).ambient
_, _, dist = torus_angles(X, tol=float("inf"))
print(f"max distance to the surface {dist.max():.4f}")
print("period:", ev.estimate_period(X))
