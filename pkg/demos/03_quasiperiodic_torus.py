"""Quasiperiodic orbit on a torus: angular speed errors and a lock check."""

import sys

from candyman import evaluation as ev
from candyman.dynamics import rollout
from candyman.experiment import generate_data, load_config, train_model
from candyman.systems import gen_torus_quasiperiodic

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 50000
cfg = load_config("s3")
data = generate_data(cfg)
model = train_model(cfg, data, seed=seed)
X = rollout(model, data["train"].points[0], steps).ambient
try:
    pol, tor = ev.phase_speed_error(X, gen_torus_quasiperiodic(steps).points)
    print(f"speed errors: poloidal {pol:+.2%}, toroidal {tor:+.2%}")
except ValueError as e:
    print("rollout left the torus:", e)
print("recurrence:", ev.estimate_period(X, discard=min(1000, steps // 10)))
