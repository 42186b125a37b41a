"""Chart-atlas models of dynamical systems: learn overlapping local charts and per-chart latent maps."""

from .atlas import Atlas, Chart, build_atlas, transition
from .dataset import Dataset, load_dataset, save_dataset
from .dynamics import AtlasModel, rollout
from .experiment import ExperimentConfig, generate_data, load_config, train_model
from .neuralnet import Mlp, TrainConfig, glorot_init, train

__version__ = "0.1.0"
