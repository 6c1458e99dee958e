"""Split federated learning with resistance to model-inversion attacks, on a small numpy autodiff engine."""
from .attack import AttackConfig, AttackReport, evaluate_resistance, reconstruct, train_inversion_model
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import Dataset, load_idx_dataset, partition_clients, synth_dataset, train_val_split
from .models import BottleneckConfig, SplitModel, build_inversion_model, build_split_classifier, insert_bottleneck
from .sfl import SFLConfig, federated_average, run_sfl

__version__ = "0.1.0"
