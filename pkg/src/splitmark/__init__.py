"""Split federated learning with dual-side ownership watermarking."""

from .attacks import AttackConfig, finetune, neural_cleanse, prune, quantize, reverse_trigger, unlearn
from .data import DatasetSpec, LabeledDataset, TriggerPattern, apply_trigger, gen_synthetic, gen_trigger, poison
from .errors import SplitmarkError
from .harness import ExperimentConfig, load_config, run_experiment
from .nn import Model
from .sfl import SplitModelPair, TrainConfig, fedavg, split_model, train
from .stats import mann_whitney_u
from .watermark import FeatureWatermark, gen_feature_wm, verify_bottom, verify_top

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "DatasetSpec", "ExperimentConfig", "FeatureWatermark", "LabeledDataset", "Model",
    "SplitModelPair", "SplitmarkError", "TrainConfig", "TriggerPattern", "apply_trigger", "fedavg",
    "finetune", "gen_feature_wm", "gen_synthetic", "gen_trigger", "load_config", "mann_whitney_u",
    "neural_cleanse", "poison", "prune", "quantize", "reverse_trigger", "run_experiment",
    "split_model", "train", "unlearn", "verify_bottom", "verify_top",
]
