"""Knowledge-graph embedding with stacked residual blocks and filtered-ranking evaluation."""

from .data import Dataset, DataError, load_tsv
from .evaluation import EvalReport, evaluate, emit_report, filtered_rank
from .layers import identity_dropout_total_drop_prob
from .model import DeepEModel, DropoutSpec, ModelConfig
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train_loop

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "DataError",
    "Dataset",
    "DeepEModel",
    "DropoutSpec",
    "EvalReport",
    "ModelConfig",
    "TrainConfig",
    "TrainingDiverged",
    "__version__",
    "emit_report",
    "evaluate",
    "filtered_rank",
    "identity_dropout_total_drop_prob",
    "load_checkpoint",
    "load_tsv",
    "save_checkpoint",
    "train_loop",
]
