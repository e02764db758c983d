from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data import DatasetIndex, Record, ingest, write_synthetic_dataset
from .evaluate import evaluate
from .train import TrainingDiverged, train

__all__ = [
    "Checkpoint",
    "DatasetIndex",
    "Record",
    "RunConfig",
    "TrainingDiverged",
    "evaluate",
    "ingest",
    "load_config",
    "train",
    "write_synthetic_dataset",
]
