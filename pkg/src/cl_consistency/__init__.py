"""Experience replay with consistency regularization for continual learning."""

from .autodiff import Tensor, check_gradients, l2_normalize, softmax
from .buffer import BufferEntry, ReservoirBuffer
from .data import Dataset, Example, Task, TaskStream
from .metrics import MetricsReport, ece, relative_gains
from .model import MlpClassifier, cross_entropy, forward, init_mlp
from .regularizers import RegularizerSpec, make_regularizer
from .trainer import TrainConfig, TrainLog, train_continual, train_joint

__version__ = "0.1.0"

__all__ = [
    "BufferEntry", "Dataset", "Example", "MetricsReport", "MlpClassifier", "RegularizerSpec", "ReservoirBuffer",
    "Task", "TaskStream", "Tensor", "TrainConfig", "TrainLog", "check_gradients", "cross_entropy", "ece",
    "forward", "init_mlp", "l2_normalize", "make_regularizer", "relative_gains", "softmax", "train_continual",
    "train_joint",
]
