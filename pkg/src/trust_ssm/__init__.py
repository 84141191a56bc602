"""Test-time adaptation of a micro vision state-space model by traversal-permutation ensembling."""
from .adaptation import (AdaptationConfig, EntropyRanking, RunResult, TestTimeAdapter, average_weights,
                         rank_permutations, run_stream, select_top_k)
from .autodiff import Tensor, finite_difference_check, no_grad
from .bench import ExperimentConfig, RunReport, SourceConfig, StreamConfig, run_experiment, sweep
from .checkpoint import Checkpoint, ModelConfig
from .model import MicroVMamba, MicroVMambaClassifier
from .ss2d import IDENTITY, Permutation, all_permutations

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "Checkpoint", "EntropyRanking", "ExperimentConfig", "IDENTITY", "MicroVMamba",
    "MicroVMambaClassifier", "ModelConfig", "Permutation", "RunReport", "RunResult", "SourceConfig",
    "StreamConfig", "Tensor", "TestTimeAdapter", "all_permutations", "average_weights", "finite_difference_check",
    "no_grad", "rank_permutations", "run_experiment", "run_stream", "select_top_k", "sweep",
]
