"""nve: dual-stream ensemble CNNs for two-class volumetric classification."""

__version__ = "0.1.0"

from .tensor import Tensor
from .adam import Adam
from .ensemble import build_preset, predict
from .experiment import (
    ExperimentConfig,
    ResultRecord,
    emit_table,
    evaluate,
    pretrain_proxy,
    run_grid,
    train,
)

__all__ = [
    "Tensor", "Adam", "build_preset", "predict", "ExperimentConfig",
    "ResultRecord", "emit_table", "evaluate", "pretrain_proxy", "run_grid",
    "train", "__version__",
]
