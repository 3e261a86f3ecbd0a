"""Coarse-fine two-stream temporal detection with learnable grid pooling, built on a numpy autodiff core."""

from .autodiff import Parameter, Tensor, TapeError, backward
from .backbone import ClipTooLong, ConfigError, Model, NetworkConfig, build, forward
from .config import RunConfig
from .dataio import DetectionClip, SynthSpec, generate, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .gridpool import GridError, GridSpec, compute_grid, fixed_pool, grid_pool, grid_sample, grid_unpool
from .losseval import EvalReport, average_precision, detection_loss, evaluate
from .train import NonFiniteLoss, OptimConfig, fit, overfit

__all__ = [
    "Parameter", "Tensor", "TapeError", "backward",
    "ClipTooLong", "ConfigError", "Model", "NetworkConfig", "build", "forward",
    "RunConfig",
    "DetectionClip", "SynthSpec", "generate", "load_checkpoint", "load_dataset", "save_checkpoint", "save_dataset",
    "GridError", "GridSpec", "compute_grid", "fixed_pool", "grid_pool", "grid_sample", "grid_unpool",
    "EvalReport", "average_precision", "detection_loss", "evaluate",
    "NonFiniteLoss", "OptimConfig", "fit", "overfit",
]
