"""Multiplexed vision transformers on a from-scratch numpy autodiff engine."""

from .autodiff import ContractError, DimensionError, Tape, Tensor, UnsupportedOpError, backward
from .costmodel import FlopsReport, compare_flops, flops_per_image
from .data import DataFormatError, Dataset, load_dataset, make_mux_batches
from .harness import DataSpec, TrainConfig, TrainRecord, bench_throughput, evaluate, report_flops, train
from .losses import LossConfig
from .models import ModelConfig, ModelState, MuxBatch, build_model, forward, load_checkpoint, save_checkpoint
from .nn import ConfigError
from .optim import AdamW, OptimizerConfig

__version__ = "0.1.0"

__all__ = [
    "AdamW", "ConfigError", "ContractError", "DataFormatError", "DataSpec", "Dataset", "DimensionError",
    "FlopsReport", "LossConfig", "ModelConfig", "ModelState", "MuxBatch", "OptimizerConfig", "Tape",
    "Tensor", "TrainConfig", "TrainRecord", "UnsupportedOpError", "backward", "bench_throughput",
    "build_model", "compare_flops", "evaluate", "flops_per_image", "forward", "load_checkpoint",
    "load_dataset", "make_mux_batches", "report_flops", "save_checkpoint", "train",
]
