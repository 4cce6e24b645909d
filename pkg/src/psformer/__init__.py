"""Multivariate forecaster built from shared PS blocks, running on a small numpy autodiff core."""

from .data import (RawSeries, SplitSpec, WindowedDataset, iterate_batches, load_csv, load_dataset,
                   split_and_standardize)
from .model import (ModelConfig, PSBlockParams, PSformerParams, count_parameters, export_attention,
                    init_params, load_checkpoint, model_forward, save_checkpoint)
from .optim import Adam, SamConfig, sam_step
from .trainer import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
