"""Training loop, metrics and run reports."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import WindowedDataset, iterate_batches
from .model import ModelConfig, PSformerParams, count_parameters, init_params, model_forward
from .optim import Adam, EarlyStopState, SamConfig, early_stop_update, sam_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

# Per-dataset neighbourhood sizes for H = 96, 192, 336, 720.
RHO_DEFAULTS = {
    "etth1": (0.6, 0.8, 0.9, 0.6),
    "etth2": (0.1, 0.0, 0.6, 0.5),
    "ettm1": (0.4, 0.4, 0.4, 0.4),
    "ettm2": (0.0, 0.2, 0.3, 0.3),
    "electricity": (0.0, 0.1, 0.1, 0.1),
    "exchange": (0.2, 0.1, 0.2, 0.2),
    "traffic": (0.1, 0.1, 0.2, 0.3),
    "weather": (0.1, 0.1, 0.2, 0.3),
}
HORIZONS = (96, 192, 336, 720)


def default_rho(dataset_name, horizon):
    """Tabulated rho for a known dataset/horizon pair, else None."""
    row = RHO_DEFAULTS.get(dataset_name.lower())
    if row is None or horizon not in HORIZONS:
        return None
    return row[HORIZONS.index(horizon)]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 300
    patience: int = 30
    batch_size: int = 16
    eval_batch_size: int = 256
    lr: float = 1e-4
    rho: float = 0.0
    betas: tuple = (0.9, 0.999)
    seed: int = 1
    dtype: str = "float32"

    def validate(self):
        if self.max_epochs <= 0 or self.patience < 0:
            raise ValueError("max_epochs must be positive and patience non-negative")
        if self.batch_size <= 0 or self.eval_batch_size <= 0:
            raise ValueError("batch sizes must be positive")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


# ---------------------------------------------------------------- metrics

def mse(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.square(pred - target, dtype=np.float64)))


def mae(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mae: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.astype(np.float64) - target)))


class MetricAccumulator:
    """Element-weighted running MSE/MAE across batches of any size."""

    def __init__(self):
        self.sq = 0.0
        self.abs = 0.0
        self.n = 0

    def update(self, pred, target):
        pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
        d = pred - target
        self.sq += float(np.sum(d * d))
        self.abs += float(np.sum(np.abs(d)))
        self.n += d.size

    @property
    def mse(self):
        return self.sq / self.n if self.n else math.nan

    @property
    def mae(self):
        return self.abs / self.n if self.n else math.nan


def evaluate_params(params, cfg, ds: WindowedDataset, region, batch_size=256):
    """(MSE, MAE) over every window of a region, final short batch included."""
    acc = MetricAccumulator()
    for X, Y in iterate_batches(ds, region, batch_size, shuffle=False, drop_last=False):
        acc.update(model_forward(X, params, cfg).data, Y)
    return acc.mse, acc.mae


def loss_and_grads(params: PSformerParams, cfg: ModelConfig, X, Y):
    """MSE loss of one batch and d(loss)/d(param) for every parameter tensor."""
    params.zero_grad()
    with Tape() as tape:
        pred = model_forward(X, params, cfg)
        d = T.sub(pred, Tensor(Y, dtype=params.dtype))
        loss = T.mean(T.mul(d, d))
    tape.backward(loss)
    return loss.item(), [t.grad for t in params.tensors()]


# ---------------------------------------------------------------- training

@dataclass
class RunReport:
    model: dict
    train: dict
    n_params: int
    n_params_encoder: int
    n_params_head: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    best_epoch: int = -1
    best_val_loss: float = math.nan
    test_mse: float = math.nan
    test_mae: float = math.nan
    floored_channels: list = field(default_factory=list)
    dataset: str = ""

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def numeric_fields(self):
        """Everything except wall-clock timings, for determinism checks."""
        d = self.to_dict()
        d.pop("epoch_seconds")
        return d


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, ds: WindowedDataset,
          params: PSformerParams | None = None, dataset_name=""):
    """Train with SAM-wrapped Adam and early stopping on validation MSE.

    Returns (report, params) where ``params`` hold the best-validation
    weights; test metrics are computed once on them.
    """
    train_cfg.validate()
    if ds.n_channels != model_cfg.n_channels:
        raise ValueError(f"dataset has {ds.n_channels} channels, model expects {model_cfg.n_channels}")
    if (ds.seq_len, ds.horizon) != (model_cfg.seq_len, model_cfg.horizon):
        raise ValueError("dataset window/horizon do not match the model config")

    dtype = np.dtype(train_cfg.dtype)
    if params is None:
        params = init_params(model_cfg, seed=train_cfg.seed, dtype=dtype)
    rng = np.random.default_rng(train_cfg.seed)
    tensors = params.tensors()
    base = Adam(lr=train_cfg.lr, betas=tuple(train_cfg.betas))
    sam = SamConfig(rho=train_cfg.rho)
    stopper = EarlyStopState(patience=train_cfg.patience)
    total, parts = count_parameters(model_cfg)
    echo = asdict(train_cfg)
    echo["betas"] = list(echo["betas"])  # JSON has no tuples
    report = RunReport(model=model_cfg.to_dict(), train=echo, n_params=total,
                       n_params_encoder=parts["encoder"], n_params_head=parts["head"],
                       floored_channels=list(ds.floored_channels), dataset=dataset_name)

    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        batches = iterate_batches(ds, "train", train_cfg.batch_size, shuffle=True, drop_last=True, rng=rng)
        for b, (X, Y) in enumerate(batches):
            loss = sam_step(tensors, lambda: loss_and_grads(params, model_cfg, X, Y), sam, base)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss {loss} at epoch {epoch}, batch {b}")
            losses.append(loss)
        if not losses:
            raise TrainingError("training region yields no full batch")
        val, _ = evaluate_params(params, model_cfg, ds, "val", train_cfg.eval_batch_size)
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val)
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.epochs_run = epoch
        verdict = early_stop_update(stopper, val, epoch, lambda: [t.data.copy() for t in tensors])
        log.info("epoch %d  train %.6f  val %.6f  (%.1fs)", epoch, report.train_loss[-1], val,
                 report.epoch_seconds[-1])
        if verdict == "stop":
            report.stopped_early = True
            break

    for t, saved in zip(tensors, stopper.checkpoint):
        t.data[...] = saved
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    report.test_mse, report.test_mae = evaluate_params(params, model_cfg, ds, "test",
                                                       train_cfg.eval_batch_size)
    log.info("best epoch %d  val %.6f  test mse %.6f mae %.6f", report.best_epoch,
             report.best_val_loss, report.test_mse, report.test_mae)
    return report, params


def evaluate(checkpoint, ds: WindowedDataset, split="test", batch_size=256):
    """MSE and MAE of a saved checkpoint (path or (params, cfg)) on a region."""
    from .model import load_checkpoint

    if isinstance(checkpoint, tuple):
        params, cfg = checkpoint[:2]
    else:
        params, cfg, _ = load_checkpoint(checkpoint)
    if cfg.n_channels != ds.n_channels:
        raise ValueError(f"checkpoint expects {cfg.n_channels} channels, dataset has {ds.n_channels}")
    return evaluate_params(params, cfg, ds, split, batch_size)
