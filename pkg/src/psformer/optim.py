"""Adam, plain SGD, the SAM wrapper, and early stopping.

Optimizers update ``Tensor.data`` in place from a list of gradient arrays
given in the same order as the parameter list.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        _check(params, grads)
        for p, g in zip(params, grads):
            p.data -= p.data.dtype.type(self.lr) * g


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        _check(params, grads)
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {"t": self.t, "m": copy.deepcopy(self.m), "v": copy.deepcopy(self.v)}


def global_norm(arrays):
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))


@dataclass
class SamConfig:
    rho: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


def sam_step(params, loss_fn, sam: SamConfig, base):
    """One sharpness-aware update.

    ``loss_fn()`` evaluates the loss at the current ``params`` and returns
    (loss, grads). The ascent step is eps = rho * g / ||g|| using the global
    L2 norm over every parameter; the descent gradient is taken at
    theta + eps, theta is restored exactly, then ``base`` steps with it.

    Returns the loss at the unperturbed point.
    """
    loss, grads = loss_fn()
    if not sam.enabled or sam.rho == 0.0:
        base.step(params, grads)
        return loss
    if global_norm(grads) == 0.0:
        base.step(params, grads)
        return loss
    saved = [p.data.copy() for p in params]
    for p, e in zip(params, perturbation(grads, sam.rho)):
        p.data += e.astype(p.data.dtype)
    _, adv_grads = loss_fn()
    for p, s in zip(params, saved):
        p.data[...] = s
    base.step(params, adv_grads)
    return loss


def perturbation(grads, rho):
    """The ascent vector rho * g / ||g|| (zeros if g = 0)."""
    norm = global_norm(grads)
    if norm == 0.0:
        return [np.zeros_like(g) for g in grads]
    return [rho * np.asarray(g, dtype=np.float64) / norm for g in grads]


@dataclass
class EarlyStopState:
    patience: int = 30
    best: float = math.inf
    best_epoch: int = -1
    since: int = 0
    checkpoint: object = field(default=None, repr=False)


def early_stop_update(state: EarlyStopState, val_loss, epoch, snapshot=None):
    """Record one epoch's validation loss; return "continue" or "stop".

    Only a strictly lower loss counts as improvement. ``snapshot`` is a
    zero-argument callable producing the checkpoint to keep.
    """
    if not math.isfinite(val_loss):
        raise FloatingPointError(f"validation loss is {val_loss} at epoch {epoch}")
    if val_loss < state.best:
        state.best = val_loss
        state.best_epoch = epoch
        state.since = 0
        if snapshot is not None:
            state.checkpoint = snapshot()
        return "continue"
    state.since += 1
    return "stop" if state.since > state.patience else "continue"
