"""Finite-difference verification of the model's analytic gradients."""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, init_params, model_forward
from .trainer import loss_and_grads

TINY = dict(n_channels=2, seq_len=8, n_segments=4, horizon=2, n_encoders=1)


def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor stops entries whose true gradient is zero (e.g. K-side biases,
    which shift every score in a row equally) from dividing noise by noise.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_model_gradients(cfg: ModelConfig | None = None, sharing="in-encoder", seed=0,
                          batch=3, h=1e-5, tol=1e-4):
    """Compare tape gradients of the MSE loss with central differences in float64.

    All parameters, biases included, are drawn at random so that every
    path carries signal. Returns {group: max relative error} and a pass flag.
    """
    cfg = cfg or ModelConfig(**TINY, sharing=sharing)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    for t in params.tensors():
        t.data[...] = rng.normal(0.0, 0.5, size=t.shape)
    X = rng.normal(size=(batch, cfg.n_channels, cfg.seq_len))
    Y = rng.normal(size=(batch, cfg.n_channels, cfg.horizon))

    _, grads = loss_and_grads(params, cfg, X, Y)
    grads = [g.copy() for g in grads]

    def f():
        pred = model_forward(X, params, cfg).data
        return float(np.mean((pred - Y) ** 2))

    errors = {}
    for (name, t), g in zip(params.named_tensors(), grads):
        num = numeric_grad(f, t.data, h)
        errors[name] = float(relative_error(g, num).max())
    ok = all(e < tol for e in errors.values())
    return errors, ok
