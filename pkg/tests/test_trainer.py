import math

import numpy as np
import pytest

from conftest import sinusoid
from psformer.data import RawSeries, SplitSpec, iterate_batches, split_and_standardize
from psformer.model import ModelConfig, init_params, model_forward, save_checkpoint
from psformer.trainer import (MetricAccumulator, RunReport, TrainConfig, TrainingError, default_rho,
                              evaluate, evaluate_params, mae, mse, train)

TINY = dict(n_channels=2, seq_len=32, n_segments=4, horizon=8)


def sin_ds(T=400, dtype=np.float32, seed=0):
    raw = RawSeries(["a", "b"], sinusoid(T, M=2, seed=seed))
    return split_and_standardize(raw, SplitSpec(overlap=32), 32, 8, dtype=dtype)


# ---------------------------------------------------------------- metrics

def test_perfect_prediction_scores_zero():
    y = np.random.default_rng(0).normal(size=(3, 2, 4))
    assert mse(y, y) == 0.0 and mae(y, y) == 0.0


@pytest.mark.parametrize("c", [0.5, -2.0, 3.0])
def test_constant_offset(c):
    y = np.random.default_rng(1).normal(size=(2, 3, 5))
    assert mse(y + c, y) == pytest.approx(c * c, rel=1e-12)
    assert mae(y + c, y) == pytest.approx(abs(c), rel=1e-12)


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mae(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        MetricAccumulator().update(np.zeros(2), np.zeros(3))


def test_accumulator_weights_by_element_count():
    rng = np.random.default_rng(2)
    pred, target = rng.normal(size=(6, 2, 3)), rng.normal(size=(6, 2, 3))
    acc = MetricAccumulator()
    acc.update(pred[:4], target[:4])
    acc.update(pred[4:], target[4:])
    direct = sum((p - t) ** 2 for p, t in zip(pred.ravel(), target.ravel())) / pred.size
    assert acc.mse == pytest.approx(direct, rel=1e-12)
    assert acc.mae == pytest.approx(np.abs(pred - target).mean(), rel=1e-12)
    mean_of_means = (mse(pred[:4], target[:4]) + mse(pred[4:], target[4:])) / 2
    assert not math.isclose(acc.mse, mean_of_means, rel_tol=1e-6)


def test_evaluate_params_equals_single_batch_metric():
    ds = sin_ds(dtype=np.float64)
    cfg = ModelConfig(**TINY)
    params = init_params(cfg, dtype=np.float64)
    n = ds.n_windows("test")
    X, Y = ds.batch("test", np.arange(n))
    want_mse = mse(model_forward(X, params, cfg).data, Y)
    for bs in (7, 32, n):
        got_mse, got_mae = evaluate_params(params, cfg, ds, "test", bs)
        assert got_mse == pytest.approx(want_mse, rel=1e-12)


def test_default_rho_table():
    assert [default_rho("ETTh1", h) for h in (96, 192, 336, 720)] == [0.6, 0.8, 0.9, 0.6]
    assert default_rho("traffic", 720) == 0.3
    assert default_rho("weather", 100) is None
    assert default_rho("custom", 96) is None


# ---------------------------------------------------------------- training

def test_sinusoid_is_learned_within_50_epochs():
    ds = sin_ds()
    report, params = train(ModelConfig(**TINY), TrainConfig(max_epochs=50, patience=50, rho=0.2), ds)
    variance = float(ds.regions["test"].var())
    assert report.test_mse < 0.1 * variance
    assert report.epochs_run <= 50
    assert report.train_loss[0] < 10  # O(1) in standardized units


def test_same_seed_same_trajectory():
    ds = sin_ds()
    cfg = TrainConfig(max_epochs=3, rho=0.3, seed=7)
    a, _ = train(ModelConfig(**TINY), cfg, ds)
    b, _ = train(ModelConfig(**TINY), cfg, ds)
    assert a.numeric_fields() == b.numeric_fields()
    c, _ = train(ModelConfig(**TINY), TrainConfig(max_epochs=3, rho=0.3, seed=8), ds)
    assert c.train_loss != a.train_loss


def test_early_stop_restores_best_and_test_uses_it(tmp_path):
    ds = sin_ds()
    mcfg = ModelConfig(**TINY)
    # a huge learning rate makes validation bounce so the stopper fires
    report, params = train(mcfg, TrainConfig(max_epochs=40, patience=2, lr=0.05, seed=3), ds)
    assert report.stopped_early
    assert report.epochs_run == report.best_epoch + 3
    assert report.best_val_loss == min(report.val_loss)
    val, _ = evaluate_params(params, mcfg, ds, "val", 256)
    assert val == pytest.approx(report.val_loss[report.best_epoch - 1], abs=1e-6)
    path = tmp_path / "best.npz"
    save_checkpoint(path, params, mcfg)
    val2, _ = evaluate(path, ds, "val")
    assert val2 == pytest.approx(report.best_val_loss, abs=1e-6)
    test_mse, test_mae = evaluate((params, mcfg), ds, "test")
    assert (test_mse, test_mae) == (report.test_mse, report.test_mae)


def test_memorized_toy_set_scores_near_zero():
    ds = sin_ds(dtype=np.float64)
    cfg = ModelConfig(n_channels=2, seq_len=32, n_segments=4, horizon=8, sharing="none")
    params = init_params(cfg, dtype=np.float64)
    # least-squares fit of the linear head on every region with the encoder
    # switched off reproduces the targets of a pure sinusoid exactly
    for blk in params.blocks:
        blk.w1.data[...] = 0
        blk.w3.data[...] = 0
    for e in range(cfg.n_encoders):
        fin = params.encoder_blocks(e)["Final"]
        fin.w3.data[...] = np.eye(4)
    from psformer.model import revin_normalize
    X, Y = ds.batch("train", np.arange(ds.n_windows("train")))
    xn, st = revin_normalize(X, eps=cfg.revin_eps)
    yn = (Y - st.mean) / st.std
    A = np.concatenate([xn.reshape(-1, 32), np.ones((xn.shape[0] * 2, 1))], axis=1)
    sol, *_ = np.linalg.lstsq(A, yn.reshape(-1, 8), rcond=None)
    params.head_w.data[...] = sol[:32]
    params.head_b.data[...] = sol[32]
    test_mse, _ = evaluate_params(params, cfg, ds, "test")
    assert test_mse < 1e-12


def test_nan_loss_aborts_with_location():
    ds = sin_ds()
    cfg = ModelConfig(**TINY)
    params = init_params(cfg)
    params.head_b.data[0] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 1, batch 0"):
        train(cfg, TrainConfig(max_epochs=2), ds, params=params)


def test_train_rejects_mismatched_dataset():
    ds = sin_ds()
    with pytest.raises(ValueError, match="channels"):
        train(ModelConfig(n_channels=3, seq_len=32, n_segments=4, horizon=8), TrainConfig(max_epochs=1), ds)
    with pytest.raises(ValueError):
        train(ModelConfig(**TINY), TrainConfig(max_epochs=0), ds)
    with pytest.raises(ValueError):
        evaluate((init_params(ModelConfig(n_channels=1, seq_len=32, n_segments=4, horizon=8)),
                  ModelConfig(n_channels=1, seq_len=32, n_segments=4, horizon=8)), ds)


def test_training_reads_only_train_targets(monkeypatch):
    ds = sin_ds()
    seen = []
    real = iterate_batches

    def spy(d, region, *a, **k):
        seen.append((region, k.get("shuffle", False)))
        return real(d, region, *a, **k)

    monkeypatch.setattr("psformer.trainer.iterate_batches", spy)
    train(ModelConfig(**TINY), TrainConfig(max_epochs=2), ds)
    assert ("train", True) in seen
    assert all(not shuffled for region, shuffled in seen if region != "train")
    assert [r for r, _ in seen].count("test") == 1


def test_report_round_trip(tmp_path):
    ds = sin_ds()
    report, _ = train(ModelConfig(**TINY), TrainConfig(max_epochs=1), ds, dataset_name="toy")
    path = tmp_path / "r.json"
    report.write(path)
    back = RunReport.read(path)
    assert back.to_dict() == report.to_dict()
    assert back.dataset == "toy" and back.n_params == 3 * (4 * 4 + 4) + 32 * 8 + 8
