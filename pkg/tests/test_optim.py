import math

import numpy as np
import pytest

from psformer.optim import (SGD, Adam, EarlyStopState, SamConfig, early_stop_update, global_norm,
                            perturbation, sam_step)
from psformer.tensor import Tensor


def params64(*arrays):
    return [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]


def quadratic(params, weights):
    """loss = sum_i w_i * ||p_i||^2 with its exact gradient."""
    def fn():
        loss = sum(float(w * np.sum(p.data ** 2)) for p, w in zip(params, weights))
        return loss, [2 * w * p.data for p, w in zip(params, weights)]
    return fn


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_is_fixed_point():
    p = params64([1.0, -2.0], [[3.0]])
    opt = Adam(lr=0.1)
    for _ in range(3):
        opt.step(p, [np.zeros(2), np.zeros((1, 1))])
    assert opt.t == 3
    assert p[0].data.tolist() == [1.0, -2.0] and p[1].data.tolist() == [[3.0]]


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.5, 1e-3, -40.0])
    p = params64(np.zeros(4))
    Adam(lr=1e-2).step(p, [g])
    # bias-corrected m/sqrt(v) = g/|g| on step one
    expect = -1e-2 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p[0].data, expect, rtol=1e-12)
    np.testing.assert_allclose(p[0].data, -1e-2 * np.sign(g), rtol=1e-5)


def test_adam_matches_scalar_simulation_on_quadratic():
    theta = 1.0
    m = v = 0.0
    p = params64([1.0])
    opt = Adam(lr=1e-2)
    for t in range(1, 501):
        g = 2 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step(p, [2 * p[0].data])
        assert p[0].data[0] == pytest.approx(theta, abs=1e-12)
    assert abs(p[0].data[0]) < 1e-3


def test_adam_converges_within_500_steps():
    p = params64([1.0])
    opt = Adam(lr=1e-2)
    for step in range(1, 501):
        opt.step(p, [2 * p[0].data])
        if abs(p[0].data[0]) < 1e-3:
            break
    assert abs(p[0].data[0]) < 1e-3 and step <= 500


def test_optimizers_reject_shape_mismatch():
    p = params64(np.zeros(3))
    with pytest.raises(ValueError):
        Adam().step(p, [np.zeros(2)])
    with pytest.raises(ValueError):
        SGD().step(p, [np.zeros(3), np.zeros(3)])


def test_adam_keeps_float32():
    p = [Tensor(np.ones(3), requires_grad=True)]
    Adam().step(p, [np.ones(3, dtype=np.float32)])
    assert p[0].dtype == np.float32


# ---------------------------------------------------------------- SAM

def test_sam_hand_example():
    p = params64([1.0])
    loss = sam_step(p, quadratic(p, [1.0]), SamConfig(rho=0.1), SGD(lr=0.1))
    # g = 2, eps = 0.1, g_adv = 2 * 1.1 = 2.2, theta' = 1 - 0.22
    assert loss == 1.0
    assert p[0].data[0] == pytest.approx(0.78, abs=1e-15)


@pytest.mark.parametrize("enabled,rho", [(True, 0.0), (False, 0.5)])
def test_sam_without_perturbation_equals_adam(enabled, rho):
    rng = np.random.default_rng(0)
    init = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    a = params64(*[x.copy() for x in init])
    b = params64(*[x.copy() for x in init])
    opt_a, opt_b = Adam(lr=1e-2), Adam(lr=1e-2)
    for _ in range(100):
        sam_step(a, quadratic(a, [1.0, 3.0]), SamConfig(rho=rho, enabled=enabled), opt_a)
        _, g = quadratic(b, [1.0, 3.0])()
        opt_b.step(b, g)
    for pa, pb in zip(a, b):
        assert np.abs(pa.data - pb.data).max() < 1e-12


def test_perturbation_norm_is_rho():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=(5, 5)), rng.normal(size=3), rng.normal(size=(2, 2, 2))]
    for rho in (0.05, 0.6, 2.0):
        assert global_norm(perturbation(grads, rho)) == pytest.approx(rho, abs=1e-10)
    assert global_norm(perturbation([np.zeros(3)], 0.5)) == 0.0


def test_perturbation_uses_global_not_per_tensor_norm():
    eps = perturbation([np.array([3.0]), np.array([4.0])], 1.0)
    np.testing.assert_allclose([eps[0][0], eps[1][0]], [0.6, 0.8])


def test_sam_restores_parameters_before_base_step():
    rng = np.random.default_rng(2)
    p = params64(rng.normal(size=(4, 4)), rng.normal(size=4))
    before = [x.data.tobytes() for x in p]
    seen = []

    class Recorder:
        def step(self, params, grads):
            seen.append([x.data.tobytes() for x in params])

    sam_step(p, quadratic(p, [1.0, 1.0]), SamConfig(rho=0.3), Recorder())
    assert seen == [before]
    assert [x.data.tobytes() for x in p] == before


def test_sam_evaluates_gradient_at_perturbed_point():
    p = params64([1.0, 2.0])
    points = []

    def fn():
        points.append(p[0].data.copy())
        return quadratic(p, [1.0])()

    sam_step(p, fn, SamConfig(rho=0.5), SGD(lr=0.0))
    assert len(points) == 2
    g = np.array([2.0, 4.0])
    np.testing.assert_allclose(points[1] - points[0], 0.5 * g / np.linalg.norm(g), rtol=1e-14)


def test_sam_zero_gradient_skips_perturbation():
    p = params64([0.0])
    calls = []

    def fn():
        calls.append(1)
        return 0.0, [np.zeros(1)]

    sam_step(p, fn, SamConfig(rho=0.5), Adam())
    assert len(calls) == 1 and p[0].data[0] == 0.0


def test_negative_rho_rejected():
    with pytest.raises(ValueError):
        SamConfig(rho=-0.1)


# ---------------------------------------------------------------- early stopping

def run_early_stop(losses, patience):
    state = EarlyStopState(patience=patience)
    for epoch, loss in enumerate(losses, start=1):
        if early_stop_update(state, loss, epoch, snapshot=lambda e=epoch: f"ckpt{e}") == "stop":
            return epoch, state
    return None, state


def test_decreasing_losses_never_stop():
    stop, state = run_early_stop([1.0 / k for k in range(1, 50)], patience=3)
    assert stop is None and state.best_epoch == 49


def test_flat_losses_stop_after_fourth_non_improving_epoch():
    stop, state = run_early_stop([0.5] * 10, patience=3)
    # epoch 1 improves on +inf, epochs 2..5 do not
    assert stop == 5 and state.best_epoch == 1


def test_step_through_sequence_keeps_epoch_two():
    stop, state = run_early_stop([1.0, 0.9, 0.95, 0.94, 0.93, 0.92], patience=3)
    assert state.best == 0.9 and state.best_epoch == 2
    assert state.checkpoint == "ckpt2"
    assert stop == 6


def test_tie_is_not_an_improvement():
    state = EarlyStopState(patience=5)
    early_stop_update(state, 0.4, 1)
    early_stop_update(state, 0.4, 2)
    assert state.best_epoch == 1 and state.since == 1


def test_nan_val_loss_aborts():
    with pytest.raises(FloatingPointError, match="epoch 3"):
        early_stop_update(EarlyStopState(), float("nan"), 3)
