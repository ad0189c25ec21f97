import numpy as np
import pytest

from hieraudio.autodiff import Rng, Tensor
from hieraudio.config import Config, TrainConfig, tiny_model
from hieraudio.model import init_params
from hieraudio.train import OptimState, adamw_step, clip_loss, lr_factor, train_step, weight_average


def params_of(*arrays):
    return {f"p{i}": Tensor(np.array(a, dtype=np.float64)) for i, a in enumerate(arrays)}


def test_zero_grads_no_decay_unchanged():
    p = params_of([1.0, -2.0], [[0.5]])
    before = {k: v.data.copy() for k, v in p.items()}
    state = OptimState.create(p, weight_decay=0.0)
    adamw_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, state, 0.1)
    assert all(np.array_equal(p[k].data, before[k]) for k in p)


def test_single_step_is_signed_lr():
    p = params_of([0.0, 0.0, 0.0])
    state = OptimState.create(p, weight_decay=0.0)
    adamw_step(p, {"p0": np.array([3.0, -0.2, 1e-3])}, state, 0.01)
    # bias-corrected moments: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["p0"].data, -0.01 * np.sign([3.0, -0.2, 1e-3]), rtol=1e-5)


def test_decay_only():
    p = params_of([2.0, -4.0])
    state = OptimState.create(p, weight_decay=0.05)
    adamw_step(p, {"p0": np.zeros(2)}, state, 0.1)
    np.testing.assert_allclose(p["p0"].data, [2.0 * 0.995, -4.0 * 0.995], rtol=1e-15)


def test_decay_applied_before_adam_update():
    p = params_of([1.0])
    state = OptimState.create(p, weight_decay=0.5)
    adamw_step(p, {"p0": np.array([1.0])}, state, 0.1)
    assert p["p0"].data[0] == pytest.approx(1.0 * (1 - 0.05) - 0.1, rel=1e-6)


def test_two_steps_match_closed_form():
    p = params_of([0.0])
    state = OptimState.create(p, weight_decay=0.0)
    g1, g2 = 1.0, -3.0
    adamw_step(p, {"p0": np.array([g1])}, state, 0.1)
    adamw_step(p, {"p0": np.array([g2])}, state, 0.1)
    m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
    first = -0.1 * g1 / (abs(g1) + 1e-8)
    assert p["p0"].data[0] == pytest.approx(first - 0.1 * m / (np.sqrt(v) + 1e-8), rel=1e-12)


def test_non_finite_gradients_abort():
    p = params_of([1.0])
    state = OptimState.create(p)
    with pytest.raises(FloatingPointError, match="p0"):
        adamw_step(p, {"p0": np.array([np.nan])}, state, 0.1)
    assert p["p0"].data[0] == 1.0 and state.step == 0
    with pytest.raises(ValueError):
        adamw_step(p, {"p0": np.array([1.0])}, state, 0.0)


def test_lr_factor_table():
    assert [lr_factor(e) for e in (1, 2, 3)] == [0.05, 0.1, 0.2]
    assert lr_factor(12) == 0.2 and lr_factor(13) == 0.1
    assert lr_factor(22) == 0.1 and lr_factor(23) == 0.05
    assert lr_factor(1000) == 0.05
    with pytest.raises(ValueError):
        lr_factor(0)


def test_lr_factor_monotone_and_bounded():
    values = [lr_factor(e) for e in range(3, 200)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.05 <= v <= 0.2 for v in values)


def test_weight_average():
    rng = np.random.default_rng(0)
    theta = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    assert all(np.array_equal(weight_average([theta])[k], theta[k]) for k in theta)
    neg = {k: -v for k, v in theta.items()}
    assert all(np.all(weight_average([theta, neg])[k] == 0) for k in theta)
    cks = [{k: rng.normal(size=v.shape) for k, v in theta.items()} for _ in range(5)]
    avg = weight_average(cks)
    for k, v in theta.items():
        for idx in np.ndindex(v.shape):
            assert avg[k][idx] == pytest.approx(sum(c[k][idx] for c in cks) / 5, rel=1e-14)
    with pytest.raises(ValueError):
        weight_average([theta, {"a": theta["a"]}])
    with pytest.raises(ValueError):
        weight_average([])


@pytest.mark.slow
def test_one_step_decreases_batch_loss_for_most_seeds():
    cfg = Config(tiny_model(), TrainConfig())
    mc = cfg.model
    improved = 0
    for seed in range(100):
        gen = Rng(seed).stream("batch")
        specs = gen.normal(size=(4, mc.T, mc.F)).astype(np.float32)
        targets = (gen.random((4, mc.C)) < 0.3).astype(np.float32)
        params = init_params(mc, seed)
        state = OptimState.create(params)
        before = train_step(params, mc, specs, targets, state, 1e-3)
        after = clip_loss(params, mc, specs, targets).item()
        improved += after < before
    assert improved >= 95
