import csv

import numpy as np
import pytest

from modcodec import metalearn as ml
from modcodec.inr import SirenConfig, forward, init_params
from modcodec.metalearn import (InnerConfig, OuterConfig, TrainState, fit_coin, inner_adapt, loss,
                                outer_gradient, outer_step, train)
from modcodec.signalio import Patch, Signal, make_coords, CoordinateSpec
from modcodec.synthetic import textures


def tiny(seed=0, kind="shift", depth=2, width=4, latent=3, omega0=30.0):
    cfg = SirenConfig(2, 1, depth, width, latent, omega0, kind)
    return init_params(cfg, np.random.default_rng(seed))


def tiny_patch(seed=0, side=3):
    r = np.random.default_rng(seed)
    coords = make_coords(CoordinateSpec("euclidean_grid", (side, side)))
    return Patch(coords, r.uniform(0, 1, (side * side, 1)), (side, side))


def composite_loss(theta, patch, inner):
    phi = inner_adapt(theta, patch, inner)
    return loss(theta, phi, patch)


def central_theta_grad(theta, patch, inner, h=1e-6):
    grads = {}
    for name, value in theta.params.items():
        g = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            plus, minus = value.copy(), value.copy()
            plus[i] += h
            minus[i] -= h
            lp = composite_loss(theta.replace({**theta.params, name: plus}), patch, inner)
            lm = composite_loss(theta.replace({**theta.params, name: minus}), patch, inner)
            g[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def flat(d, names):
    return np.concatenate([d[n].ravel() for n in names])


# ---- loss

def test_loss_examples():
    theta = tiny()
    patch = tiny_patch()
    exact = Patch(patch.coords, forward(theta, np.zeros(3), patch.coords), patch.shape)
    assert loss(theta, np.zeros(3), exact) == 0.0

    zero = theta.replace({k: np.zeros_like(v) for k, v in theta.params.items()})
    half = Patch(patch.coords, np.full((9, 1), 0.5), patch.shape)
    assert loss(zero, np.zeros(3), half) == 0.25


def test_loss_matches_scalar_loop():
    theta = tiny(1)
    patch = tiny_patch(1)
    phi = np.array([0.01, 0.02, -0.03])
    pred = forward(theta, phi, patch.coords)
    total = 0.0
    for i in range(len(pred)):
        total += (pred[i, 0] - patch.values[i, 0]) ** 2
    assert loss(theta, phi, patch) == pytest.approx(total / len(pred), rel=1e-13)


def test_loss_rejects_empty_patch():
    with pytest.raises(ValueError):
        Patch(np.zeros((0, 2)), np.zeros((0, 1)), (0,))


# ---- inner loop

def test_inner_zero_lr_keeps_zero():
    phi = inner_adapt(tiny(), tiny_patch(), InnerConfig(5, 0.0))
    assert np.array_equal(phi.latent, np.zeros(3))


def test_inner_stationary_point():
    theta = tiny(2)
    patch = tiny_patch()
    fitted = Patch(patch.coords, forward(theta, np.zeros(3), patch.coords), patch.shape)
    assert np.array_equal(inner_adapt(theta, fitted, InnerConfig(3)).latent, np.zeros(3))


@pytest.mark.parametrize("seed", range(4))
def test_inner_adapt_lowers_loss(seed):
    theta = tiny(seed, omega0=10.0)
    patch = tiny_patch(seed)
    phi = inner_adapt(theta, patch, InnerConfig(3, 1e-3))
    assert loss(theta, phi, patch) <= loss(theta, np.zeros(3), patch)


def test_inner_adapt_does_not_touch_theta():
    theta = tiny(3)
    before = {k: v.copy() for k, v in theta.params.items()}
    inner_adapt(theta, tiny_patch(), InnerConfig(3))
    for k, v in theta.params.items():
        assert v.tobytes() == before[k].tobytes()


def test_inner_adapt_reports_divergence_step():
    theta = tiny(0)
    patch = tiny_patch()
    patch.values[4, 0] = np.inf
    with pytest.raises(ml.AdaptationError) as info:
        inner_adapt(theta, patch, InnerConfig(3))
    assert info.value.step == 0
    # Sine layers keep outputs bounded, so even a wild step size stays finite.
    phi = inner_adapt(theta, tiny_patch(), InnerConfig(5, 1e6))
    assert np.all(np.isfinite(phi.latent))


def test_batched_inner_adapt_equals_individual():
    theta = tiny(4)
    patches = [tiny_patch(s) for s in range(3)]
    together = inner_adapt(theta, patches, InnerConfig(3))
    for p, phi in zip(patches, together):
        np.testing.assert_allclose(phi.latent, inner_adapt(theta, p, InnerConfig(3)).latent, rtol=1e-12, atol=1e-15)


# ---- outer loop

@pytest.mark.parametrize("steps", [1, 2, 3])
@pytest.mark.parametrize("seed", range(2))
def test_outer_gradient_matches_finite_differences(steps, seed):
    theta = tiny(seed)
    patch = tiny_patch(seed)
    inner = InnerConfig(steps, 1e-2)
    total, grads = outer_gradient(theta, [patch], inner)
    assert total == pytest.approx(composite_loss(theta, patch, inner), rel=1e-12)
    names = list(grads)
    fd = central_theta_grad(theta, patch, inner)
    a, b = flat(grads, names), flat(fd, names)
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-5


def test_duplicated_batch_doubles_gradient():
    theta = tiny(5)
    patch = tiny_patch(5)
    inner = InnerConfig(2)
    _, one = outer_gradient(theta, [patch], inner)
    _, two = outer_gradient(theta, [patch, patch], inner)
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-12, atol=1e-300)


def test_outer_step_zero_lr():
    theta = tiny(6)
    state = TrainState.create(theta)
    new, _ = outer_step(state, [tiny_patch()], InnerConfig(1), OuterConfig(lr=0.0))
    for k in theta.params:
        assert np.array_equal(new.theta.params[k], theta.params[k])
    assert new.step == 1
    assert any(np.any(new.m[k] != 0) for k in new.m)
    assert all(new.m[k].shape == theta.params[k].shape for k in theta.params)


def test_outer_step_rejects_non_finite_and_keeps_state():
    theta = tiny(7)
    bad = theta.replace({**theta.params, "b_out": np.array([np.inf])})
    state = TrainState.create(bad)
    with pytest.raises(ml.NonFiniteGradient):
        outer_step(state, [tiny_patch()], InnerConfig(1), OuterConfig())
    assert state.step == 0
    with pytest.raises(ValueError):
        outer_gradient(theta, [], InnerConfig(1))


def test_adam_first_step_moves_by_lr():
    theta = tiny(8)
    state = TrainState.create(theta)
    grads = {k: np.full_like(v, 3.0) for k, v in theta.params.items()}
    new = ml.adam_update(state, grads, OuterConfig(lr=1e-3))
    for k in theta.params:
        np.testing.assert_allclose(theta.params[k] - new.theta.params[k], 1e-3, rtol=1e-6)


# ---- training driver

SMALL = SirenConfig(2, 1, 2, 8, 4, 30.0)


def small_data():
    return textures(6, seed=11, size=(6, 6))


def test_train_zero_epochs_returns_init():
    res = train(small_data(), SMALL, outer=OuterConfig(epochs=0, seed=3))
    init = init_params(SMALL, np.random.default_rng(3))
    for k in init.params:
        assert np.array_equal(res.theta.params[k], init.params[k])


def test_train_is_deterministic_and_logs(tmp_path):
    data = small_data()
    outer = OuterConfig(lr=1e-4, batch_size=2, epochs=2, seed=5)
    log_a, log_b = tmp_path / "a.csv", tmp_path / "b.csv"
    a = train(data, SMALL, InnerConfig(2), outer, patch_shape=(4, 4), val_set=data[:2], metric_log=log_a)
    b = train(data, SMALL, InnerConfig(2), outer, patch_shape=(4, 4), val_set=data[:2], metric_log=log_b)
    for k in a.theta.params:
        assert a.theta.params[k].tobytes() == b.theta.params[k].tobytes()
    assert log_a.read_bytes() == log_b.read_bytes()
    rows = list(csv.DictReader(open(log_a)))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert list(rows[0]) == ["epoch", "outer_step", "train_loss", "val_psnr_db"]
    assert int(rows[-1]["outer_step"]) == 6


def test_train_max_steps():
    res = train(small_data(), SMALL, InnerConfig(1), OuterConfig(batch_size=2, epochs=100, max_steps=4),
                patch_shape=(3, 3))
    assert res.state.step == 4


def test_train_skips_non_finite_updates(monkeypatch):
    calls = {"n": 0}
    real = ml.outer_step

    def flaky(state, batch, inner, outer):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ml.NonFiniteGradient("spike")
        return real(state, batch, inner, outer)

    monkeypatch.setattr(ml, "outer_step", flaky)
    res = train(small_data(), SMALL, InnerConfig(1), OuterConfig(batch_size=2, epochs=1), patch_shape=(3, 3))
    assert res.skipped == 1 and res.state.step == 2


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train([], SMALL)


# ---- per-datum baseline

COIN = SirenConfig(2, 1, 2, 12, 0, 30.0, "none")


def test_fit_coin_zero_steps_is_init():
    sig = small_data()[0]
    theta = fit_coin(sig, COIN, steps=0, seed=4)
    init = init_params(COIN, np.random.default_rng(4))
    for k in init.params:
        assert np.array_equal(theta.params[k], init.params[k])
    with pytest.raises(ValueError):
        fit_coin(sig, SMALL, steps=1)


def test_fit_coin_reduces_loss_on_constant_image():
    sig = Signal("image", np.full((8, 8, 1), 0.8))
    patch = Patch(sig.coords(), sig.features.reshape(-1, 1), (8, 8))
    init = fit_coin(sig, COIN, steps=0)
    fitted = fit_coin(sig, COIN, steps=500, lr=1e-3)
    assert loss(fitted, None, patch) < loss(init, None, patch)


def test_fit_coin_stops_at_target():
    sig = small_data()[1]
    patch = Patch(sig.coords(), sig.features.reshape(-1, 1), sig.feature_shape)
    theta = fit_coin(sig, COIN, steps=3000, lr=1e-3, target_psnr=18.0)
    assert ml.mse_to_psnr(loss(theta, None, patch)) >= 18.0
