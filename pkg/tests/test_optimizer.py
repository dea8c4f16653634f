import json

import numpy as np
import pytest

from gsfocus.config import TrainConfig, scaled_schedule
from gsfocus.core import GaussianCloud
from gsfocus.errors import ContractError, InsufficientDataError, NumericalAbort
from gsfocus.optimizer import (AdamState, TrainingData, adam_step, camera_extent, evaluate_views,
                               initialize_cloud, summarize, train)
from gsfocus.rasterizer import GradientBuffer
from gsfocus.synth import toy_scene

from conftest import random_cloud

LRS = {"positions": 0.1, "log_scales": 0.1, "rotations": 0.1, "opacities": 0.1, "colors": 0.1}


@pytest.fixture(scope="module")
def toy():
    return toy_scene(n_train=6, n_test=2, size=32)


def test_zero_gradients_leave_parameters(rng):
    cloud = random_cloud(rng, 4)
    before = cloud.copy()
    state = AdamState.for_cloud(cloud, LRS)
    adam_step(cloud, GradientBuffer.zeros_like(cloud), state)
    assert state.step == 1
    np.testing.assert_array_equal(cloud.positions, before.positions)
    np.testing.assert_allclose(cloud.rotations, before.rotations, atol=1e-15)


def test_first_step_is_lr_times_sign(rng):
    cloud = random_cloud(rng, 1)
    start = cloud.opacities[0]
    g = GradientBuffer.zeros_like(cloud)
    g.opacities[0] = 1.0
    adam_step(cloud, g, AdamState.for_cloud(cloud, LRS))
    assert cloud.opacities[0] == pytest.approx(start - 0.1, abs=1e-12)


def test_quaternions_stay_unit(rng):
    cloud = random_cloud(rng, 20)
    state = AdamState.for_cloud(cloud, LRS)
    for _ in range(5):
        g = GradientBuffer.zeros_like(cloud)
        g.rotations[:] = rng.normal(size=g.rotations.shape)
        adam_step(cloud, g, state)
        assert np.max(np.abs(np.linalg.norm(cloud.rotations, axis=1) - 1)) < 1e-9


def test_adam_rejects_mismatch(rng):
    cloud = random_cloud(rng, 3)
    state = AdamState.for_cloud(cloud, LRS)
    with pytest.raises(ContractError):
        adam_step(cloud, GradientBuffer.zeros_like(random_cloud(rng, 4)), state)
    with pytest.raises(ContractError):
        AdamState.for_cloud(random_cloud(rng, 2, sh=True), LRS)


def test_position_schedule_decays():
    lr = TrainConfig().lr
    assert lr.position_at(0, 2.0) == pytest.approx(1.6e-4 * 2.0)
    assert lr.position_at(30000, 1.0) == pytest.approx(1.6e-6)
    assert lr.position_at(60000, 1.0) == pytest.approx(1.6e-6)


def test_zero_iterations_returns_initial_cloud(toy):
    cfg = TrainConfig()
    cfg.train.iterations = 0
    res = train(toy.training_data(), cfg)
    init = initialize_cloud(toy.points, toy.point_colors, cfg)
    np.testing.assert_array_equal(res.cloud.log_scales, init.log_scales)
    assert res.log == []


def test_init_applies_clamp_when_enabled(toy):
    pts = np.concatenate([toy.points, [[5.0, 5.0, 5.0]]])
    cols = np.concatenate([toy.point_colors, [[0.5, 0.5, 0.5]]])
    on = initialize_cloud(pts, cols, TrainConfig())
    cfg = TrainConfig()
    cfg.constraints.enabled = False
    off = initialize_cloud(pts, cols, cfg)
    assert off.scales.max() > 0.3 and on.scales.max() < off.scales.max()


def _short(iterations=60):
    cfg = scaled_schedule(iterations)
    cfg.densify.start_iteration, cfg.densify.interval = 20, 20
    cfg.attention.interval = 10
    return cfg


def test_training_reduces_loss(toy):
    res = train(toy.training_data(), _short(120))
    losses = [e["total"] for e in res.log]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert any(e["attention"] for e in res.log)
    assert [e["iteration"] for e in res.log] == list(range(1, 121))


def test_training_is_deterministic(toy):
    a = train(toy.training_data(), _short())
    b = train(toy.training_data(), _short())
    assert json.dumps(a.log) == json.dumps(b.log)
    np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)


def test_non_finite_loss_aborts(toy):
    data = toy.training_data()
    bad = [(c, np.full_like(img, np.nan)) for c, img in data.views]
    with pytest.raises(NumericalAbort) as err:
        train(TrainingData(bad, data.points, data.point_colors), _short(5))
    assert err.value.iteration == 1 and isinstance(err.value.snapshot, GaussianCloud)


def test_needs_two_views(toy):
    data = toy.training_data()
    with pytest.raises(InsufficientDataError):
        train(TrainingData(data.views[:1], data.points, data.point_colors), _short(5))


def test_checkpoint_callback(toy):
    seen = []
    cfg = _short(20)
    cfg.train.checkpoint_interval = 10
    train(toy.training_data(), cfg, checkpoint=lambda it, c: seen.append((it, len(c))))
    assert [it for it, _ in seen] == [10, 20]


def test_evaluate_truth_is_perfect(toy):
    m = evaluate_views(toy.truth, toy.training_data().views[:2])
    assert all(v["psnr"] > 60 for v in m)
    assert summarize(m)["views"] == 2


def test_camera_extent(toy):
    assert camera_extent(toy.cameras) == pytest.approx(1.1 * np.max(np.linalg.norm(
        np.stack([c.position for c in toy.cameras]) - np.mean([c.position for c in toy.cameras], axis=0),
        axis=1)))
