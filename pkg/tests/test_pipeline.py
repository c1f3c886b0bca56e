import numpy as np
import pytest

from mvboost import gradengine as ge
from mvboost.core import ParameterError, Rng, make_canonical_rig
from mvboost.diffusion import RefineConfig
from mvboost.metrics import perceptual_proxy
from mvboost.oracle_models import InconsistencyModel, SceneSpec
from mvboost.pipeline import (
    ConfigurationError, LossSpec, NumericalAbort, OptimConfig, build_refined_dataset, dataset_digest,
    evaluate_model, load_dataset, loss, loss_terms, orbit_poses, read_manifest, render_scene_views,
    train_boost,
)
from mvboost.reconstructor import ReconstructorConfig, forward, init_lora, init_params

SMALL = ReconstructorConfig(d_model=16, layers=1, heads=2, patch=8, resolution=32)
SPECS = [SceneSpec(seed=40 + i, splats_per_primitive=32) for i in range(3)]


@pytest.fixture(scope="module")
def base():
    return init_params(SMALL, Rng(0))


@pytest.fixture(scope="module")
def dataset(base):
    return build_refined_dataset(SPECS, InconsistencyModel(), RefineConfig(), base, seed=3)


def test_loss_zero_on_equal_and_plain_mse():
    gen = np.random.default_rng(0)
    a, b = gen.uniform(size=(2, 6, 16, 16, 3))
    assert loss(a, a, LossSpec(perceptual_resolution=16)).item() == 0.0
    mse_only = loss(a, b, LossSpec(perceptual_weight=0.0)).item()
    assert mse_only == pytest.approx(np.mean((a - b) ** 2), rel=1e-14)
    total, mse, perc = loss_terms(a, b, LossSpec(perceptual_resolution=16))
    assert total.item() == pytest.approx(mse.item() + perc.item())
    assert perc.item() == pytest.approx(np.mean([perceptual_proxy(x, y, 16) for x, y in zip(a, b)]))


def test_loss_gradient_wrt_pixels():
    gen = np.random.default_rng(1)
    x = ge.parameter(gen.uniform(0.1, 0.9, (2, 16, 16, 3)))
    target = gen.uniform(size=(2, 16, 16, 3))
    assert ge.grad_check(lambda: loss(x, target, LossSpec(perceptual_resolution=16)), [x],
                         samples=40, rng=gen) < 1e-3


def test_loss_spec_validation():
    with pytest.raises(ParameterError):
        LossSpec(0.0, 0.0)
    with pytest.raises(ParameterError):
        LossSpec(-1.0, 1.0)


def test_strength_zero_targets_are_theta_renders(base):
    pairs = build_refined_dataset(SPECS[:1], InconsistencyModel(), RefineConfig(strength=0.0), base, seed=3)
    p = pairs[0]
    theta = forward(p.inputs, base)
    assert np.array_equal(p.targets.images, render_scene_views(theta, make_canonical_rig(), 32))


def test_dataset_replays_bit_exactly(base, dataset):
    again = build_refined_dataset(SPECS, InconsistencyModel(), RefineConfig(), base, seed=3)
    assert dataset_digest(again) == dataset_digest(dataset)
    other = build_refined_dataset(SPECS, InconsistencyModel(), RefineConfig(), base, seed=4)
    assert dataset_digest(other) != dataset_digest(dataset)


def test_dataset_requires_base():
    with pytest.raises(ConfigurationError):
        build_refined_dataset(SPECS, InconsistencyModel(), RefineConfig(), None)


def test_dataset_persistence_and_resume(tmp_path, base, dataset):
    out = tmp_path / "ds"
    build_refined_dataset(SPECS[:2], InconsistencyModel(), RefineConfig(), base, out, seed=3, config_hash="abc")
    info = read_manifest(out)
    assert info["config_hash"] == "abc" and info["done"] == {0: 40, 1: 41}
    # simulate a crash after two scenes: a resumed run must not recompute them
    stamp = (out / "scene_00000" / "views.npz").stat().st_mtime_ns
    full = build_refined_dataset(SPECS, InconsistencyModel(), RefineConfig(), base, out, seed=3, config_hash="abc")
    assert (out / "scene_00000" / "views.npz").stat().st_mtime_ns == stamp
    assert dataset_digest(full) == dataset_digest(dataset)
    assert dataset_digest(load_dataset(out)) == dataset_digest(dataset)
    assert (out / "scene_00002" / "targets_front.png").exists()


def test_train_zero_steps_keeps_identity(base, dataset):
    lora = init_lora(SMALL, Rng(1), rank=4)
    out, log = train_boost(dataset, base, lora, OptimConfig(), 0)
    assert all(np.array_equal(out.arrays[k], v) for k, v in lora.arrays.items())
    assert log.rows == []


def test_train_freezes_base_and_is_deterministic(base, dataset):
    digest = base.digest()
    lora = init_lora(SMALL, Rng(1), rank=4)
    a, log_a = train_boost(dataset, base, lora, OptimConfig(lr=1e-2, seed=5), 4, LossSpec(perceptual_resolution=16))
    b, log_b = train_boost(dataset, base, lora, OptimConfig(lr=1e-2, seed=5), 4, LossSpec(perceptual_resolution=16))
    assert base.digest() == digest
    assert log_a.rows == log_b.rows and len(log_a.rows) == 4
    assert any(np.any(a.arrays[k] != 0) for k in a.arrays if k.endswith(".B"))
    # the input adapter is not modified in place
    assert all(np.all(lora.arrays[k] == 0) for k in lora.arrays if k.endswith(".B"))


def test_train_log_csv(tmp_path, base, dataset):
    _, log = train_boost(dataset, base, None, OptimConfig(), 2, LossSpec(perceptual_resolution=16))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,mse,perceptual" and len(lines) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nan(base, dataset):
    lora = init_lora(SMALL, Rng(1), rank=4)
    lora.arrays["block0.q.B"][:] = np.nan
    with pytest.raises(NumericalAbort, match="scene_seed"):
        train_boost(dataset, base, lora, OptimConfig(), 1)


def test_evaluate_model_rows(base, dataset):
    rows = evaluate_model(dataset[:2], base, None, orbit_poses(4))
    assert [r.scene_id for r in rows] == [0, 1]
    for r in rows:
        assert 0 < r.psnr < 99 and -1 <= r.ssim <= 1 and r.perc >= 0 and r.cd > 0 and 0 <= r.fscore <= 1


def test_orbit_poses():
    poses = orbit_poses(24)
    assert len(poses) == 24 and poses[1].azimuth == 15.0 and all(p.elevation == 0 for p in poses)
