import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvboost.core import (
    CameraPose, GaussianScene, MultiViewSet, ParameterError, Rng, is_canonical, load_png, load_scene,
    logit, make_canonical_rig, sample_standard_normal, save_png, save_scene, sigmoid, validate_image,
)

from conftest import random_scene


def test_rig_layout():
    rig = make_canonical_rig()
    assert [p.azimuth for p in rig] == [0.0, 45.0, 90.0, 180.0, 270.0, 315.0]
    assert rig.labels == ["front", "front_right", "right", "back", "left", "front_left"]
    assert all(p.elevation == 0.0 and p.ortho_half_extent == 1.2 for p in rig)
    assert is_canonical(list(rig))
    assert not is_canonical(list(rig)[:5])


def test_rig_rejects_bad_extent():
    with pytest.raises(ParameterError):
        make_canonical_rig(0.0)


def test_pose_basis_orthonormal_and_front_looks_down_minus_z():
    r, u, f = CameraPose(0.0).basis()
    np.testing.assert_allclose(f, [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(r, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(u, [0, 1, 0], atol=1e-15)
    for az, el in [(37.0, 12.0), (200.0, -20.0)]:
        b = np.stack(CameraPose(az, el).basis())
        np.testing.assert_allclose(b @ b.T, np.eye(3), atol=1e-12)


def test_validate_image():
    validate_image(np.zeros((4, 4, 3)))
    for bad in (np.zeros((4, 4)), np.full((2, 2, 3), 1.5), np.full((2, 2, 3), np.nan)):
        with pytest.raises(ParameterError):
            validate_image(bad)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (8, 6, 3)) / 255.0
    save_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)


def test_multiview_set_checks_shapes():
    rig = make_canonical_rig()
    mvs = MultiViewSet(list(rig), np.zeros((6, 8, 8, 3)), "rendered")
    assert mvs.resolution == (8, 8) and len(mvs) == 6
    with pytest.raises(ParameterError):
        MultiViewSet(list(rig), np.zeros((5, 8, 8, 3)), "rendered")
    with pytest.raises(ParameterError):
        MultiViewSet(list(rig), np.zeros((6, 8, 8, 3)), "bogus")


def test_scene_roundtrip_exact(tmp_path, gen):
    scene = random_scene(gen, 17)
    save_scene(tmp_path / "s.mvbgs", scene)
    back = load_scene(tmp_path / "s.mvbgs")
    for a, b in zip(scene.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "s.mvbgs").read_text().startswith("MVB-GS v1 17\n")


def test_scene_file_count_mismatch(tmp_path):
    (tmp_path / "s.mvbgs").write_text("MVB-GS v1 2\n" + " ".join(["0.5"] * 14) + "\n")
    with pytest.raises(ParameterError):
        load_scene(tmp_path / "s.mvbgs")


def test_scene_invariants(gen):
    scene = random_scene(gen, 5)
    scene.check()
    bad = scene.copy()
    bad.scales[0, 0] = 0.0
    with pytest.raises(ParameterError):
        bad.check()
    bad = scene.copy()
    bad.rotations[1] *= 2
    with pytest.raises(ParameterError):
        bad.check()
    GaussianScene.empty().check()


def test_rng_streams_are_deterministic_and_independent():
    a = sample_standard_normal(Rng(3).split(1), 5)
    np.testing.assert_array_equal(a, sample_standard_normal(Rng(3).split(1), 5))
    assert not np.array_equal(a, sample_standard_normal(Rng(3).split(2), 5))
    assert not np.array_equal(a, sample_standard_normal(Rng(4).split(1), 5))
    assert Rng(3).split(1, 2) == Rng(3).split(1).split(2)


@given(st.floats(-30, 30))
def test_logit_inverts_sigmoid(x):
    assert abs(logit(sigmoid(x)) - x) < 1e-6 * max(1.0, np.exp(abs(x)))


@settings(max_examples=30)
@given(st.floats(0, 359.9), st.floats(-60, 60))
def test_embedding_distinguishes_poses(az, el):
    e = CameraPose(az, el).embedding()
    assert e.shape == (6,) and np.all(np.isfinite(e))
    assert not np.allclose(e, CameraPose((az + 90) % 360, el).embedding())
