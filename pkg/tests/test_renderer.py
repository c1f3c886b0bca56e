import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvboost import gradengine as ge
from mvboost.core import CameraPose, GaussianScene, ParameterError
from mvboost.renderer import (
    COV_FLOOR, CUTOFF, T_MIN, Rasterization, falloff, falloff_grad, project, quat_to_rotmat, render,
    render_backward, render_op,
)

from conftest import numeric_grad, random_scene, single_splat

FRONT = CameraPose(0.0)


def reference_render(scene, pose, res, bg=1.0):
    """Pixel-by-pixel front-to-back compositing written from the definition."""
    p = project(scene, pose, res)
    order = sorted(range(len(scene)), key=lambda i: (p.depth[i], i))
    img = np.zeros((res, res, 3))
    for y in range(res):
        for x in range(res):
            T, c = 1.0, np.zeros(3)
            for i in order:
                d = np.array([x + 0.5, y + 0.5]) - p.mean2d[i]
                q = d @ p.conic[i] @ d
                if q >= CUTOFF:
                    continue
                if T < T_MIN:
                    break
                a = p.opacity[i] * falloff(q)
                c += T * a * p.color[i]
                T *= 1.0 - a
            img[y, x] = c + T * bg
    return img


def test_falloff_is_c1_at_cutoff():
    assert falloff(0.0) == pytest.approx(1.0)
    assert abs(falloff(CUTOFF - 1e-9)) < 1e-9 and falloff(CUTOFF) == 0.0
    assert abs(falloff_grad(CUTOFF - 1e-9)) < 1e-9
    q = np.linspace(0.1, 8.9, 50)
    np.testing.assert_allclose(falloff_grad(q), (falloff(q + 1e-6) - falloff(q - 1e-6)) / 2e-6, atol=1e-8)


def test_quaternion_rotmat_orthonormal():
    q = np.random.default_rng(0).standard_normal((10, 4))
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_project_isotropic_splat_at_origin():
    res, s = 32, 0.1
    p = project(single_splat(scale=s), FRONT, res)
    k = res / (2 * 1.2)
    np.testing.assert_allclose(p.mean2d[0], [16.0, 16.0])
    np.testing.assert_allclose(p.cov2d[0], np.eye(2) * ((s * k) ** 2 + COV_FLOOR), rtol=1e-12)


def test_project_rotation_about_view_axis_permutes_eigenvalues():
    s = single_splat()
    s.scales[0] = [0.2, 0.05, 0.1]
    c0 = project(s, FRONT, 32).cov2d[0]
    s.rotations[0] = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]      # 90 deg about z
    c1 = project(s, FRONT, 32).cov2d[0]
    np.testing.assert_allclose(c1, np.diag(np.diag(c0)[::-1]), atol=1e-10)


def test_front_back_mirror(gen):
    scene = random_scene(gen, 12)
    a = project(scene, CameraPose(0.0), 40).mean2d
    b = project(scene, CameraPose(180.0), 40).mean2d
    np.testing.assert_allclose(b[:, 0], 40 - a[:, 0], atol=1e-12)
    np.testing.assert_allclose(b[:, 1], a[:, 1], atol=1e-12)


def test_cov2d_positive_definite(gen):
    c = project(random_scene(gen, 50, scale=(1e-4, 0.3)), CameraPose(33.0, 10.0), 32).cov2d
    assert np.all(np.linalg.eigvalsh(c) >= COV_FLOOR - 1e-12)


def test_empty_scene_is_background():
    img = render(GaussianScene.empty(), FRONT, 8, (0.1, 0.2, 0.3))
    assert np.array_equal(img, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))


def test_opaque_centered_splat():
    half_pixel = 0.5 * 2.4 / 32              # centre the splat on pixel (16, 16)
    s = single_splat(mean=(half_pixel, -half_pixel, 0.0), scale=0.3, logit=20.0, color=(0.2, 0.4, 0.6))
    img = render(s, FRONT, 32, 1.0)
    np.testing.assert_allclose(img[16, 16], [0.2, 0.4, 0.6], atol=1e-3)
    np.testing.assert_array_equal(img[0, 0], [1.0, 1.0, 1.0])


def test_occlusion_by_opaque_near_splat():
    near = single_splat(mean=(0, 0, 0.5), scale=1.5, logit=30.0, color=(0.9, 0.1, 0.1))
    imgs = []
    for col in [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)]:
        far = single_splat(mean=(0, 0, -0.5), scale=0.05, logit=30.0, color=col)
        imgs.append(render(GaussianScene.concat([near, far]), FRONT, 32))
    r = Rasterization(near, FRONT, 32, 1.0)
    # the far splat can only leak through the near splat's transmittance
    assert np.all(np.abs(imgs[0] - imgs[1]).max(-1) <= 1.0 - r.alpha + 1e-12)
    assert np.abs(imgs[0] - imgs[1]).max() < 1e-3


def test_matches_reference_renderer():
    gen = np.random.default_rng(11)
    for k in range(4):
        scene = random_scene(gen, 15, scale=(0.05, 0.3))
        scene.opacity_logits[:] = gen.uniform(1, 6, 15)       # dense enough to hit T_MIN
        pose = CameraPose(gen.uniform(0, 360), gen.uniform(-30, 30))
        np.testing.assert_allclose(render(scene, pose, 16, 0.7), reference_render(scene, pose, 16, 0.7),
                                   atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 359), st.floats(0, 1))
def test_image_in_unit_range(seed, az, bg):
    r = Rasterization(random_scene(np.random.default_rng(seed), 20), CameraPose(az), 16, bg)
    assert r.image.min() >= -1e-12 and r.image.max() <= 1 + 1e-12
    assert r.alpha.min() >= 0 and r.alpha.max() <= 1


def test_zero_image_gradient_gives_zero_grads(gen):
    g = render_backward(random_scene(gen, 10), FRONT, 16, 1.0, np.zeros((16, 16, 3)))
    assert all(np.all(a == 0) for a in g.arrays())


def test_color_gradient_single_splat():
    s = single_splat(scale=0.2, logit=1.0)
    g = render_backward(s, FRONT, 16, 1.0, np.full((16, 16, 3), 1.0 / (16 * 16 * 3)))
    fd = numeric_grad(lambda: render(s, FRONT, 16).mean(), s.colors, h=1e-4)
    np.testing.assert_allclose(g.colors, fd, rtol=1e-3)


def test_offscreen_splat_has_no_mean_gradient():
    s = GaussianScene.concat([single_splat(), single_splat(mean=(5.0, 0, 0))])
    g = render_backward(s, FRONT, 16, 1.0, np.ones((16, 16, 3)))
    assert np.abs(g.means[1]).max() < 1e-10


def test_backward_matches_finite_differences():
    gen = np.random.default_rng(7)
    for _ in range(5):
        scene = random_scene(gen, 4, scale=(0.08, 0.25))
        pose = CameraPose(gen.uniform(0, 360), gen.uniform(-20, 20))
        w = gen.standard_normal((16, 16, 3))
        r = Rasterization(scene, pose, 16, 0.5)
        if r.threshold_margin() < 1e-4:
            continue
        g = r.backward(w)
        for arr, ga in zip(scene.arrays(), g.arrays()):
            fd = numeric_grad(lambda: np.sum(render(scene, pose, 16, 0.5) * w), arr, h=1e-6)
            np.testing.assert_allclose(ga, fd, rtol=1e-4, atol=1e-6)


def test_render_op_composes_with_engine(gen):
    scene = random_scene(gen, 5)
    ps = [ge.parameter(a.copy()) for a in scene.arrays()]
    target = gen.uniform(size=(16, 16, 3))
    err = ge.grad_check(lambda: ((render_op(*ps, FRONT, 16) - target) ** 2).mean(), ps)
    assert err < 1e-3


def test_backward_shape_contract(gen):
    with pytest.raises(ParameterError):
        render_backward(random_scene(gen, 3), FRONT, 8, 1.0, np.zeros((4, 4, 3)))


def test_splat_weights_sum_compositing_weights(gen):
    scene = random_scene(gen, 10)
    r = Rasterization(scene, CameraPose(20.0), 16, 1.0)
    sid, pix, w = r.pair_weights()
    img = np.zeros((256, 3))
    np.add.at(img, pix, w[:, None] * scene.colors[sid])
    img += (1 - r.alpha.reshape(-1))[:, None]
    np.testing.assert_allclose(img.reshape(16, 16, 3), r.image, atol=1e-12)
    np.testing.assert_allclose(r.splat_weights().sum(), r.alpha.sum(), atol=1e-9)
