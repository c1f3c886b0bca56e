"""Synthetic stand-ins for ground truth and for the pretrained multi-view
diffusion model: a procedural scene generator, an inconsistent multi-view
generator and an oracle denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import (CanonicalRig, GaussianScene, MultiViewSet, ParameterError, Rng,
                   make_canonical_rig)
from .diffusion import NoiseSchedule
from .renderer import Rasterization, quat_to_rotmat

PRIMITIVE_KINDS = ("sphere_cluster", "box_cluster", "torus_ring")
DEFAULT_PALETTE = (
    (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.25, 0.70, 0.30), (0.95, 0.75, 0.15),
    (0.60, 0.30, 0.75), (0.15, 0.15, 0.20), (0.90, 0.50, 0.70), (0.45, 0.30, 0.15),
)
SCENE_BOUND = 0.9


@dataclass(frozen=True)
class SceneSpec:
    primitive_count: int = 3
    kinds: tuple[str, ...] = PRIMITIVE_KINDS
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    seed: int = 0
    splats_per_primitive: int = 96

    def __post_init__(self):
        if self.primitive_count < 1:
            raise ParameterError("primitive_count must be >= 1")
        bad = set(self.kinds) - set(PRIMITIVE_KINDS)
        if bad or not self.kinds:
            raise ParameterError(f"unknown primitive kinds {sorted(bad)}")
        total = self.primitive_count * self.splats_per_primitive
        if not 64 <= total <= 4096:
            raise ParameterError(f"scene would hold {total} splats, outside [64, 4096]")
        if not self.palette:
            raise ParameterError("palette is empty")


def _random_quats(gen, n):
    q = gen.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _frame_quats(normals):
    """Quaternions whose local z axis is aligned with the given unit normals."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    c = normals @ z
    q = np.concatenate([(1.0 + c)[:, None], axis], axis=1)
    flip = (1.0 + c) < 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _primitive(kind, gen, count, size):
    """Surface samples (points, normals) of a unit-placed primitive of the given size."""
    if kind == "sphere_cluster":
        n = gen.standard_normal((count, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return size * n, n
    if kind == "box_cluster":
        half = size * gen.uniform(0.5, 1.0, 3)
        area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axis = gen.choice(3, count, p=area / area.sum())
        sign = gen.choice([-1.0, 1.0], count)
        pts = gen.uniform(-1, 1, (count, 3)) * half
        pts[np.arange(count), axis] = sign * half[axis]
        nrm = np.zeros((count, 3))
        nrm[np.arange(count), axis] = sign
        return pts, nrm
    # torus_ring
    major, minor = size * 0.75, size * 0.25
    u = gen.uniform(0, 2 * np.pi, count)
    v = gen.uniform(0, 2 * np.pi, count)
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], 1)
    ring = np.stack([major * np.cos(u), major * np.sin(u), np.zeros(count)], 1)
    pts = ring + minor * nrm
    # random orientation of the ring
    R = quat_to_rotmat(_random_quats(gen, 1))[0]
    return pts @ R.T, nrm @ R.T


def _build_scene(spec: SceneSpec, gen) -> GaussianScene:
    light = np.array([0.4, 0.8, 0.45])
    light /= np.linalg.norm(light)
    parts = []
    for _ in range(spec.primitive_count):
        kind = spec.kinds[gen.integers(len(spec.kinds))]
        size = gen.uniform(0.22, 0.4)
        n = spec.splats_per_primitive
        pts, nrm = _primitive(kind, gen, n, size)
        flat = size * gen.uniform(0.35, 0.5)
        scales = np.stack([flat * gen.uniform(0.8, 1.2, n), flat * gen.uniform(0.8, 1.2, n),
                           np.full(n, 0.25 * flat)], 1)
        reach = np.abs(pts).max(axis=0) + scales.max()
        lo, hi = -SCENE_BOUND + reach, SCENE_BOUND - reach
        center = gen.uniform(np.minimum(lo, 0), np.maximum(hi, 0))
        base = np.asarray(spec.palette[gen.integers(len(spec.palette))], dtype=np.float64)
        shade = 0.7 + 0.3 * np.clip(nrm @ light, -1, 1)
        colors = np.clip(base * shade[:, None] + 0.04 * gen.standard_normal((n, 3)), 0, 1)
        parts.append(GaussianScene(np.clip(pts + center, -SCENE_BOUND, SCENE_BOUND),
                                   _frame_quats(nrm), scales,
                                   gen.uniform(2.0, 4.0, n), colors))
    return GaussianScene.concat(parts)


def visible_from_rig(scene: GaussianScene, rig: CanonicalRig | None = None,
                     resolution: int = 32, min_coverage: float = 0.01) -> bool:
    rig = rig or make_canonical_rig()
    for pose in rig:
        r = Rasterization(scene, pose, resolution, 1.0)
        if np.mean(r.alpha > 0.5) <= min_coverage:
            return False
    return True


def generate_scene(spec: SceneSpec) -> GaussianScene:
    """Deterministic procedural scene; retried with a derived stream until at
    least 1% of every canonical view is covered."""
    for attempt in range(100):
        gen = Rng(spec.seed).split(attempt).generator()
        scene = _build_scene(spec, gen)
        if visible_from_rig(scene):
            return scene
    raise RuntimeError(f"could not generate a visible scene for seed {spec.seed}")


# ---------------------------------------------------------------------------
# Inconsistent multi-view generation

@dataclass(frozen=True)
class InconsistencyModel:
    color_shift_amp: float = 0.08
    warp_amp: float = 3.0
    silhouette_noise_amp: float = 0.05
    per_view_seed_offsets: tuple[int, ...] = (0, 1, 2, 3, 4, 5)

    def __post_init__(self):
        if min(self.color_shift_amp, self.warp_amp, self.silhouette_noise_amp) < 0:
            raise ParameterError("inconsistency amplitudes must be >= 0")


def smooth_field(gen: np.random.Generator, shape: tuple[int, int], channels: int,
                 octaves: int = 2) -> np.ndarray:
    """Sum of random low-frequency sinusoids, peak-normalized to [-1, 1]."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    yy, xx = yy / H, xx / W
    out = np.zeros((H, W, channels))
    for c in range(channels):
        for k in range(1, octaves + 1):
            amp = gen.uniform(-1, 1) / k
            fx, fy = k * gen.uniform(0.5, 1.0, 2)
            px, py = gen.uniform(0, 1, 2)
            out[..., c] += amp * np.sin(2 * np.pi * (fx * xx + px)) * np.cos(2 * np.pi * (fy * yy + py))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _perturb_view(image, alpha, bg, inc: InconsistencyModel, gen):
    H, W, _ = image.shape
    img, a = image, alpha
    if inc.silhouette_noise_amp > 0:
        # premultiplied foreground, spread by normalized convolution so dilated
        # pixels inherit nearby colors
        fg = img - (1.0 - a)[..., None] * bg
        blur_a = gaussian_filter(a, 1.0)
        blur_fg = np.stack([gaussian_filter(fg[..., c], 1.0) for c in range(3)], -1)
        color = np.where(a[..., None] > 1e-3, fg / np.maximum(a, 1e-3)[..., None],
                         blur_fg / np.maximum(blur_a, 1e-6)[..., None])
        band = np.clip(4.0 * blur_a * (1.0 - blur_a), 0, 1)
        f = smooth_field(gen, (H, W), 1)[..., 0]
        a_new = np.clip(a + inc.silhouette_noise_amp * 10.0 * f * band, 0, 1)
        img = a_new[..., None] * np.clip(color, 0, 1) + (1.0 - a_new)[..., None] * bg
        a = a_new
    if inc.warp_amp > 0:
        disp = inc.warp_amp * smooth_field(gen, (H, W), 2)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        coords = [yy + disp[..., 1], xx + disp[..., 0]]
        img = np.stack([map_coordinates(img[..., c], coords, order=1, mode="nearest")
                        for c in range(3)], -1)
        a = map_coordinates(a, coords, order=1, mode="nearest")
    if inc.color_shift_amp > 0:
        shift = gen.uniform(-inc.color_shift_amp, inc.color_shift_amp, 3)
        img = img + a[..., None] * shift
    return np.clip(img, 0.0, 1.0)


def gt_views(scene: GaussianScene, rig, resolution: int, background=1.0) -> MultiViewSet:
    imgs = np.stack([Rasterization(scene, p, resolution, background).image for p in rig])
    return MultiViewSet(list(rig), imgs, "rendered")


def mv_generate(condition: np.ndarray, gt_scene: GaussianScene, rig: CanonicalRig,
                inc: InconsistencyModel, rng: Rng, background=1.0) -> MultiViewSet:
    """Render the ground truth from the rig and perturb every non-front view
    independently.  The front view is replaced by the condition."""
    condition = np.asarray(condition, dtype=np.float64)
    res = condition.shape[0]
    if condition.shape != (res, res, 3):
        raise ParameterError(f"condition must be square RGB, got {condition.shape}")
    if len(inc.per_view_seed_offsets) < len(rig):
        raise ParameterError("need one seed offset per rig view")
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    views = []
    for i, pose in enumerate(rig):
        r = Rasterization(gt_scene, pose, res, bg)
        if pose.label == "front":
            views.append(condition.copy())
            continue
        gen = rng.split(inc.per_view_seed_offsets[i]).generator()
        views.append(_perturb_view(r.image, r.alpha, bg, inc, gen))
    return MultiViewSet(list(rig), np.stack(views), "generated", condition)


# ---------------------------------------------------------------------------
# Oracle denoiser

def prior_weight(t: int, schedule: NoiseSchedule) -> float:
    """gamma_t = sigma_t^2: reliance on the learned prior."""
    return float(schedule.sigma[t] ** 2)


def hallucination_gate(t: int, schedule: NoiseSchedule, snr0: float | None) -> float:
    """rho_t = snr0 / (snr0 + alpha_t^2 / sigma_t^2); ~1 once the signal is gone."""
    if snr0 is None:
        return 1.0
    a, s = schedule.alpha[t], schedule.sigma[t]
    return float(snr0 / (snr0 + a * a / (s * s)))


def oracle_denoise(noised: MultiViewSet, condition: np.ndarray, t: int, schedule: NoiseSchedule,
                   gt: MultiViewSet, rng: Rng, eta: float = 0.05, snr0: float | None = 1e-4,
                   noise: np.ndarray | None = None) -> MultiViewSet:
    """x0_hat = (1 - gamma) * S + gamma * (gt + h) per view.

    S is the signal estimate: clip((x_t - sigma_t * noise) / alpha_t) when the
    noise component is known, else clip(x_t / alpha_t).  h is a smooth
    per-view field of peak amplitude eta * gamma * rho, drawn from ``rng``.
    """
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"oracle_denoise needs t in [1, {schedule.T}], got {t}")
    x = noised.images
    if gt.images.shape != x.shape:
        raise ParameterError("ground-truth views do not match the noised views")
    a, s = schedule.alpha[t], schedule.sigma[t]
    signal = x if noise is None else x - s * noise
    S = np.clip(signal / a, 0.0, 1.0)
    gamma = prior_weight(t, schedule)
    amp = eta * gamma * hallucination_gate(t, schedule, snr0)
    out = np.empty_like(S)
    H, W = x.shape[1:3]
    for i in range(len(x)):
        prior = gt.images[i]
        if amp > 0:
            prior = prior + amp * smooth_field(rng.split(i).generator(), (H, W), 3)
        out[i] = (1.0 - gamma) * S[i] + gamma * prior
    return noised.with_images(np.clip(out, 0.0, 1.0), "refined")


@dataclass
class OracleDenoiser:
    """Denoiser-protocol adapter around oracle_denoise; each call draws its
    hallucination from a fresh child stream."""

    gt: MultiViewSet
    rng: Rng
    eta: float = 0.05
    snr0: float | None = 1e-4
    calls: int = field(default=0)

    def __call__(self, noised, condition, t, schedule, noise=None):
        mvs = MultiViewSet(list(self.gt.poses), noised, "noised")
        out = oracle_denoise(mvs, condition, t, schedule, self.gt, self.rng.split(self.calls),
                             self.eta, self.snr0, noise)
        self.calls += 1
        return out.images
