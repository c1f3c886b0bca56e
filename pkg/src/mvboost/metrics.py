"""Image and geometry metrics.

The perceptual proxy stands in for LPIPS: it is written with engine ops (all
filtering is done with small matrices) so the same code serves as a metric
and as a differentiable training loss.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import gradengine as ge
from .core import GaussianScene, ParameterError, Rng
from .renderer import quat_to_rotmat

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
K1, K2 = 0.01, 0.03
C1, C2 = K1 ** 2, K2 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


@lru_cache(maxsize=None)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=None)
def _valid_filter(n: int, size: int, sigma: float) -> np.ndarray:
    w = gaussian_window(size, sigma)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i:i + size] = w
    return m


def ssim(a, b) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), valid mode."""
    a, b = _check_pair(a, b)
    if a.ndim != 3 or min(a.shape[:2]) < 11:
        raise ParameterError("ssim needs (H, W, 3) images with H, W >= 11")
    x, y = a @ LUMA, b @ LUMA
    Fh = _valid_filter(x.shape[0], 11, 1.5)
    Fw = _valid_filter(x.shape[1], 11, 1.5)

    def filt(z):
        return Fh @ z @ Fw.T
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Perceptual proxy

@lru_cache(maxsize=None)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-average resampling by exact overlap lengths."""
    if n_out >= n_in:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


@lru_cache(maxsize=None)
def _same_filter(n: int, taps: tuple) -> np.ndarray:
    """'same'-size correlation with boundary rows renormalized to unit sum."""
    w = np.asarray(taps)
    r = len(w) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for k, wk in enumerate(w):
            j = i + k - r
            if 0 <= j < n:
                m[i, j] = wk
    return m / m.sum(axis=1, keepdims=True)


@lru_cache(maxsize=None)
def _derivative(n: int) -> np.ndarray:
    """Central difference with clamped indices."""
    m = np.zeros((n, n))
    for i in range(n):
        m[i, min(i + 1, n - 1)] += 1.0
        m[i, max(i - 1, 0)] -= 1.0
    return m


def _blur_taps(n):
    size = min(11, n if n % 2 else n - 1)
    return tuple(gaussian_window(size, 1.5))


def _channels_first(x: ge.Tensor) -> ge.Tensor:
    nd = x.ndim
    return x.transpose(*range(nd - 3), nd - 1, nd - 3, nd - 2)


def _ssim_mean(x: ge.Tensor, y: ge.Tensor) -> ge.Tensor:
    H, W = x.shape[-2:]
    Gh = _same_filter(H, _blur_taps(H))
    Gw = _same_filter(W, _blur_taps(W)).T

    def blur(z):
        return Gh @ z @ Gw
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return (num / den).mean()


def _sobel_magnitude(x: ge.Tensor, eps: float = 1e-3) -> ge.Tensor:
    H, W = x.shape[-2:]
    Sh = _same_filter(H, (1.0, 2.0, 1.0))
    Sw = _same_filter(W, (1.0, 2.0, 1.0))
    gx = Sh @ x @ _derivative(W).T
    gy = _derivative(H) @ x @ Sw.T
    return (gx * gx + gy * gy + eps * eps).sqrt()


def perceptual_proxy_tensor(a, b, resolution: int = 32, scales: int = 3,
                            delta: float = 1e-3) -> ge.Tensor:
    """Differentiable proxy on (..., H, W, 3) inputs (Tensors or arrays).

    0.5 * (1 - mean SSIM over ``scales`` dyadic scales) plus 0.5 * mean
    Charbonnier difference of Sobel gradient magnitudes at full proxy
    resolution.  SSIM is computed per color channel.
    """
    a, b = ge.as_tensor(a), ge.as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    H, W = a.shape[-3:-1]
    Ah, Aw = area_matrix(H, min(resolution, H)), area_matrix(W, min(resolution, W))
    x = Ah @ _channels_first(a) @ Aw.T
    y = Ah @ _channels_first(b) @ Aw.T
    d = _sobel_magnitude(x) - _sobel_magnitude(y)
    edge = ((d * d + delta * delta).sqrt() - delta).mean()
    ssims = []
    for s in range(scales):
        ssims.append(_ssim_mean(x, y))
        h, w = x.shape[-2:]
        if s + 1 < scales:
            if min(h, w) < 4:
                break
            Dh, Dw = area_matrix(h, h // 2), area_matrix(w, w // 2)
            x = Dh @ x @ Dw.T
            y = Dh @ y @ Dw.T
    ms = ssims[0]
    for t in ssims[1:]:
        ms = ms + t
    ms = ms * (1.0 / len(ssims))
    return 0.5 * (1.0 - ms) + 0.5 * edge


def perceptual_proxy(a, b, resolution: int = 32) -> float:
    a, b = _check_pair(a, b)
    return perceptual_proxy_tensor(a, b, resolution).item()


# ---------------------------------------------------------------------------
# Geometry

def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ParameterError("point set is empty")
    if not np.all(np.isfinite(a)):
        raise ParameterError("point set has non-finite coordinates")
    return a


def nn_distances(a, b) -> np.ndarray:
    """Exact nearest-neighbor distance from every point of a to b."""
    a, b = _points(a), _points(b)
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer(a, b) -> float:
    return float(0.5 * (nn_distances(a, b).mean() + nn_distances(b, a).mean()))


def fscore(a, b, tau: float = 0.05) -> float:
    precision = float(np.mean(nn_distances(a, b) <= tau))
    recall = float(np.mean(nn_distances(b, a) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def normalize_points(a) -> np.ndarray:
    """Center the bounding box and scale so its largest half-extent is 1."""
    a = _points(a)
    lo, hi = a.min(axis=0), a.max(axis=0)
    ext = hi - lo
    L = ext.max()
    if L == 0:
        return a - 0.5 * (lo + hi)
    # written so the longest axis lands on exactly -1 and +1
    return (2.0 * (a - lo) - ext) / L


def sample_points_from_scene(scene: GaussianScene, count: int, rng: Rng) -> np.ndarray:
    """Draw splats with probability proportional to opacity * mean scale and
    jitter each draw by the splat's own Gaussian."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    if len(scene) == 0:
        raise ParameterError("scene is empty")
    w = scene.opacities * scene.scales.mean(axis=1)
    gen = rng.generator()
    idx = gen.choice(len(scene), size=count, p=w / w.sum())
    R = quat_to_rotmat(scene.rotations[idx])
    z = gen.standard_normal((count, 3)) * scene.scales[idx]
    return scene.means[idx] + np.einsum("nij,nj->ni", R, z)
