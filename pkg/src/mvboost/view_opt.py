"""Input view optimization: find the camera pose that best explains the
input image, then fit a visibility-gated per-splat residual so the render at
that pose matches the input while other views stay close to unchanged."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradengine as ge
from .core import CameraPose, GaussianScene, logit, make_canonical_rig
from .metrics import perceptual_proxy, perceptual_proxy_tensor, psnr
from .renderer import Rasterization, render_op

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
MEAN_BOUND = 0.05
LOGIT_DELTA_BOUND = 4.0
COLOR_EPS = 1e-6


@dataclass(frozen=True)
class SearchConfig:
    azimuth_step: float = 15.0
    elevations: tuple[float, ...] = (-20.0, 0.0, 20.0)
    tolerance: float = 0.5
    extent: float = 1.2
    proxy_resolution: int | None = None       # default: half the image size


@dataclass
class PoseSearchResult:
    pose: CameraPose
    distance: float
    trace: list = field(default_factory=list)     # (pose, distance) in evaluation order


def _proxy_res(cfg_res, image_res):
    return cfg_res or max(image_res // 2, 8)


def pose_distance(scene: GaussianScene, pose: CameraPose, input_view: np.ndarray, proxy_res: int) -> float:
    img = Rasterization(scene, pose, input_view.shape[0], 1.0).image
    return perceptual_proxy(img, input_view, proxy_res)


def pose_search(scene: GaussianScene, input_view: np.ndarray, cfg: SearchConfig = SearchConfig()) -> PoseSearchResult:
    """Coarse azimuth x elevation grid, then golden-section search on azimuth
    around the best grid cell."""
    input_view = np.asarray(input_view, dtype=np.float64)
    pres = _proxy_res(cfg.proxy_resolution, input_view.shape[0])
    trace = []

    def evaluate(az, el):
        pose = CameraPose(az, el, cfg.extent)
        d = pose_distance(scene, pose, input_view, pres)
        trace.append((pose, d))
        return d

    for el in cfg.elevations:
        for az in np.arange(0.0, 360.0, cfg.azimuth_step):
            evaluate(float(az), el)
    best_pose, _ = min(trace, key=lambda pd: pd[1])
    el = best_pose.elevation
    a, b = best_pose.azimuth - cfg.azimuth_step, best_pose.azimuth + cfg.azimuth_step
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = evaluate(c, el), evaluate(d, el)
    while b - a > cfg.tolerance:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = evaluate(c, el)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = evaluate(d, el)
    evaluate(0.5 * (a + b), el)
    pose, dist = min(trace, key=lambda pd: pd[1])
    return PoseSearchResult(pose, dist, trace)


def visibility_weights(scene: GaussianScene, pose: CameraPose, resolution: int) -> np.ndarray:
    """Per-splat gate in [0, 1]: the splat's compositing weight at ``pose``
    summed over pixels, divided by the weight it would have with nothing in
    front of it."""
    return np.clip(Rasterization(scene, pose, resolution, 1.0).splat_visibility(), 0.0, 1.0)


@dataclass
class ResidualField:
    d_color: np.ndarray
    d_opacity_logit: np.ndarray
    d_mean: np.ndarray
    gate: np.ndarray

    @classmethod
    def zeros(cls, gate: np.ndarray) -> "ResidualField":
        n = len(gate)
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.asarray(gate, dtype=np.float64))

    def arrays(self):
        return self.d_color, self.d_opacity_logit, self.d_mean

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum((a * self.gate.reshape(-1, *[1] * (a.ndim - 1))) ** 2)
                                 for a in self.arrays())))


def _color_logit(colors):
    return logit(np.clip(colors, COLOR_EPS, 1.0 - COLOR_EPS))


def apply_residual_tensors(scene: GaussianScene, d_color, d_ol, d_mean, gate: np.ndarray):
    """Gated residual applied through range-safe maps; returns the five splat tensors."""
    g = gate[:, None]
    base = _color_logit(scene.colors)
    base_sig = 0.5 * (1.0 + np.tanh(0.5 * base))
    colors = (ge.as_tensor(base) + d_color * g).sigmoid() - base_sig + scene.colors
    ol = (d_ol * (1.0 / LOGIT_DELTA_BOUND)).tanh() * (LOGIT_DELTA_BOUND * gate) + scene.opacity_logits
    means = (d_mean.tanh() * MEAN_BOUND) * g + scene.means
    return means, ge.Tensor(scene.rotations), ge.Tensor(scene.scales), ol, colors


def apply_residual(scene: GaussianScene, field_: ResidualField) -> GaussianScene:
    means, rot, sc, ol, colors = apply_residual_tensors(
        scene, ge.Tensor(field_.d_color), ge.Tensor(field_.d_opacity_logit), ge.Tensor(field_.d_mean),
        field_.gate)
    return GaussianScene(means.data, rot.data.copy(), sc.data.copy(), ol.data, np.clip(colors.data, 0.0, 1.0))


def nearest_canonical(pose: CameraPose, rig) -> int:
    """Index of the rig pose whose viewing direction is closest to ``pose``."""
    fwd = pose.basis()[2]
    return int(np.argmax([np.dot(fwd, p.basis()[2]) for p in rig]))


@dataclass
class ResidualReport:
    pose: CameraPose
    dist_before: float
    dist_after: float
    psnr_drift: dict            # label -> PSNR change at the other canonical poses
    iterations: int
    losses: list = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pose_az", "pose_el", "dist_before", "dist_after", "psnr_drift_per_view"])
            drift = ";".join(f"{k}:{v:.6f}" for k, v in self.psnr_drift.items())
            w.writerow([f"{self.pose.azimuth:.6f}", f"{self.pose.elevation:.6f}",
                        repr(self.dist_before), repr(self.dist_after), drift])


def optimize_residual(scene: GaussianScene, pose_opt: CameraPose, input_view: np.ndarray,
                      iters: int = 200, lr: float = 0.05, reference_views: np.ndarray | None = None,
                      proxy_resolution: int | None = None, patience: int = 50):
    """Adam on a gated ResidualField minimizing the proxy at ``pose_opt``.

    Returns (field, updated scene, report).  With ``reference_views`` (one
    image per canonical pose) the report's drift is PSNR(after, ref) -
    PSNR(before, ref); without them the report holds PSNR(after, before), the
    fidelity of each other view to its frozen render (99 = unchanged).
    """
    input_view = np.asarray(input_view, dtype=np.float64)
    res = input_view.shape[0]
    pres = _proxy_res(proxy_resolution, res)
    gate = visibility_weights(scene, pose_opt, res)
    field_ = ResidualField.zeros(gate)
    params = [ge.Tensor(a, requires_grad=True) for a in field_.arrays()]
    state = ge.AdamState(lr=lr)

    def objective():
        tensors = apply_residual_tensors(scene, *params, gate)
        return perceptual_proxy_tensor(render_op(*tensors, pose_opt, res), input_view, pres)

    before = objective().item()
    best, best_arrays = before, [a.copy() for a in field_.arrays()]
    losses, worse, prev = [], 0, before
    for it in range(iters):
        for p in params:
            p.zero_grad()
        value = objective()
        ge.backward(value)
        v = value.item()
        losses.append(v)
        if v < best:
            best, best_arrays = v, [a.copy() for a in field_.arrays()]
        worse = worse + 1 if v > prev else 0
        prev = v
        if worse >= patience:
            break
        ge.adam_step(list(field_.arrays()), [p.grad for p in params], state)
    final = objective().item()
    if final < best:
        best, best_arrays = final, [a.copy() for a in field_.arrays()]
    field_ = ResidualField(*best_arrays, gate)
    updated = apply_residual(scene, field_)
    drift = {}
    rig = make_canonical_rig(pose_opt.ortho_half_extent)
    skip = nearest_canonical(pose_opt, rig)
    for i, pose in enumerate(rig):
        if i == skip:
            continue
        a = Rasterization(scene, pose, res, 1.0).image
        b = Rasterization(updated, pose, res, 1.0).image
        if reference_views is not None:
            drift[pose.label] = psnr(b, reference_views[i]) - psnr(a, reference_views[i])
        else:
            drift[pose.label] = psnr(b, a)
    report = ResidualReport(pose_opt, before, best, drift, len(losses), losses)
    return field_, updated, report
