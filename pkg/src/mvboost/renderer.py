"""Differentiable orthographic Gaussian splatting.

Splats are projected with the constant orthographic Jacobian, sorted by depth
(index breaks ties) and alpha-composited front to back per pixel.  The
backward pass is a hand-written adjoint of the same computation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradengine as ge
from .core import CameraPose, GaussianScene, ParameterError, sigmoid

COV_FLOOR = 0.3          # pixel^2 added to the projected covariance diagonal
CUTOFF = 9.0             # squared Mahalanobis radius of the splat support
T_MIN = 1e-4             # compositing stops once transmittance drops below this

_C = np.exp(-0.5 * CUTOFF)
_NORM = 1.0 - 5.5 * _C


def falloff(q):
    """Gaussian falloff exp(-q/2) with a linear correction so that value and
    slope both reach zero at q = 9; equals 1 at the splat center."""
    q = np.asarray(q)
    val = (np.exp(-0.5 * q) - _C * (5.5 - 0.5 * q)) / _NORM
    return np.where(q < CUTOFF, val, 0.0)


def falloff_grad(q):
    q = np.asarray(q)
    val = (-0.5 * np.exp(-0.5 * q) + 0.5 * _C) / _NORM
    return np.where(q < CUTOFF, val, 0.0)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) quaternions (w,x,y,z), normalized internally -> (N,3,3)."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def _rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


@dataclass
class Projection:
    """Per-splat screen-space quantities for one pose (arrays over splats)."""

    mean2d: np.ndarray      # (N,2) pixel coordinates (x right, y down)
    cov2d: np.ndarray       # (N,2,2)
    conic: np.ndarray       # (N,2,2) inverse of cov2d
    depth: np.ndarray       # (N,) signed distance along the view axis
    color: np.ndarray       # (N,3)
    opacity: np.ndarray     # (N,)
    radius: np.ndarray      # (N,) pixel radius of the truncated support
    jacobian: np.ndarray    # (2,3)
    rotmat: np.ndarray      # (N,3,3)

    def __len__(self):
        return len(self.depth)

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy",
                        "depth", "r", "g", "b", "opacity"])
            for i in range(len(self)):
                w.writerow([i, *self.mean2d[i], self.cov2d[i, 0, 0], self.cov2d[i, 0, 1],
                            self.cov2d[i, 1, 1], self.depth[i], *self.color[i], self.opacity[i]])


def project(scene: GaussianScene, pose: CameraPose, resolution: int) -> Projection:
    if resolution < 1:
        raise ParameterError("resolution must be >= 1")
    right, up, forward = pose.basis()
    k = resolution / (2.0 * pose.ortho_half_extent)
    J = k * np.stack([right, -up])
    R = quat_to_rotmat(scene.rotations) if len(scene) else np.zeros((0, 3, 3))
    M = R * scene.scales[:, None, :]
    sigma3 = M @ np.swapaxes(M, 1, 2)
    cov = J @ sigma3 @ J.T + COV_FLOOR * np.eye(2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.stack([np.stack([cov[:, 1, 1], -cov[:, 0, 1]], -1),
                      np.stack([-cov[:, 1, 0], cov[:, 0, 0]], -1)], axis=1) / det[:, None, None]
    half = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = half + np.sqrt(np.maximum(half ** 2 - det, 0.0))
    mean2d = np.stack([k * scene.means @ right, -k * scene.means @ up], -1) + 0.5 * resolution
    return Projection(
        mean2d=mean2d, cov2d=cov, conic=conic, depth=scene.means @ forward,
        color=scene.colors, opacity=sigmoid(scene.opacity_logits),
        radius=np.sqrt(CUTOFF * lam), jacobian=J, rotmat=R,
    )


@dataclass
class SceneGrads:
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def arrays(self):
        return self.means, self.rotations, self.scales, self.opacity_logits, self.colors

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


class Rasterization:
    """Forward compositing state for one (scene, pose); reusable for backward."""

    def __init__(self, scene: GaussianScene, pose: CameraPose, resolution: int, background):
        self.scene = scene
        self.pose = pose
        self.res = int(resolution)
        self.bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
        self.proj = project(scene, pose, self.res)
        self._composite()

    def _pairs(self, order):
        """Pixel-splat pairs inside each splat's support bounding box, with
        splats visited in ``order`` (front to back)."""
        p, res = self.proj, self.res
        if len(order) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
        # exact bounding box of the ellipse q < CUTOFF
        ext = np.sqrt(CUTOFF * np.stack([p.cov2d[:, 0, 0], p.cov2d[:, 1, 1]], -1))[order]
        m = p.mean2d[order]
        lo = np.clip(np.ceil(m - ext - 0.5), 0, res).astype(np.int64)
        hi = np.clip(np.floor(m + ext - 0.5), -1, res - 1).astype(np.int64)
        wx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
        hy = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
        cnt = wx * hy
        rows = np.repeat(np.arange(len(order)), cnt)
        local = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        w = wx[rows]
        px = lo[rows, 0] + local % w
        py = lo[rows, 1] + local // w
        return order[rows], px, py

    def _composite(self):
        p, res = self.proj, self.res
        n, npix = len(p), self.res * self.res
        order = np.lexsort((np.arange(n), p.depth))
        sid, px, py = self._pairs(order)
        dx = px + 0.5 - p.mean2d[sid, 0]
        dy = py + 0.5 - p.mean2d[sid, 1]
        ca, cb, cc = p.conic[:, 0, 0][sid], p.conic[:, 0, 1][sid], p.conic[:, 1, 1][sid]
        q = ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy
        keep = np.flatnonzero(q < CUTOFF)
        pix = (py * res + px)[keep]
        # pairs are already in depth order; a stable sort by pixel groups them
        srt = keep[np.argsort(pix.astype(np.uint16) if npix <= 65536 else pix, kind="stable")]
        sid, dx, dy, q = sid[srt], dx[srt], dy[srt], q[srt]
        pix = py[srt] * res + px[srt]
        d = np.stack([dx, dy], -1)
        g = falloff(q)
        alpha = p.opacity[sid] * g
        counts = np.bincount(pix, minlength=npix)
        first = (np.cumsum(counts) - counts)[pix]

        trans_raw = trans = self._exclusive_transmittance(alpha, first)
        include = trans >= T_MIN
        if not include.all():
            alpha = alpha * include
            trans = self._exclusive_transmittance(alpha, first)
        log_keep = np.maximum(np.log1p(-alpha), -700.0)
        t_final = np.exp(np.bincount(pix, log_keep, minlength=npix))
        weights = alpha * trans
        color = p.color[sid]

        img = np.stack([np.bincount(pix, weights * color[:, c], minlength=npix) for c in range(3)], -1)
        img = img.astype(np.float64) + t_final[:, None] * self.bg
        self.image = img.reshape(res, res, 3)
        self.alpha = (1.0 - t_final).reshape(res, res)
        self._pair = dict(sid=sid, pix=pix, first=first, d=d, q=q, g=g, alpha=alpha,
                          trans=trans, trans_raw=trans_raw, include=include, weights=weights, color=color)
        self._t_final = t_final

    @staticmethod
    def _exclusive_transmittance(alpha, first):
        """Per-pair product of (1 - alpha) over earlier pairs of the same pixel;
        pairs are grouped by pixel and ``first`` indexes each group's start."""
        if len(alpha) == 0:
            return np.zeros(0)
        lg = np.maximum(np.log1p(-alpha), -700.0)
        cs = np.cumsum(lg) - lg
        return np.exp(cs - cs[first])

    def threshold_margin(self) -> float:
        """Smallest distance of any pair's transmittance to the termination
        threshold; gradients are not defined where this is ~0."""
        t = self._pair["trans_raw"]
        return float(np.abs(t - T_MIN).min()) if len(t) else np.inf

    def splat_weights(self) -> np.ndarray:
        """Compositing weight of each splat summed over all pixels."""
        pr = self._pair
        return np.bincount(pr["sid"], weights=pr["weights"], minlength=len(self.proj))

    def splat_visibility(self) -> np.ndarray:
        """Per-splat fraction of its own alpha mass that reaches the camera:
        sum(alpha * T) / sum(alpha) over the splat's pixels; 1 when nothing
        lies in front of it, 0 when it is fully hidden or off screen."""
        pr = self._pair
        n = len(self.proj)
        raw = self.proj.opacity[pr["sid"]] * pr["g"]
        mass = np.bincount(pr["sid"], weights=raw, minlength=n)
        seen = np.bincount(pr["sid"], weights=pr["weights"], minlength=n)
        return np.divide(seen, mass, out=np.zeros(n), where=mass > 0)

    def pair_weights(self):
        """(splat index, pixel index, compositing weight) for every contributing pair."""
        pr = self._pair
        return pr["sid"], pr["pix"], pr["weights"]

    def backward(self, grad_image: np.ndarray) -> SceneGrads:
        res, n = self.res, len(self.proj)
        grad_image = np.asarray(grad_image, dtype=np.float64)
        if grad_image.shape != (res, res, 3):
            raise ParameterError(f"grad_image shape {grad_image.shape} != {(res, res, 3)}")
        p, pr = self.proj, self._pair
        npix = res * res
        dC = grad_image.reshape(-1, 3)
        sid, pix, first, d, q, g = (pr[k] for k in ("sid", "pix", "first", "d", "q", "g"))
        alpha, trans, w = pr["alpha"], pr["trans"], pr["weights"]

        dCp = dC[pix]
        cdot = np.einsum("mc,mc->m", pr["color"], dCp)
        wc = w * cdot
        # everything composited behind each pair (later layers + background)
        csum = np.cumsum(wc)
        seg_total = np.bincount(pix, wc, minlength=npix)
        before_incl = csum - (csum - wc)[first]
        behind = seg_total[pix] - before_incl + (self._t_final * (dC @ self.bg))[pix]
        dalpha = np.where(pr["include"], trans * cdot - behind / (1.0 - alpha), 0.0)

        dcolor = np.stack([np.bincount(sid, w * dCp[:, c], minlength=n) for c in range(3)], -1)
        op = p.opacity[sid]
        dop = np.bincount(sid, dalpha * g, minlength=n)
        dq = dalpha * op * falloff_grad(q)
        dx, dy = d[:, 0], d[:, 1]
        cb = p.conic[:, 0, 1][sid]
        dmean2d = -2 * np.stack([
            np.bincount(sid, dq * (p.conic[:, 0, 0][sid] * dx + cb * dy), minlength=n),
            np.bincount(sid, dq * (cb * dx + p.conic[:, 1, 1][sid] * dy), minlength=n),
        ], -1)
        gq = np.zeros((n, 2, 2))
        dqx = dq * dx
        gq[:, 0, 0] = np.bincount(sid, dqx * dx, minlength=n)
        gq[:, 0, 1] = gq[:, 1, 0] = np.bincount(sid, dqx * dy, minlength=n)
        gq[:, 1, 1] = np.bincount(sid, dq * dy * dy, minlength=n)
        gcov = -p.conic @ gq @ p.conic
        J = p.jacobian
        gsig = J.T @ gcov @ J
        R = p.rotmat
        s = self.scene.scales
        M = R * s[:, None, :]
        gM = (gsig + np.swapaxes(gsig, 1, 2)) @ M
        gR = gM * s[:, None, :]
        gs = np.einsum("nij,nij->nj", R, gM)
        gquat = _rotmat_backward(self.scene.rotations, gR) if n else np.zeros((0, 4))

        right, up, _ = self.pose.basis()
        k = res / (2.0 * self.pose.ortho_half_extent)
        gmeans = k * (dmean2d[:, :1] * right - dmean2d[:, 1:] * up)
        glogit = dop * p.opacity * (1.0 - p.opacity)
        return SceneGrads(gmeans, gquat, gs, glogit, dcolor)


def render(scene: GaussianScene, pose: CameraPose, resolution: int, background=1.0) -> np.ndarray:
    return Rasterization(scene, pose, resolution, background).image


def render_backward(scene: GaussianScene, pose: CameraPose, resolution: int, background,
                    grad_image: np.ndarray) -> SceneGrads:
    return Rasterization(scene, pose, resolution, background).backward(grad_image)


def render_views(scene: GaussianScene, poses, resolution: int, background=1.0) -> np.ndarray:
    return np.stack([render(scene, p, resolution, background) for p in poses])


def render_op(means, rotations, scales, opacity_logits, colors, pose: CameraPose,
              resolution: int, background=1.0) -> "ge.Tensor":
    """Render as a differentiable engine op over the five splat parameter tensors."""
    state = {}

    def fwd(*arrays):
        state["r"] = Rasterization(GaussianScene(*arrays), pose, resolution, background)
        return state["r"].image

    def bwd(g):
        return state["r"].backward(g).arrays()
    return ge.custom_op([means, rotations, scales, opacity_logits, colors], fwd, bwd, "render")
