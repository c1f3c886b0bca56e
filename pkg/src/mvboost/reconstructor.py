"""Feed-forward multi-view to Gaussian reconstructor with LoRA adapters.

Every view is cut into non-overlapping patches; each patch, concatenated with
the view's pose embedding, becomes one token.  Tokens of all views attend to
each other jointly (cross-view self-attention), and every output token decodes
to one splat anchored at its patch center on the view plane.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradengine as ge
from .core import (CameraPose, GaussianScene, MultiViewSet, ParameterError, Rng,
                   is_canonical)

HEAD_DIM = 14            # mean offset 3, rotation 4, scale 3, opacity 1, color 3
POSE_DIM = 6
OFFSET_BOUND = 0.5
SCALE_FACTOR = 0.1
SCALE_MIN = 1e-4
LOGIT_BOUND = 8.0
OPACITY_BIAS = -5.0      # splats start nearly transparent
BASE_FORMAT = "MVB-RECON v1"
LORA_FORMAT = "MVB-LORA v1"


@dataclass(frozen=True)
class ReconstructorConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 8
    resolution: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ParameterError("d_model must be divisible by heads")
        if self.resolution % self.patch:
            raise ParameterError("resolution must be divisible by the patch size")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def tokens_per_view(self) -> int:
        return (self.resolution // self.patch) ** 2


@dataclass
class ReconstructorParams:
    config: ReconstructorConfig
    arrays: dict[str, np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()

    def copy(self) -> "ReconstructorParams":
        return ReconstructorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class LoraParams:
    rank: int = 32
    alpha: float = 32.0
    targets: tuple[str, ...] = ("q", "v")
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraParams":
        return LoraParams(self.rank, self.alpha, self.targets, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: ReconstructorConfig, rng: Rng) -> ReconstructorParams:
    gen = rng.generator()
    d = config.d_model

    def w(fan_in, fan_out, gain=1.0):
        return gen.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)
    a = {
        "embed.W": w(config.patch_dim + POSE_DIM, d),
        "embed.b": np.zeros(d),
    }
    for l in range(config.layers):
        p = f"block{l}."
        a[p + "ln1.g"], a[p + "ln1.b"] = np.ones(d), np.zeros(d)
        for m in "qkvo":
            a[p + f"W{m}"] = w(d, d)
            a[p + f"b{m}"] = np.zeros(d)
        a[p + "ln2.g"], a[p + "ln2.b"] = np.ones(d), np.zeros(d)
        a[p + "mlp.W1"], a[p + "mlp.b1"] = w(d, 4 * d), np.zeros(4 * d)
        a[p + "mlp.W2"], a[p + "mlp.b2"] = w(4 * d, d, 0.5), np.zeros(d)
    a["lnf.g"], a["lnf.b"] = np.ones(d), np.zeros(d)
    a["head.W"] = w(d, HEAD_DIM, 0.1)
    b = np.zeros(HEAD_DIM)
    b[3] = 1.0          # identity rotation
    b[10] = OPACITY_BIAS
    a["head.b"] = b
    return ReconstructorParams(config, a)


def init_lora(config: ReconstructorConfig, rng: Rng, rank: int = 32, alpha: float = 32.0,
              targets: tuple[str, ...] = ("q", "v")) -> LoraParams:
    if rank < 1:
        raise ParameterError("LoRA rank must be >= 1")
    bad = set(targets) - set("qkvo")
    if bad or not targets:
        raise ParameterError(f"LoRA targets must be a subset of q,k,v,o, got {targets}")
    gen = rng.generator()
    d = config.d_model
    arrays = {}
    for l in range(config.layers):
        for m in targets:
            arrays[f"block{l}.{m}.A"] = gen.standard_normal((d, rank)) / np.sqrt(d)
            arrays[f"block{l}.{m}.B"] = np.zeros((rank, d))
    return LoraParams(rank, alpha, tuple(targets), arrays)


def partition_params(params: ReconstructorParams, lora: LoraParams | None):
    """(frozen names, trainable names); base weights are frozen, adapters train."""
    frozen = {"base:" + k for k in params.arrays}
    trainable = {"lora:" + k for k in (lora.arrays if lora else {})}
    return frozen, trainable


# ---------------------------------------------------------------------------
# Forward pass

def as_tensors(arrays: dict[str, np.ndarray], trainable: bool) -> dict[str, ge.Tensor]:
    # Tensors share memory with the arrays, so in-place optimizer updates are seen
    return {k: ge.Tensor(v, requires_grad=trainable) for k, v in arrays.items()}


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    H, W, _ = image.shape
    if H % patch or W % patch:
        raise ParameterError(f"image {H}x{W} not divisible by patch {patch}")
    x = image.reshape(H // patch, patch, W // patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, patch * patch * 3)


def view_inputs(images: np.ndarray, poses, patch: int) -> np.ndarray:
    """(n * tokens_per_view, patch_dim + 6) rows: patch pixels then pose embedding."""
    rows = []
    for img, pose in zip(images, poses):
        pt = patchify(np.asarray(img, dtype=np.float64), patch)
        rows.append(np.concatenate([pt, np.broadcast_to(pose.embedding(), (len(pt), POSE_DIM))], 1))
    return np.concatenate(rows, 0)


def encode_view(image: np.ndarray, pose: CameraPose, params: ReconstructorParams) -> np.ndarray:
    t = as_tensors(params.arrays, False)
    x = view_inputs(np.asarray(image)[None], [pose], params.config.patch)
    return (ge.Tensor(x) @ t["embed.W"] + t["embed.b"]).data


def _linear(x, t, lt, block, m, scaling):
    out = x @ t[f"{block}W{m}"]
    if lt is not None and f"{block}{m}.A" in lt:
        out = out + (x @ lt[f"{block}{m}.A"]) @ lt[f"{block}{m}.B"] * scaling
    return out + t[f"{block}b{m}"]


def attention_blocks(x: ge.Tensor, t, lt, config: ReconstructorConfig, scaling: float = 1.0) -> ge.Tensor:
    N, d = x.shape
    H = config.heads
    dh = d // H
    for l in range(config.layers):
        p = f"block{l}."
        h = ge.layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        q = _linear(h, t, lt, p, "q", scaling).reshape(N, H, dh).transpose(1, 0, 2)
        k = _linear(h, t, lt, p, "k", scaling).reshape(N, H, dh).transpose(1, 0, 2)
        v = _linear(h, t, lt, p, "v", scaling).reshape(N, H, dh).transpose(1, 0, 2)
        att = ((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))).softmax(-1)
        o = (att @ v).transpose(1, 0, 2).reshape(N, d)
        x = x + _linear(o, t, lt, p, "o", scaling)
        h = ge.layer_norm(x, t[p + "ln2.g"], t[p + "ln2.b"])
        x = x + ((h @ t[p + "mlp.W1"] + t[p + "mlp.b1"]).gelu() @ t[p + "mlp.W2"] + t[p + "mlp.b2"])
    return x


def cross_view_attention(tokens: list[np.ndarray], params: ReconstructorParams,
                         lora: LoraParams | None = None) -> list[np.ndarray]:
    sizes = {len(tk) for tk in tokens}
    if len(sizes) != 1:
        raise ParameterError("all views must yield the same token count")
    t = as_tensors(params.arrays, False)
    lt = as_tensors(lora.arrays, False) if lora else None
    x = ge.Tensor(np.concatenate(tokens, 0))
    out = attention_blocks(x, t, lt, params.config, lora.scaling if lora else 1.0).data
    return np.split(out, len(tokens))


def patch_centers(pose: CameraPose, config: ReconstructorConfig) -> tuple[np.ndarray, np.ndarray]:
    """World-space patch centers on the view plane through the origin, and the
    (right, up, forward) frame as rows."""
    res, p = config.resolution, config.patch
    g = res // p
    k = res / (2.0 * pose.ortho_half_extent)
    v, u = np.mgrid[0:g, 0:g]
    cu = ((u.ravel() + 0.5) * p - 0.5 * res) / k
    cv = -((v.ravel() + 0.5) * p - 0.5 * res) / k
    right, up, forward = pose.basis()
    return cu[:, None] * right + cv[:, None] * up, np.stack([right, up, forward])


def decode_tensors(raw: ge.Tensor, poses, config: ReconstructorConfig) -> dict[str, ge.Tensor]:
    """Map (n * tokens_per_view, 14) head outputs to splat parameter tensors."""
    n = len(poses)
    tpv = raw.shape[0] // n
    frames = [patch_centers(p, config) for p in poses]
    centers = np.concatenate([c for c, _ in frames], 0)
    basis = np.stack([b for _, b in frames])                       # (n, 3, 3)
    off = (raw[:, 0:3].tanh() * OFFSET_BOUND).reshape(n, tpv, 3) @ basis
    means = off.reshape(n * tpv, 3) + centers
    q = raw[:, 3:7]
    rotations = q / (q * q).sum(axis=1, keepdims=True).sqrt()
    scales = raw[:, 7:10].softplus() * SCALE_FACTOR + SCALE_MIN
    logits = (raw[:, 10] * (1.0 / LOGIT_BOUND)).tanh() * LOGIT_BOUND
    colors = raw[:, 11:14].sigmoid()
    return dict(means=means, rotations=rotations, scales=scales, opacity_logits=logits, colors=colors)


def forward_tensors(images: np.ndarray, poses, t: dict[str, ge.Tensor], lt: dict[str, ge.Tensor] | None,
                    config: ReconstructorConfig, scaling: float = 1.0) -> dict[str, ge.Tensor]:
    x = ge.Tensor(view_inputs(images, poses, config.patch))
    x = x @ t["embed.W"] + t["embed.b"]
    x = attention_blocks(x, t, lt, config, scaling)
    x = ge.layer_norm(x, t["lnf.g"], t["lnf.b"])
    raw = x @ t["head.W"] + t["head.b"]
    return decode_tensors(raw, poses, config)


def scene_from_tensors(out: dict[str, ge.Tensor]) -> GaussianScene:
    return GaussianScene(out["means"].data.copy(), out["rotations"].data.copy(), out["scales"].data.copy(),
                         out["opacity_logits"].data.copy(), out["colors"].data.copy())


def decode_gaussians(tokens: np.ndarray, params: ReconstructorParams, poses) -> GaussianScene:
    t = as_tensors(params.arrays, False)
    x = ge.layer_norm(ge.Tensor(tokens), t["lnf.g"], t["lnf.b"])
    raw = x @ t["head.W"] + t["head.b"]
    return scene_from_tensors(decode_tensors(raw, list(poses), params.config))


def forward(mvs: MultiViewSet, params: ReconstructorParams, lora: LoraParams | None = None,
            require_canonical: bool = True) -> GaussianScene:
    if require_canonical and not is_canonical(mvs.poses):
        raise ParameterError("reconstructor input must use the canonical rig")
    if mvs.resolution != (params.config.resolution, params.config.resolution):
        raise ParameterError(f"views are {mvs.resolution}, model expects {params.config.resolution}")
    t = as_tensors(params.arrays, False)
    lt = as_tensors(lora.arrays, False) if lora else None
    out = forward_tensors(mvs.images, mvs.poses, t, lt, params.config, lora.scaling if lora else 1.0)
    return scene_from_tensors(out)


# ---------------------------------------------------------------------------
# Checkpoints

def save_params(path: str | Path, params: ReconstructorParams) -> None:
    c = params.config
    meta = np.array([c.d_model, c.layers, c.heads, c.patch, c.resolution])
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(BASE_FORMAT), __config__=meta,
                 **{"p:" + k: v for k, v in params.arrays.items()})


def load_params(path: str | Path) -> ReconstructorParams:
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z or str(z["__format__"]) != BASE_FORMAT:
            raise ParameterError(f"{path}: not a {BASE_FORMAT} checkpoint")
        d, L, h, p, r = (int(v) for v in z["__config__"])
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
    return ReconstructorParams(ReconstructorConfig(d, L, h, p, r), arrays)


def save_lora(path: str | Path, lora: LoraParams) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(LORA_FORMAT),
                 __meta__=np.array([lora.rank, lora.alpha]),
                 __targets__=np.array("".join(lora.targets)),
                 **{"l:" + k: v for k, v in lora.arrays.items()})


def load_lora(path: str | Path) -> LoraParams:
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z or str(z["__format__"]) != LORA_FORMAT:
            raise ParameterError(f"{path}: not a {LORA_FORMAT} checkpoint")
        rank, alpha = z["__meta__"]
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("l:")}
        targets = tuple(str(z["__targets__"]))
    return LoraParams(int(rank), float(alpha), targets, arrays)
