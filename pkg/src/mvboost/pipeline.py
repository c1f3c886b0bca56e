"""Refined dataset construction, the combined training loss, base
pretraining, LoRA boost training and held-out evaluation."""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradengine as ge
from .core import (CameraPose, GaussianScene, MultiViewSet, ParameterError, Rng, make_canonical_rig,
                   save_png)
from .diffusion import RefineConfig, refine
from .metrics import (chamfer, fscore, normalize_points, perceptual_proxy, perceptual_proxy_tensor,
                      psnr, sample_points_from_scene, ssim)
from .oracle_models import (InconsistencyModel, OracleDenoiser, SceneSpec, generate_scene,
                            gt_views, mv_generate)
from .reconstructor import (LoraParams, ReconstructorParams, as_tensors, forward, forward_tensors,
                            init_lora)
from .renderer import Rasterization, render_op

DATASET_FORMAT = "MVB-DATA v1"


class ConfigurationError(RuntimeError):
    """A required input (checkpoint, dataset) is missing or incompatible."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LossSpec:
    mse_weight: float = 1.0
    perceptual_weight: float = 1.0
    perceptual_resolution: int = 32

    def __post_init__(self):
        if self.mse_weight < 0 or self.perceptual_weight < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.mse_weight == 0 and self.perceptual_weight == 0:
            raise ParameterError("loss weights cannot both be zero")


@dataclass
class RefinedPair:
    inputs: MultiViewSet
    targets: MultiViewSet | None     # None for evaluation-only pairs
    scene_id: int
    seeds: dict = field(default_factory=dict)
    gt: MultiViewSet | None = None
    gt_scene: GaussianScene | None = None

    def __post_init__(self):
        if self.targets is None:
            return
        if [p.key() for p in self.inputs.poses] != [p.key() for p in self.targets.poses]:
            raise ParameterError("inputs and targets must share the rig")
        if self.inputs.resolution != self.targets.resolution:
            raise ParameterError("inputs and targets must share the resolution")


# ---------------------------------------------------------------------------
# Loss

def loss_terms(rendered, targets, spec: LossSpec) -> tuple[ge.Tensor, ge.Tensor, ge.Tensor]:
    """(total, mse, perceptual) over all views; ``rendered`` may be a Tensor."""
    if isinstance(rendered, MultiViewSet):
        rendered = rendered.images
    if isinstance(targets, MultiViewSet):
        targets = targets.images
    rendered = ge.as_tensor(rendered)
    targets = np.asarray(targets, dtype=np.float64)
    if rendered.shape != targets.shape:
        raise ParameterError(f"rendered {rendered.shape} vs targets {targets.shape}")
    diff = rendered - targets
    mse = (diff * diff).mean()
    if spec.perceptual_weight > 0:
        perc = perceptual_proxy_tensor(rendered, targets, spec.perceptual_resolution)
    else:
        perc = ge.Tensor(0.0)
    total = mse * spec.mse_weight
    if spec.perceptual_weight > 0:
        total = total + perc * spec.perceptual_weight
    return total, mse, perc


def loss(rendered, targets, spec: LossSpec) -> ge.Tensor:
    return loss_terms(rendered, targets, spec)[0]


def render_tensor_views(out: dict[str, ge.Tensor], poses, resolution: int, background=1.0) -> ge.Tensor:
    keys = ("means", "rotations", "scales", "opacity_logits", "colors")
    return ge.stack([render_op(*(out[k] for k in keys), pose, resolution, background) for pose in poses])


def render_scene_views(scene: GaussianScene, poses, resolution: int, background=1.0) -> np.ndarray:
    return np.stack([Rasterization(scene, p, resolution, background).image for p in poses])


# ---------------------------------------------------------------------------
# Dataset

@dataclass(frozen=True)
class OracleConfig:
    eta: float = 0.05
    snr0: float = 1e-4


def build_pair(scene: GaussianScene, scene_id: int, inc: InconsistencyModel, refine_cfg: RefineConfig,
               base: ReconstructorParams | None, seed: int, oracle: OracleConfig = OracleConfig(),
               scene_seed: int = -1) -> RefinedPair:
    """One dataset pass for a single ground-truth scene: condition =
    front render, C = mv_generate, theta = R(C), X = renders of theta,
    C_up = refine(X)."""
    if base is None:
        raise ConfigurationError("a base reconstructor checkpoint is required to build the dataset")
    res = base.config.resolution
    rig = make_canonical_rig()
    rng = Rng(seed).split(scene_id)
    gt = gt_views(scene, rig, res)
    condition = gt.images[0]
    inputs = mv_generate(condition, scene, rig, inc, rng.split(1))
    theta = forward(inputs, base)
    renders = MultiViewSet(list(rig), render_scene_views(theta, rig, res), "rendered", condition)
    denoiser = OracleDenoiser(gt, rng.split(2), oracle.eta, oracle.snr0)
    targets = refine(renders, condition, refine_cfg, denoiser, rng.split(3))
    seeds = dict(seed=seed, scene_id=scene_id, scene_seed=scene_seed)
    return RefinedPair(inputs, targets, scene_id, seeds, gt, scene)


def build_refined_dataset(scene_specs: Sequence[SceneSpec | GaussianScene], inc: InconsistencyModel,
                          refine_cfg: RefineConfig, base: ReconstructorParams | None,
                          out_path: str | Path | None = None, seed: int = 0,
                          oracle: OracleConfig = OracleConfig(), config_hash: str = "",
                          first_id: int = 0) -> list[RefinedPair]:
    """Build (C, C_up) pairs for every spec; persists and resumes when ``out_path`` is given."""
    if base is None:
        raise ConfigurationError("a base reconstructor checkpoint is required to build the dataset")
    out = Path(out_path) if out_path else None
    done = read_manifest(out)["done"] if out and (out / "manifest.txt").exists() else {}
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, config_hash, seed, done)
    pairs = []
    for k, spec in enumerate(scene_specs):
        sid = first_id + k
        if out and sid in done:
            pairs.append(load_pair(out, sid))
            continue
        if isinstance(spec, GaussianScene):
            scene, sseed = spec, -1
        else:
            scene, sseed = generate_scene(spec), spec.seed
        pair = build_pair(scene, sid, inc, refine_cfg, base, seed, oracle, sseed)
        if out:
            save_pair(out, pair)
            done[sid] = sseed
            write_manifest(out, config_hash, seed, done)
        pairs.append(pair)
    return pairs


def save_pair(root: Path, pair: RefinedPair) -> None:
    d = root / f"scene_{pair.scene_id:05d}"
    d.mkdir(parents=True, exist_ok=True)
    for name, mvs in (("inputs", pair.inputs), ("targets", pair.targets), ("gt", pair.gt)):
        if mvs is None:
            continue
        for pose, img in zip(mvs.poses, mvs.images):
            save_png(d / f"{name}_{pose.label}.png", img)
    arrays = dict(inputs=pair.inputs.images, targets=pair.targets.images)
    if pair.gt is not None:
        arrays["gt"] = pair.gt.images
    if pair.gt_scene is not None:
        for k, v in zip(("means", "rotations", "scales", "opacity_logits", "colors"), pair.gt_scene.arrays()):
            arrays["scene_" + k] = v
    with open(d / "views.npz", "wb") as fh:
        np.savez(fh, **arrays)
    (d / "seeds.txt").write_text("".join(f"{k} = {v}\n" for k, v in sorted(pair.seeds.items())))


def load_pair(root: Path, scene_id: int) -> RefinedPair:
    d = Path(root) / f"scene_{scene_id:05d}"
    if not (d / "views.npz").exists():
        raise ConfigurationError(f"missing dataset entry {d}")
    rig = list(make_canonical_rig())
    with np.load(d / "views.npz") as z:
        inputs = MultiViewSet(rig, z["inputs"], "generated", z["inputs"][0])
        targets = MultiViewSet(rig, z["targets"], "refined")
        gt = MultiViewSet(rig, z["gt"], "rendered") if "gt" in z else None
        scene = None
        if "scene_means" in z:
            scene = GaussianScene(*(z["scene_" + k] for k in
                                    ("means", "rotations", "scales", "opacity_logits", "colors")))
    seeds = {}
    for line in (d / "seeds.txt").read_text().splitlines():
        k, v = (s.strip() for s in line.split("="))
        seeds[k] = int(v)
    return RefinedPair(inputs, targets, scene_id, seeds, gt, scene)


def write_manifest(root: Path, config_hash: str, seed: int, done: dict) -> None:
    lines = [DATASET_FORMAT, f"config_hash = {config_hash}", f"seed = {seed}"]
    lines += [f"scene {sid} = {sseed}" for sid, sseed in sorted(done.items())]
    tmp = root / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(root / "manifest.txt")


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise ConfigurationError(f"no dataset manifest at {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != DATASET_FORMAT:
        raise ConfigurationError(f"{path}: not a {DATASET_FORMAT} manifest")
    info = {"done": {}}
    for line in lines[1:]:
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("scene "):
            info["done"][int(key.split()[1])] = int(val)
        else:
            info[key] = val
    return info


def load_dataset(root: str | Path) -> list[RefinedPair]:
    info = read_manifest(root)
    return [load_pair(Path(root), sid) for sid in sorted(info["done"])]


def dataset_digest(pairs: Iterable[RefinedPair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.inputs.images.tobytes())
        h.update(p.targets.images.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    seed: int = 0
    view_sampling: str = "all"       # "all" views every step, or "one" random view

    def __post_init__(self):
        if self.view_sampling not in ("all", "one"):
            raise ParameterError("view_sampling must be 'all' or 'one'")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)     # (step, loss, mse, perceptual)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "mse", "perceptual"])
            for r in self.rows:
                w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def _train_step(images_in, targets, poses, t, lt, config, scaling, spec, res, background=1.0):
    out = forward_tensors(images_in, poses, t, lt, config, scaling)
    rendered = render_tensor_views(out, poses, res, background)
    return out, loss_terms(rendered, targets, spec)


def _check_finite(total, out, **diag):
    # the renderer drops non-finite splats, so the decoded splats are checked too
    if not (np.isfinite(total.item()) and all(np.all(np.isfinite(v.data)) for v in out.values())):
        detail = ", ".join(f"{k}={v}" for k, v in diag.items())
        raise NumericalAbort(f"non-finite loss or splat parameters ({detail})")


def train_boost(dataset: Sequence[RefinedPair], base: ReconstructorParams, lora: LoraParams | None = None,
                optim: OptimConfig = OptimConfig(), steps: int = 500, spec: LossSpec = LossSpec(),
                log_every: int = 1) -> tuple[LoraParams, TrainLog]:
    """Fit LoRA adapters on (C, C_up) pairs with the base weights frozen."""
    if not dataset:
        raise ParameterError("dataset is empty")
    if log_every < 1:
        raise ParameterError("log_every must be >= 1")
    lora = lora.copy() if lora else init_lora(base.config, Rng(optim.seed).split(0))
    digest = base.digest()
    t = as_tensors(base.arrays, False)
    names = sorted(lora.arrays)
    lt = as_tensors(lora.arrays, True)
    state = ge.AdamState(lr=optim.lr)
    gen = Rng(optim.seed).split(1).generator()
    log = TrainLog()
    res = base.config.resolution
    for step in range(steps):
        k = int(gen.integers(len(dataset)))
        pair = dataset[k]
        poses = pair.inputs.poses
        targets = pair.targets.images
        sel = slice(None)
        if optim.view_sampling == "one":
            v = int(gen.integers(len(poses)))
            sel = slice(v, v + 1)
        out = forward_tensors(pair.inputs.images, poses, t, lt, base.config, lora.scaling)
        rendered = render_tensor_views(out, poses[sel], res)
        total, mse, perc = loss_terms(rendered, targets[sel], spec)
        _check_finite(total, out, step=step, pair=pair.scene_id, optim_seed=optim.seed, **pair.seeds)
        for p in lt.values():
            p.zero_grad()
        ge.backward(total)
        ge.adam_step([lora.arrays[n] for n in names], [lt[n].grad for n in names], state)
        if step % log_every == 0:
            log.rows.append((step, total.item(), mse.item(), perc.item()))
    if base.digest() != digest:
        raise RuntimeError("base parameters changed during boost training")
    return lora, log


def pretrain_base(params: ReconstructorParams, scene_specs: Sequence[SceneSpec], steps: int = 2000,
                  optim: OptimConfig = OptimConfig(lr=2e-3), spec: LossSpec = LossSpec(),
                  progress=None, random_background: float = 0.5) -> tuple[ReconstructorParams, TrainLog]:
    """Train all base weights on zero-inconsistency data (inputs = GT renders on
    white).  With probability ``random_background`` a step composites targets
    and predictions over a random color instead, which exposes splats that are
    invisible on white (the role of the mask loss in large reconstruction
    models)."""
    params = params.copy()
    res = params.config.resolution
    rig = list(make_canonical_rig())
    views, premult, coverage = [], [], []
    for s in scene_specs:
        scene = generate_scene(s)
        r = [Rasterization(scene, p, res, 0.0) for p in rig]
        premult.append(np.stack([x.image for x in r]))
        coverage.append(np.stack([x.alpha for x in r])[..., None])
        views.append(premult[-1] + (1.0 - coverage[-1]))
    names = sorted(params.arrays)
    t = as_tensors(params.arrays, True)
    state = ge.AdamState(lr=optim.lr)
    gen = Rng(optim.seed).split(7).generator()
    log = TrainLog()
    for step in range(steps):
        # cosine decay to 10% of the base rate
        state.lr = optim.lr * (0.55 + 0.45 * np.cos(np.pi * step / max(steps, 1)))
        k = int(gen.integers(len(views)))
        bg = gen.uniform(0.0, 1.0, 3) if gen.uniform() < random_background else np.ones(3)
        targets = np.clip(premult[k] + (1.0 - coverage[k]) * bg, 0.0, 1.0)
        out, (total, mse, perc) = _train_step(views[k], targets, rig, t, None, params.config, 1.0, spec, res, bg)
        _check_finite(total, out, step=step, seed=optim.seed)
        for p in t.values():
            p.zero_grad()
        ge.backward(total)
        ge.adam_step([params.arrays[n] for n in names], [t[n].grad for n in names], state)
        log.rows.append((step, total.item(), mse.item(), perc.item()))
        if progress:
            progress(step, total.item())
    return params, log


# ---------------------------------------------------------------------------
# Evaluation

def orbit_poses(count: int = 24, elevation: float = 0.0, extent: float = 1.2):
    return [CameraPose(360.0 * i / count, elevation, extent) for i in range(count)]


@dataclass
class SceneMetrics:
    scene_id: int
    psnr: float
    ssim: float
    perc: float
    cd: float
    fscore: float


def evaluate_scene(theta: GaussianScene, gt_scene: GaussianScene, scene_id: int, poses, resolution: int,
                   points: int = 2000, seed: int = 0) -> SceneMetrics:
    ps, ss, pc = [], [], []
    for pose in poses:
        a = Rasterization(theta, pose, resolution, 1.0).image
        b = Rasterization(gt_scene, pose, resolution, 1.0).image
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
        pc.append(perceptual_proxy(a, b, max(resolution // 2, 8)))
    rng = Rng(seed).split(scene_id)
    pa = normalize_points(sample_points_from_scene(theta, points, rng.split(0)))
    pb = normalize_points(sample_points_from_scene(gt_scene, points, rng.split(1)))
    return SceneMetrics(scene_id, float(np.mean(ps)), float(np.mean(ss)), float(np.mean(pc)),
                        chamfer(pa, pb), fscore(pa, pb))


def evaluate_model(pairs: Sequence[RefinedPair], base: ReconstructorParams, lora: LoraParams | None,
                   poses=None, seed: int = 0) -> list[SceneMetrics]:
    """Feed each pair's generated views C (never refined ones) and compare to ground truth."""
    poses = poses or orbit_poses()
    rows = []
    for pair in pairs:
        if pair.gt_scene is None:
            raise ConfigurationError(f"pair {pair.scene_id} has no ground-truth scene")
        theta = forward(pair.inputs, base, lora)
        rows.append(evaluate_scene(theta, pair.gt_scene, pair.scene_id, poses, base.config.resolution,
                                   seed=seed))
    return rows


def mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


class Timer:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0
