"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN = 0, 2, 3, 4
DEFAULT_STRENGTHS = (0.0, 0.10, 0.50, 0.70, 0.90, 0.95, 1.00)


class DataError(RuntimeError):
    """Input data on disk is missing or does not match the configuration."""


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise DataError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_sidecar(path: Path, cfg: Config, **extra) -> None:
    """Config hash and seeds next to a checkpoint, for replay."""
    lines = [f"config_hash = {cfg.hash()}", f"seed = {cfg['seeds.seed']}",
             f"scene_seed = {cfg['seeds.scene_seed']}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")


def _apply_overrides(cfg: Config, args) -> Config:
    if getattr(args, "seed", None) is not None:
        cfg.set("seeds", "seed", args.seed)
    if getattr(args, "strength", None) is not None:
        cfg.set("refine", "strength", args.strength)
    if getattr(args, "steps", None) is not None:
        cfg.set("optim", "boost_steps", args.steps)
    return cfg


# --- object builders ------------------------------------------------------------

def scene_spec(cfg: Config, seed: int):
    from .oracle_models import SceneSpec
    return SceneSpec(primitive_count=cfg["scenes.primitive_count"], seed=seed,
                     splats_per_primitive=cfg["scenes.splats_per_primitive"])


def inconsistency(cfg: Config):
    from .oracle_models import InconsistencyModel
    return InconsistencyModel(cfg["oracle.color_shift_amp"], cfg["oracle.warp_amp"],
                              cfg["oracle.silhouette_noise_amp"])


def refine_config(cfg: Config, strength: float | None = None):
    from .diffusion import RefineConfig, build_schedule
    return RefineConfig(cfg["refine.strength"] if strength is None else strength, cfg["refine.steps"],
                        build_schedule(cfg["schedule.T"], cfg["schedule.kind"]), cfg["seeds.seed"])


def oracle_config(cfg: Config):
    from .pipeline import OracleConfig
    return OracleConfig(cfg["oracle.eta"], cfg["oracle.snr0"])


def loss_spec(cfg: Config):
    from .pipeline import LossSpec
    return LossSpec(cfg["loss.mse_weight"], cfg["loss.perceptual_weight"], cfg["loss.perceptual_resolution"])


def model_config(cfg: Config):
    from .reconstructor import ReconstructorConfig
    return ReconstructorConfig(cfg["model.d_model"], cfg["model.layers"], cfg["model.heads"],
                               cfg["model.patch"], cfg["rig.resolution"])


def load_base(path, cfg: Config):
    from .reconstructor import load_params
    if path is None or not Path(path).exists():
        raise ConfigError(f"base checkpoint {path} not found")
    params = load_params(path)
    if params.config != model_config(cfg):
        raise ConfigError(f"checkpoint {path} was built for {params.config}, config asks for {model_config(cfg)}")
    return params


# --- commands ---------------------------------------------------------------------

def cmd_gen_scenes(cfg: Config, count: int, out_dir: Path, force: bool = False) -> list[Path]:
    from .core import make_canonical_rig, save_png, save_scene
    from .oracle_models import generate_scene, gt_views
    out = _prepare_out(out_dir, force)
    rig = make_canonical_rig(cfg["rig.extent"])
    written = []
    lines = ["MVB-SCENES v1", f"config_hash = {cfg.hash()}"]
    for i in range(count):
        seed = cfg["seeds.scene_seed"] + i
        scene = generate_scene(scene_spec(cfg, seed))
        path = out / f"scene_{i:05d}.mvbgs"
        save_scene(path, scene)
        views = gt_views(scene, rig, cfg["rig.resolution"], cfg["rig.background"])
        for pose, img in zip(views.poses, views.images):
            save_png(out / f"scene_{i:05d}_{pose.label}.png", img)
        lines.append(f"scene {i} = {seed}")
        written.append(path)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return written


def _load_scene_dir(scenes_dir: Path):
    from .core import load_scene
    files = sorted(Path(scenes_dir).glob("scene_*.mvbgs"))
    if not files:
        raise DataError(f"no scene files in {scenes_dir}")
    return [load_scene(f) for f in files]


def cmd_pretrain(cfg: Config, out_ckpt: Path, log_path: Path | None = None):
    from .core import Rng
    from .pipeline import OptimConfig, pretrain_base
    from .reconstructor import init_params, save_params
    specs = [scene_spec(cfg, 10_000 + cfg["seeds.scene_seed"] + i) for i in range(cfg["optim.base_scenes"])]
    params = init_params(model_config(cfg), Rng(cfg["seeds.seed"]).split(99))
    params, log = pretrain_base(params, specs, cfg["optim.base_steps"],
                                OptimConfig(lr=cfg["optim.base_lr"], seed=cfg["seeds.seed"]), loss_spec(cfg))
    save_params(out_ckpt, params)
    _write_sidecar(out_ckpt, cfg, base_scene_seed=10_000 + cfg["seeds.scene_seed"])
    if log_path:
        log.write_csv(log_path)
    return params, log


def cmd_build_dataset(cfg: Config, scenes_dir: Path, base_ckpt, out_dir: Path, force: bool = False):
    from .pipeline import build_refined_dataset, read_manifest
    base = load_base(base_ckpt, cfg)
    scenes = _load_scene_dir(scenes_dir)
    out = Path(out_dir)
    if out.exists() and (out / "manifest.txt").exists():
        info = read_manifest(out)
        if info.get("config_hash") != cfg.hash():
            if not force:
                raise DataError(f"{out} was built with config {info.get('config_hash')} (use --force)")
            shutil.rmtree(out)
    elif out.exists() and any(out.iterdir()):
        _prepare_out(out, force)
    return build_refined_dataset(scenes, inconsistency(cfg), refine_config(cfg), base, out,
                                 cfg["seeds.seed"], oracle_config(cfg), cfg.hash())


def cmd_train(cfg: Config, dataset_dir: Path, base_ckpt, out_ckpt: Path, log_path: Path | None = None):
    from .core import Rng
    from .pipeline import OptimConfig, load_dataset, read_manifest, train_boost
    from .reconstructor import init_lora, save_lora
    base = load_base(base_ckpt, cfg)
    info = read_manifest(dataset_dir)
    pairs = load_dataset(dataset_dir)
    if not pairs:
        raise DataError(f"dataset {dataset_dir} is empty")
    if pairs[0].inputs.resolution != (cfg["rig.resolution"],) * 2:
        raise DataError(f"dataset {dataset_dir} (config {info.get('config_hash')}) has resolution "
                        f"{pairs[0].inputs.resolution}, training config expects {cfg['rig.resolution']}")
    lora = init_lora(base.config, Rng(cfg["seeds.seed"]).split(0), cfg["lora.rank"], cfg["lora.alpha"],
                     tuple(cfg["lora.targets"]))
    optim = OptimConfig(cfg["optim.lr"], cfg["seeds.seed"], cfg["optim.view_sampling"])
    lora, log = train_boost(pairs, base, lora, optim, cfg["optim.boost_steps"], loss_spec(cfg))
    save_lora(out_ckpt, lora)
    _write_sidecar(out_ckpt, cfg, dataset_hash=info.get("config_hash"), base_digest=base.digest())
    log.write_csv(log_path or Path(out_ckpt).with_suffix(".log.csv"))
    return lora, log


def _summary(rows, metrics=("psnr", "ssim", "perc", "cd", "fscore")):
    import numpy as np
    out = []
    for m in metrics:
        vals = np.array([getattr(r, m) for r in rows])
        out.append(f"{m:>7s} {vals.mean():.5f} +- {vals.std():.5f}")
    return out


def held_out_pairs(cfg: Config, scenes_dir: Path):
    """Evaluation inputs for a gen-scenes directory: generated views C per scene
    (targets are not needed for evaluation)."""
    from .core import Rng, make_canonical_rig
    from .oracle_models import gt_views, mv_generate
    from .pipeline import RefinedPair
    rig = make_canonical_rig(cfg["rig.extent"])
    pairs = []
    for i, scene in enumerate(_load_scene_dir(scenes_dir)):
        gt = gt_views(scene, rig, cfg["rig.resolution"])
        rng = Rng(cfg["seeds.seed"]).split(70_000 + i)
        inputs = mv_generate(gt.images[0], scene, rig, inconsistency(cfg), rng)
        pairs.append(RefinedPair(inputs, None, i, {"seed": cfg["seeds.seed"], "stream": 70_000 + i}, gt, scene))
    return pairs


def cmd_eval(cfg: Config, base_ckpt, lora_ckpt, scenes_dir: Path, report_path: Path):
    """``scenes_dir`` is either a gen-scenes output or a built dataset."""
    from .pipeline import evaluate_model, load_dataset, orbit_poses
    from .reconstructor import load_lora
    base = load_base(base_ckpt, cfg)
    if list(Path(scenes_dir).glob("scene_*.mvbgs")):
        pairs = held_out_pairs(cfg, scenes_dir)
    else:
        pairs = load_dataset(scenes_dir)
    if not pairs:
        raise DataError(f"no scenes found in {scenes_dir}")
    poses = orbit_poses(cfg["eval.orbit_steps"], 0.0, cfg["rig.extent"])
    models = [("base", None)]
    if lora_ckpt:
        models.append(("boosted", load_lora(lora_ckpt)))
    results = {name: evaluate_model(pairs, base, lora, poses, cfg["seeds.seed"]) for name, lora in models}
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "model", "psnr", "ssim", "perc", "cd", "fscore", "config_hash"])
        for i in range(len(pairs)):
            for name, _ in models:
                r = results[name][i]
                w.writerow([r.scene_id, name, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.perc:.6f}",
                            f"{r.cd:.6f}", f"{r.fscore:.6f}", cfg.hash()])
    lines = [f"config_hash = {cfg.hash()}",
             f"evaluation over {len(pairs)} scenes, {len(poses)} orbit views, perceptual = proxy"]
    for name, _ in models:
        lines.append(f"[{name}]")
        lines += _summary(results[name])
    Path(report_path).with_suffix(".summary.txt").write_text("\n".join(lines) + "\n")
    return results


def ablate_strength(cfg: Config, base, strengths, scene_count: int, first_seed: int | None = None):
    """Pseudo-GT quality per refinement strength: (strength, psnr, ssim, perc) rows
    comparing refined targets with ground-truth renders; strength 0 is the
    unrefined render of theta."""
    import numpy as np
    from .core import Rng, make_canonical_rig
    from .diffusion import refine
    from .metrics import perceptual_proxy, psnr, ssim
    from .oracle_models import OracleDenoiser, generate_scene, gt_views, mv_generate
    from .pipeline import render_scene_views
    from .core import MultiViewSet
    from .reconstructor import forward
    rig = make_canonical_rig(cfg["rig.extent"])
    res = cfg["rig.resolution"]
    inc, orc = inconsistency(cfg), oracle_config(cfg)
    first_seed = cfg["seeds.scene_seed"] + 30_000 if first_seed is None else first_seed
    acc = {s: [] for s in strengths}
    for i in range(scene_count):
        scene = generate_scene(scene_spec(cfg, first_seed + i))
        gt = gt_views(scene, rig, res)
        rng = Rng(cfg["seeds.seed"]).split(50_000 + i)
        inputs = mv_generate(gt.images[0], scene, rig, inc, rng.split(1))
        theta = forward(inputs, base)
        renders = MultiViewSet(list(rig), render_scene_views(theta, rig, res), "rendered", gt.images[0])
        for s in strengths:
            den = OracleDenoiser(gt, rng.split(2), orc.eta, orc.snr0)
            out = refine(renders, gt.images[0], refine_config(cfg, s), den, rng.split(3))
            acc[s].append([np.mean([psnr(a, b) for a, b in zip(out.images, gt.images)]),
                           np.mean([ssim(a, b) for a, b in zip(out.images, gt.images)]),
                           np.mean([perceptual_proxy(a, b, res // 2) for a, b in zip(out.images, gt.images)])])
    return [(s, *np.mean(acc[s], axis=0)) for s in strengths]


def cmd_ablate_strength(cfg: Config, base_ckpt, strengths, report_path: Path, scene_count: int = 20):
    base = load_base(base_ckpt, cfg)
    rows = ablate_strength(cfg, base, strengths, scene_count)
    best = max(rows, key=lambda r: r[1])[0]
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strength", "psnr", "ssim", "perc", "best"])
        for s, p, ss, pc in rows:
            w.writerow([f"{s:.2f}", f"{p:.4f}", f"{ss:.5f}", f"{pc:.5f}", int(s == best)])
    table = ["strength    psnr     ssim   perc(proxy)"]
    table += [f"{s:8.2f} {p:8.3f} {ss:8.4f} {pc:10.5f}{'  *' if s == best else ''}" for s, p, ss, pc in rows]
    Path(report_path).with_suffix(".summary.txt").write_text(
        f"config_hash = {cfg.hash()}\n" + "\n".join(table) + "\n")
    return rows


def cmd_optimize_view(cfg: Config, base_ckpt, lora_ckpt, input_png: Path, scene_file: Path, out_dir: Path,
                      force: bool = False):
    """Reconstruct from oracle-generated views conditioned on the input image,
    then run pose search and residual optimization against it."""
    from .core import Rng, load_png, load_scene, make_canonical_rig, save_png, save_scene
    from .oracle_models import mv_generate
    from .reconstructor import forward, load_lora
    from .renderer import render
    from .view_opt import SearchConfig, optimize_residual, pose_search
    base = load_base(base_ckpt, cfg)
    lora = load_lora(lora_ckpt) if lora_ckpt else None
    if not Path(input_png).exists():
        raise DataError(f"input image {input_png} not found")
    image = load_png(input_png)
    res = cfg["rig.resolution"]
    if image.shape != (res, res, 3):
        raise DataError(f"input image is {image.shape[1]}x{image.shape[0]}, config expects {res}x{res}")
    if not Path(scene_file).exists():
        raise DataError(f"scene file {scene_file} not found")
    gt_scene = load_scene(scene_file)
    rig = make_canonical_rig(cfg["rig.extent"])
    out = _prepare_out(Path(out_dir), force)
    inputs = mv_generate(image, gt_scene, rig, inconsistency(cfg), Rng(cfg["seeds.seed"]).split(7))
    theta = forward(inputs, base, lora)
    search = pose_search(theta, image, SearchConfig(cfg["view_opt.azimuth_step"], cfg.elevations,
                                                     cfg["view_opt.tolerance"], cfg["rig.extent"]))
    _, updated, report = optimize_residual(theta, search.pose, image, cfg["view_opt.iters"], cfg["view_opt.lr"])
    save_png(out / "before.png", render(theta, search.pose, res))
    save_png(out / "after.png", render(updated, search.pose, res))
    save_scene(out / "optimized.mvbgs", updated)
    report.write_csv(out / "report.csv")
    (out / "manifest.txt").write_text(f"config_hash = {cfg.hash()}\nseed = {cfg['seeds.seed']}\n")
    return report


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvboost", description="Desk-scale multi-view boosting pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="MVB-CONFIG file (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true")
        return p

    p = common(sub.add_parser("gen-scenes", help="write ground-truth scenes and renders"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("pretrain", help="pretrain the base reconstructor"))
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("build-dataset", help="refined multi-view dataset from generated views"))
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("train", help="LoRA boost training with the base frozen"))
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("eval", help="base vs boosted metrics on held-out scenes"))
    p.add_argument("--scenes", type=Path, required=True, help="gen-scenes output or built dataset")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--lora", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("ablate-strength", help="pseudo-GT quality per refinement strength"))
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--strengths", type=str, default=",".join(f"{s:g}" for s in DEFAULT_STRENGTHS))
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("optimize-view", help="pose search + residual optimization"))
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--lora", type=Path, default=None)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True, help="ground-truth scene driving the generator oracle")
    p.add_argument("--out", type=Path, required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .core import ParameterError
    from .pipeline import ConfigurationError, NumericalAbort
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        c = args.command
        if c == "gen-scenes":
            cmd_gen_scenes(cfg, args.count, args.out, args.force)
        elif c == "pretrain":
            cmd_pretrain(cfg, args.out, args.out.with_suffix(".log.csv"))
        elif c == "build-dataset":
            cmd_build_dataset(cfg, args.scenes, args.base, args.out, args.force)
        elif c == "train":
            cmd_train(cfg, args.dataset, args.base, args.out)
        elif c == "eval":
            cmd_eval(cfg, args.base, args.lora, args.scenes, args.out)
        elif c == "ablate-strength":
            strengths = [float(s) for s in args.strengths.split(",") if s.strip()]
            cmd_ablate_strength(cfg, args.base, strengths, args.out, args.scenes)
            print(Path(args.out).with_suffix(".summary.txt").read_text(), end="")
        elif c == "optimize-view":
            rep = cmd_optimize_view(cfg, args.base, args.lora, args.input, args.scene, args.out, args.force)
            print(f"pose az={rep.pose.azimuth:.2f} el={rep.pose.elevation:.2f} "
                  f"dist {rep.dist_before:.5f} -> {rep.dist_after:.5f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (DataError, ConfigurationError, ParameterError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
