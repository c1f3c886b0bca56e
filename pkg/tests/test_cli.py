import csv

import numpy as np
import pytest

from mvboost.cli import EXIT_CONFIG, EXIT_DATA, main
from mvboost.config import Config, ConfigError, load_config, parse_config
from mvboost.core import load_png, save_png

TINY = """MVB-CONFIG v1
# desk-top smoke configuration
[rig]
resolution = 32
[scenes]
splats_per_primitive = 32
[model]
d_model = 16
layers = 1
heads = 2
[optim]
base_steps = 3
base_scenes = 2
boost_steps = 3
[loss]
perceptual_resolution = 16
[view_opt]
iters = 5
elevations = 0
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    cfg = str(root / "tiny.cfg")
    assert main(["gen-scenes", "--config", cfg, "--count", "3", "--out", str(root / "scenes")]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(root / "base.npz")]) == 0
    assert main(["build-dataset", "--config", cfg, "--scenes", str(root / "scenes"),
                 "--base", str(root / "base.npz"), "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", cfg, "--dataset", str(root / "ds"), "--base", str(root / "base.npz"),
                 "--out", str(root / "lora.npz")]) == 0
    return root, cfg


def test_config_defaults_and_hash():
    c = Config()
    assert c["refine.strength"] == 0.95 and c["lora.rank"] == 32 and c["eval.orbit_steps"] == 24
    assert parse_config(c.canonical_text()).hash() == c.hash()
    c2 = parse_config("MVB-CONFIG v1\n[refine]\nstrength = 0.5\n")
    assert c2.hash() != c.hash()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="refine.strenght"):
        parse_config("[refine]\nstrenght = 0.5\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\nlayers = two\n")


def test_gen_scenes_outputs(work):
    root, _ = work
    assert len(list((root / "scenes").glob("*.mvbgs"))) == 3
    assert len(list((root / "scenes").glob("*.png"))) == 18
    assert "config_hash = " in (root / "scenes" / "manifest.txt").read_text()


def test_gen_scenes_byte_identical(work, tmp_path):
    root, cfg = work
    assert main(["gen-scenes", "--config", cfg, "--count", "3", "--out", str(tmp_path / "again")]) == 0
    for f in (root / "scenes").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_gen_scenes_refuses_nonempty_without_force(work):
    root, cfg = work
    assert main(["gen-scenes", "--config", cfg, "--count", "1", "--out", str(root / "scenes")]) == EXIT_DATA


def test_invalid_config_key_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("[lora]\nrnak = 4\n")
    assert main(["gen-scenes", "--config", str(tmp_path / "bad.cfg"), "--count", "1",
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "lora.rnak" in capsys.readouterr().err


def test_dataset_manifest_has_config_hash(work):
    root, cfg = work
    text = (root / "ds" / "manifest.txt").read_text()
    assert f"config_hash = {load_config(cfg).hash()}" in text


def test_dataset_rebuild_is_resumable(work):
    root, cfg = work
    stamp = (root / "ds" / "scene_00000" / "views.npz").stat().st_mtime_ns
    assert main(["build-dataset", "--config", cfg, "--scenes", str(root / "scenes"),
                 "--base", str(root / "base.npz"), "--out", str(root / "ds")]) == 0
    assert (root / "ds" / "scene_00000" / "views.npz").stat().st_mtime_ns == stamp


def test_dataset_strength_zero_targets_equal_renders(work, tmp_path):
    from mvboost.pipeline import load_dataset, render_scene_views
    from mvboost.reconstructor import forward, load_params
    from mvboost.core import make_canonical_rig
    root, cfg = work
    assert main(["build-dataset", "--config", cfg, "--scenes", str(root / "scenes"), "--strength", "0",
                 "--base", str(root / "base.npz"), "--out", str(tmp_path / "ds0")]) == 0
    base = load_params(root / "base.npz")
    for pair in load_dataset(tmp_path / "ds0"):
        theta = forward(pair.inputs, base)
        assert np.array_equal(pair.targets.images, render_scene_views(theta, make_canonical_rig(), 32))


def test_train_outputs(work):
    root, cfg = work
    rows = list(csv.reader(open(root / "lora.log.csv")))
    assert rows[0] == ["step", "loss", "mse", "perceptual"] and len(rows) == 4
    assert "config_hash" in (root / "lora.npz.manifest.txt").read_text()


def test_train_refuses_resolution_mismatch(work, tmp_path):
    root, _ = work
    (tmp_path / "other.cfg").write_text(TINY.replace("resolution = 32", "resolution = 64"))
    code = main(["train", "--config", str(tmp_path / "other.cfg"), "--dataset", str(root / "ds"),
                 "--base", str(root / "base.npz"), "--out", str(tmp_path / "l.npz")])
    assert code in (EXIT_CONFIG, EXIT_DATA)


def test_eval_report(work):
    root, cfg = work
    out = root / "eval.csv"
    assert main(["eval", "--config", cfg, "--scenes", str(root / "scenes"), "--base", str(root / "base.npz"),
                 "--lora", str(root / "lora.npz"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 6 and {r["model"] for r in rows} == {"base", "boosted"}
    summary = out.with_suffix(".summary.txt").read_text()
    assert "+-" in summary and "[boosted]" in summary


def test_ablate_strength_table(work, capsys):
    root, cfg = work
    out = root / "ablate.csv"
    assert main(["ablate-strength", "--config", cfg, "--base", str(root / "base.npz"), "--scenes", "1",
                 "--strengths", "0,0.5,0.95", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0]) == ["strength", "psnr", "ssim", "perc", "best"]
    assert [r["strength"] for r in rows] == ["0.00", "0.50", "0.95"]
    assert sum(int(r["best"]) for r in rows) == 1


def test_optimize_view(work):
    root, cfg = work
    out = root / "vo"
    code = main(["optimize-view", "--config", cfg, "--base", str(root / "base.npz"), "--lora", str(root / "lora.npz"),
                 "--input", str(root / "scenes" / "scene_00000_front.png"),
                 "--scene", str(root / "scenes" / "scene_00000.mvbgs"), "--out", str(out)])
    assert code == 0
    assert (out / "before.png").exists() and (out / "after.png").exists()
    head = (out / "report.csv").read_text().splitlines()[0]
    assert "dist_before" in head and "dist_after" in head


def test_optimize_view_rejects_wrong_resolution(work, tmp_path):
    root, cfg = work
    save_png(tmp_path / "big.png", np.zeros((48, 48, 3)))
    code = main(["optimize-view", "--config", cfg, "--base", str(root / "base.npz"), "--input",
                 str(tmp_path / "big.png"), "--scene", str(root / "scenes" / "scene_00000.mvbgs"),
                 "--out", str(tmp_path / "vo")])
    assert code == EXIT_DATA
