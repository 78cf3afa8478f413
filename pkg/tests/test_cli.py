import csv
import json

import numpy as np
import pytest

from lidar_realism import datagen, upsample
from lidar_realism.cli import main
from lidar_realism.geom import ProjectionModel, RangeImage, load_range_image, save_range_image

SMALL = ["--height", "16", "--width", "64"]
TINY_ARCH = ["--q1", "32", "--k1", "4", "--q2", "8", "--k2", "4"]

REGISTRY = [
    {"name": "real", "category": "Real", "dataset_id": 0, "kind": "PseudoReal", "params": {}, "train": True},
    {"name": "syn", "category": "Syn", "dataset_id": 0, "kind": "GeoSet", "params": {}, "train": True},
    {"name": "misc", "category": "Misc", "dataset_id": 0, "kind": "Misc1", "params": {}, "train": True},
]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    reg = root / "registry.json"
    reg.write_text(json.dumps(REGISTRY))
    out = root / "data"
    assert main(["generate", "--out", str(out), "--registry", str(reg), "--counts", "train=4,val=2,test=2",
                 "--seed", "3", *SMALL]) == 0
    return root, out


@pytest.fixture(scope="module")
def checkpoint(dataset):
    root, data = dataset
    out = root / "metric"
    assert main(["train-metric", "--data", str(data), "--out", str(out), "--steps", "4", "--batch-size", "3",
                 "--log-every", "2", *TINY_ARCH]) == 0
    return out / "metric.ckpt"


def test_generate_counts_and_snapshot(dataset, tmp_path):
    root, data = dataset
    manifest = datagen.read_manifest(data / "manifest.jsonl")
    assert len(manifest) == 3 * (4 + 2 + 2)
    for split, n in (("train", 4), ("val", 2), ("test", 2)):
        assert sum(r["split"] == split for r in manifest) == 3 * n
    snap = json.loads((data / "resolved_config.json").read_text())
    assert snap["command"] == "generate" and snap["seed"] == 3 and snap["height"] == 16


def test_generate_fifty_each(tmp_path):
    reg = tmp_path / "r.json"
    reg.write_text(json.dumps(REGISTRY))
    assert main(["generate", "--out", str(tmp_path / "d"), "--registry", str(reg), "--counts", "train=50",
                 "--height", "8", "--width", "16"]) == 0
    assert len(datagen.read_manifest(tmp_path / "d" / "manifest.jsonl")) == 150


def test_generate_rerun_is_byte_identical(dataset, tmp_path):
    root, data = dataset
    again = tmp_path / "again"
    assert main(["generate", "--out", str(again), "--registry", str(root / "registry.json"),
                 "--counts", "train=4,val=2,test=2", "--seed", "3", *SMALL]) == 0
    for row in datagen.read_manifest(data / "manifest.jsonl"):
        rel = row["relative_path"]
        assert (data / rel).read_bytes() == (again / rel).read_bytes()


def test_config_file_and_flag_precedence(dataset, tmp_path):
    root, _ = dataset
    cfg = tmp_path / "c.yaml"
    cfg.write_text("counts: train=1\nheight: 8\nwidth: 32\nseed: 5\n")
    out = tmp_path / "g"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--width", "16",
                 "--registry", str(root / "registry.json")]) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert (snap["height"], snap["width"], snap["seed"]) == (8, 16, 5)


def test_usage_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("no_such_option: 1\n")
    assert main(["generate", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 1
    assert main(["generate"]) == 1  # --out missing
    assert main(["no-such-command"]) == 1
    assert main(["generate", "--out", str(tmp_path / "x"), "--counts", "train:4"]) == 1


def test_train_metric_outputs(checkpoint):
    out = checkpoint.parent
    hist = rows(out / "history.csv")
    assert [int(r["step"]) for r in hist] == [2, 4]
    for col in ("classifier_acc", "adv_real_acc", "adv_syn_acc", "adv_misc_acc", "adv_weighted_acc"):
        assert col in hist[0]
    assert json.loads((out / "resolved_config.json").read_text())["lam"] == 0.3


def test_missing_dataset_exits_2(tmp_path):
    assert main(["train-metric", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_2(dataset, tmp_path):
    _, data = dataset
    code = main(["train-metric", "--data", str(data), "--out", str(tmp_path / "o"), "--steps", "30",
                 "--batch-size", "3", "--lr", "1e300", *TINY_ARCH])
    assert code == 2


def test_sweep_writes_one_history_per_lambda(dataset, tmp_path):
    _, data = dataset
    assert main(["sweep-lambda", "--data", str(data), "--out", str(tmp_path), "--lambdas", "0,10",
                 "--steps", "2", "--batch-size", "3", "--log-every", "1", *TINY_ARCH]) == 0
    for lam in ("0", "10"):
        assert (tmp_path / f"history_lam{lam}.csv").is_file() and (tmp_path / f"metric_lam{lam}.ckpt").is_file()


def test_score_csv_and_ply(dataset, checkpoint, tmp_path):
    _, data = dataset
    assert main(["score", "--checkpoint", str(checkpoint), "--data", str(data), "--split", "test",
                 "--out", str(tmp_path), "--ply", "--per-query"]) == 0
    scores = rows(tmp_path / "scores.csv")
    assert len(scores) == 6
    for r in scores:
        assert sum(float(r[c]) for c in ("S_real", "S_syn", "S_misc")) == pytest.approx(1.0)
    plys = sorted((tmp_path / "ply").glob("*.ply"))
    assert len(plys) == 6
    header = plys[0].read_bytes().split(b"end_header")[0].decode()
    assert "element vertex 8" in header
    assert len(rows(tmp_path / "per_query.csv")) == 6 * 8


def test_score_architecture_guard(dataset, checkpoint, tmp_path):
    _, data = dataset
    args = ["score", "--checkpoint", str(checkpoint), "--data", str(data), "--split", "test", "--out", str(tmp_path)]
    assert main(args + ["--check-arch", *TINY_ARCH]) == 0
    assert main(args + ["--check-arch", "--q1", "48", "--k1", "4", "--q2", "8", "--k2", "4"]) == 1


def test_export_features(dataset, checkpoint, tmp_path):
    _, data = dataset
    assert main(["export-features", "--checkpoint", str(checkpoint), "--data", str(data), "--split", "val",
                 "--out", str(tmp_path)]) == 0
    feats = rows(tmp_path / "features.csv")
    assert len(feats) == 6 * 8  # one row per level-2 query


def _hr_folder(path, n=3):
    path.mkdir()
    m = ProjectionModel(16, 64, np.radians(-25), np.radians(3))
    for i in range(n):
        img = datagen.geoset_image(datagen.GeneratorConfig("GeoSet", 40 + i, m))
        save_range_image(path / f"scene{i}.npz", img)
    return path


def test_upsample_then_score_pipeline(checkpoint, tmp_path):
    hr = _hr_folder(tmp_path / "hr")
    out = tmp_path / "near"
    assert main(["upsample", "--mode", "nearest", "--f-up", "4", "--pair", "--out", str(out), str(hr)]) == 0
    img = load_range_image(out / "scene0.npz")
    assert img.shape == (16, 64)
    src = load_range_image(hr / "scene0.npz")
    np.testing.assert_array_equal(img.depth[::4][src.valid[::4]], src.depth[::4][src.valid[::4]])
    assert main(["score", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "s"), str(out)]) == 0
    assert len(rows(tmp_path / "s" / "scores.csv")) == 3


def test_upsample_without_pairing_grows_rows(tmp_path):
    lr = tmp_path / "lr"
    lr.mkdir()
    m = ProjectionModel(16, 8)
    save_range_image(lr / "a.npz", RangeImage(np.full((16, 8), 5.0), np.ones((16, 8), bool), m))
    assert main(["upsample", "--mode", "nearest", "--f-up", "4", "--out", str(tmp_path / "o"), str(lr)]) == 0
    assert load_range_image(tmp_path / "o" / "a.npz").shape == (64, 8)


def test_learned_upsampling_needs_checkpoint(tmp_path):
    hr = _hr_folder(tmp_path / "hr", 1)
    assert main(["upsample", "--mode", "l1", "--f-up", "4", "--out", str(tmp_path / "o"), str(hr)]) == 1
    assert main(["upsample", "--mode", "gan", "--f-up", "4", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "o"), str(hr)]) == 2


def test_train_upsampler_and_apply(tmp_path):
    out = tmp_path / "up"
    assert main(["train-upsampler", "--mode", "l1", "--steps", "2", "--batch-size", "2", "--n-train", "2",
                 "--channels", "4", "--residual-blocks", "1", "--crop-width", "16", "--out", str(out), *SMALL]) == 0
    assert len(rows(out / "history.csv")) >= 1
    hr = _hr_folder(tmp_path / "hr", 1)
    assert main(["upsample", "--mode", "l1", "--f-up", "4", "--pair", "--checkpoint", str(out / "upsampler.ckpt"),
                 "--out", str(tmp_path / "g"), str(hr)]) == 0
    assert load_range_image(tmp_path / "g" / "scene0.npz").shape == (16, 64)
    assert main(["upsample", "--mode", "l1", "--f-up", "2", "--checkpoint", str(out / "upsampler.ckpt"),
                 "--out", str(tmp_path / "g2"), str(hr)]) == 1


def test_eval_baselines_identical_scenes_are_zero(tmp_path):
    hr = _hr_folder(tmp_path / "hr", 2)
    assert main(["eval-baselines", "--pred", str(hr), "--target", str(hr), "--out", str(tmp_path / "b")]) == 0
    for r in rows(tmp_path / "b" / "baselines.csv"):
        assert float(r["cd_m"]) == 0 and float(r["mae_m"]) == 0 and float(r["mse_m2"]) == 0


def test_eval_baselines_misaligned_lists(tmp_path):
    a = _hr_folder(tmp_path / "a", 2)
    b = _hr_folder(tmp_path / "b", 1)
    assert main(["eval-baselines", "--pred", str(a), "--target", str(b), "--out", str(tmp_path / "o")]) == 1


def test_inputs_are_not_mutated(tmp_path):
    hr = _hr_folder(tmp_path / "hr", 1)
    before = (hr / "scene0.npz").read_bytes()
    main(["upsample", "--mode", "bilinear", "--f-up", "2", "--pair", "--out", str(tmp_path / "o"), str(hr)])
    assert (hr / "scene0.npz").read_bytes() == before
