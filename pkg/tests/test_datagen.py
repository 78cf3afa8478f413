import json
import math

import numpy as np
import pytest

from lidar_realism import datagen as D
from lidar_realism.geom import PointCloud, ProjectionModel, project_cylindrical


def trace_oracle(scene, model, max_range):
    """All-pairs scalar ray x primitive intersection (flat ground only)."""
    out = np.zeros((model.H, model.W))
    dirs = model.ray_directions()
    for i in range(model.H):
        for j in range(model.W):
            d = dirs[i, j]
            best = math.inf
            if d[2] < 0:
                best = -scene.sensor_height / d[2]
            for cx, cy, cz, r in scene.spheres:
                b = d[0] * cx + d[1] * cy + d[2] * cz
                disc = b * b - (cx * cx + cy * cy + cz * cz - r * r)
                if disc >= 0:
                    for t in (b - math.sqrt(disc), b + math.sqrt(disc)):
                        if t > 0:
                            best = min(best, t)
                            break
            for box in scene.boxes:
                lo, hi = -math.inf, math.inf
                for a in range(3):
                    if d[a] == 0:
                        if not box[a] <= 0 <= box[a + 3]:
                            lo, hi = 1, 0
                        continue
                    t1, t2 = box[a] / d[a], box[a + 3] / d[a]
                    lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
                if hi >= lo and lo > 0:
                    best = min(best, lo)
            out[i, j] = best if best <= max_range else 0.0
    return out


def test_ray_tracing_matches_brute_force_oracle(rng):
    model = ProjectionModel(H=8, W=32)
    for seed in range(10):
        r = np.random.default_rng(seed)
        ns, nb = r.integers(0, 3), r.integers(0, 3)
        spheres = np.array([[*r.uniform(-15, 15, 2), r.uniform(-1, 1), r.uniform(0.5, 2)] for _ in range(ns)])
        boxes = []
        for _ in range(nb):
            c = r.uniform(-15, 15, 2)
            h = r.uniform(0.5, 3, 2)
            boxes.append([c[0] - h[0], c[1] - h[1], -1.73, c[0] + h[0], c[1] + h[1], r.uniform(-1, 2)])
        spheres = spheres.reshape(-1, 4)
        boxes = np.array(boxes).reshape(-1, 6)
        # keep the sensor outside every primitive
        spheres = spheres[np.linalg.norm(spheres[:, :3], axis=1) > spheres[:, 3] + 0.1]
        inside = (boxes[:, 0] < 0) & (boxes[:, 3] > 0) & (boxes[:, 1] < 0) & (boxes[:, 4] > 0)
        boxes = boxes[~inside]
        scene = D.Scene(1.73, spheres, boxes)
        img = D.trace(scene, model, 80.0)
        np.testing.assert_allclose(img.depth, trace_oracle(scene, model, 80.0), atol=1e-9)


def test_sphere_on_ray_axis():
    model = ProjectionModel(H=4, W=16)
    d = model.ray_directions()[1, 5]
    scene = D.Scene(100.0, np.array([[*(10 * d), 2.0]]))
    assert D.trace(scene, model, 80.0).depth[1, 5] == pytest.approx(8.0, abs=1e-9)


def test_empty_scene_lies_on_the_ground():
    cfg = D.GeneratorConfig("GeoSet", 3, params={"n_spheres": (0, 0), "n_boxes": (0, 0)})
    s = D.gen_geoset(cfg)
    assert len(s.cloud) > 0
    np.testing.assert_allclose(s.cloud.points[:, 2], -1.73, atol=1e-9)


def test_generators_are_deterministic():
    for kind in D.KINDS:
        a = D.generate(D.GeneratorConfig(kind, 7))
        b = D.generate(D.GeneratorConfig(kind, 7))
        assert np.array_equal(a.cloud.points, b.cloud.points)
        assert a.category == D.CATEGORY_OF_KIND[kind]


def test_generator_config_validation():
    with pytest.raises(ValueError):
        D.GeneratorConfig("Nope")
    with pytest.raises(ValueError):
        D.GeneratorConfig("GeoSet", params={"bogus": 1})
    with pytest.raises(ValueError):
        D.GeneratorConfig("Misc3", params={"noise_sigma": (-1.0, 0.0)})


def _misc(kind, **p):
    return D.misc_image(D.GeneratorConfig(kind, 5, params=p))


def test_misc1_and_misc2_ramps():
    m1 = _misc("Misc1", noise_sigma=(0.0, 0.0))
    assert np.all(m1.depth == m1.depth[:, :1])
    assert np.all(np.diff(m1.depth[:, 0]) > 0)
    assert m1.depth[0, 0] == 2.0 and m1.depth[-1, 0] == 80.0
    m2 = _misc("Misc2", noise_sigma=(0.0, 0.0))
    assert np.all(m2.depth == m2.depth[:1, :])
    assert np.all(np.diff(m2.depth[0]) > 0)


def test_misc3_sigma_statistic():
    model = ProjectionModel(H=100, W=100)
    img = D.misc_image(D.GeneratorConfig("Misc3", 1, model, {"sigma": (0.5, 0.5), "mean_depth": (30.0, 30.0)}))
    assert abs(img.depth.std() - 0.5) < 0.025


def test_misc4_patches_are_constant_without_noise():
    img, labels = D.misc_image(D.GeneratorConfig("Misc4", 9, params={"noise_sigma": (0.0, 0.0)}), True)
    ids = set(labels[labels >= 0].tolist())
    assert ids
    for k in ids:
        vals = img.depth[labels == k]
        assert np.all(vals == vals[0])


def test_augment_syn_is_radial_and_calibrated():
    pts = np.random.default_rng(0).normal(size=(10_000, 3)) * 10
    cloud = PointCloud(pts)
    assert D.augment_syn(cloud, (0.0, 0.0), 1) is cloud
    out = D.augment_syn(cloud, (0.3, 0.3), 1).points
    u0 = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    u1 = out / np.linalg.norm(out, axis=1, keepdims=True)
    assert np.max(np.abs(u0 - u1)) < 1e-9
    resid = np.linalg.norm(out, axis=1) - np.linalg.norm(pts, axis=1)
    assert abs(resid.std() - 0.3) < 0.03
    with pytest.raises(ValueError):
        D.augment_syn(cloud, (0.2, 0.1), 0)


def test_pseudoreal_dropout_rate():
    model = ProjectionModel(H=64, W=512)
    params = {"dropout": 0.2, "n_spheres": (0, 0), "n_boxes": (0, 0), "n_cylinders": (0, 0),
              "n_composites": (0, 0), "undulation_amplitude": 0.0, "noise_base": 0.0, "noise_per_meter": 0.0}
    img = D.pseudoreal_image(D.GeneratorConfig("PseudoReal", 4, model, params))
    clean = D.geoset_image(D.GeneratorConfig("GeoSet", 4, model, {"n_spheres": (0, 0), "n_boxes": (0, 0)}))
    frac = 1 - img.valid.sum() / clean.valid.sum()
    assert abs(frac - 0.2) < 0.02


def test_pseudoreal_without_enrichment_equals_geoset():
    a = D.pseudoreal_image(D.GeneratorConfig("PseudoReal", 11, params={"enrich": False}))
    b = D.geoset_image(D.GeneratorConfig("GeoSet", 11))
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.valid, b.valid)


def test_pseudoreal_ids_and_category():
    s = D.gen_pseudoreal(D.GeneratorConfig("PseudoReal", 2, dataset_id=1))
    assert s.category == "Real" and s.dataset_id == 1


def test_materialize_registry(tmp_path):
    model = ProjectionModel(H=8, W=32)
    reg = D.default_registry()
    counts = {"train": 2, "val": 1, "test": 1}
    manifest = D.materialize_registry(reg, counts, 0, tmp_path / "a", model)
    rows = D.read_manifest(manifest)
    n_train = sum(e.train for e in reg)
    assert len(rows) == n_train * 4 + (len(reg) - n_train)
    paths = {}
    for r in rows:
        assert paths.setdefault(r["relative_path"], r["split"]) == r["split"]
    again = D.materialize_registry(reg, counts, 0, tmp_path / "b", model)
    for r in D.read_manifest(again):
        assert (tmp_path / "a" / r["relative_path"]).read_bytes() == (tmp_path / "b" / r["relative_path"]).read_bytes()
    loaded = D.load_split(manifest, "train")
    want = [(r["category"], r["dataset_id"]) for r in rows if r["split"] == "train"]
    assert [(s.category, s.dataset_id) for s in loaded] == want
    held = {e.name for e in reg if not e.train}
    assert all(r["split"] == "test" for r in rows if r["dataset"] in held)
    reg2 = D.registry_from_json(json.loads(json.dumps(D.registry_to_json(reg))))
    assert [e.name for e in reg2] == [e.name for e in reg]


def test_registry_rejects_category_mismatch():
    with pytest.raises(ValueError):
        D.DatasetEntry("x", "Real", 0, "GeoSet")


def test_backprojected_generator_output_reprojects(rng):
    model = ProjectionModel()
    img = D.geoset_image(D.GeneratorConfig("GeoSet", 21))
    again = project_cylindrical(D.backproject(img), model)
    assert np.array_equal(again.valid, img.valid)
