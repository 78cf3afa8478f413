import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_realism.geom import (PointCloud, ProjectionModel, RangeImage, backproject, load_range_image,
                                normalize_neighborhood, project_cylindrical, read_kitti_bin, read_ply,
                                save_range_image, write_kitti_bin, write_ply)


def bin_oracle(points, model):
    """Per-point binning with scalar math, nearest return per cell."""
    depth = {}
    dropped = 0
    for x, y, z in points:
        r = math.sqrt(x * x + y * y + z * z)
        el = math.asin(max(-1.0, min(1.0, z / r)))
        if el > model.elevation_max or el < model.elevation_min:
            dropped += 1
            continue
        az = math.atan2(y, x)
        col = int(math.floor((az + math.pi) / (2 * math.pi / model.W))) % model.W
        row = min(model.H - 1, max(0, int(math.floor((model.elevation_max - el) / model.d_elevation))))
        if (row, col) not in depth or r < depth[(row, col)]:
            depth[(row, col)] = r
    return depth, dropped


# --- PointCloud / RangeImage validation ------------------------------------------


def test_point_cloud_rejects_non_finite_and_bad_shape():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    assert len(PointCloud.empty()) == 0


def test_point_cloud_is_read_only():
    c = PointCloud(np.ones((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


def test_projection_model_invariants():
    with pytest.raises(ValueError):
        ProjectionModel(H=0)
    with pytest.raises(ValueError):
        ProjectionModel(elevation_min=0.1, elevation_max=0.1)


def test_range_image_fills_invalid_cells_and_rejects_bad_depth():
    m = ProjectionModel(H=2, W=2)
    img = RangeImage(np.array([[5.0, 7.0], [1.0, 2.0]]), np.array([[True, False], [True, True]]), m)
    assert img.depth[0, 1] == m.invalid_depth
    with pytest.raises(ValueError):
        RangeImage(np.array([[-1.0, 1.0], [1.0, 1.0]]), np.ones((2, 2), bool), m)
    with pytest.raises(ValueError):
        RangeImage(np.full((2, 2), np.inf), np.zeros((2, 2), bool), m)


# --- projection ----------------------------------------------------------------------


def test_axis_aligned_point_lands_in_the_phi_zero_column():
    m = ProjectionModel(H=1, W=4, elevation_min=-0.5, elevation_max=0.5)
    img = project_cylindrical(PointCloud(np.array([[1.0, 0.0, 0.0]])), m)
    # phi = 0 sits at the start of column 2 of [-pi, pi) split in 4
    assert img.valid.tolist() == [[False, False, True, False]]
    assert img.depth[0, 2] == 1.0


def test_empty_cloud_gives_all_invalid_image():
    img = project_cylindrical(PointCloud.empty(), ProjectionModel())
    assert not img.valid.any()
    assert np.all(img.depth == 0.0)


def test_row_zero_is_the_highest_elevation():
    m = ProjectionModel(H=8, W=16)
    high = [math.cos(0.0), 0.0, math.tan(m.elevation_max - 0.01)]
    low = [1.0, 0.0, math.tan(m.elevation_min + 0.01)]
    img = project_cylindrical(PointCloud(np.array([high, low])), m)
    rows = np.nonzero(img.valid)[0]
    assert sorted(rows.tolist()) == [0, m.H - 1]


def test_nearest_return_wins_collisions():
    m = ProjectionModel(H=4, W=8)
    d = m.ray_directions()[1, 3]
    img = project_cylindrical(PointCloud(np.array([5 * d, 3 * d, 4 * d])), m)
    assert img.depth[1, 3] == pytest.approx(3.0, abs=1e-12)
    assert img.valid.sum() == 1


def test_out_of_range_points_are_dropped_and_counted():
    m = ProjectionModel(H=4, W=8)
    pts = np.array([[1.0, 0.0, 5.0], [1.0, 0.0, -5.0], [1.0, 0.0, -0.1]])
    img = project_cylindrical(PointCloud(pts), m)
    assert img.dropped == 2
    assert img.valid.sum() == 1


def test_origin_point_is_rejected():
    with pytest.raises(ValueError):
        project_cylindrical(PointCloud(np.zeros((1, 3))), ProjectionModel())


def test_projection_matches_binning_oracle_on_random_points(rng):
    m = ProjectionModel(H=4, W=8)
    for _ in range(100):
        pts = rng.normal(size=(8, 3)) * [10, 10, 1.5]
        img = project_cylindrical(PointCloud(pts), m)
        depth, dropped = bin_oracle(pts, m)
        assert img.dropped == dropped
        assert set(zip(*np.nonzero(img.valid))) == set(depth)
        for (r, c), v in depth.items():
            assert img.depth[r, c] == v


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-20, 3)), min_size=1, max_size=40))
def test_projection_matches_oracle_property(points):
    pts = np.array(points, dtype=np.float64)
    pts = pts[np.linalg.norm(pts, axis=1) > 1e-3]
    m = ProjectionModel(H=6, W=12)
    img = project_cylindrical(PointCloud(pts.reshape(-1, 3)), m)
    depth, dropped = bin_oracle(pts, m)
    assert img.dropped == dropped
    assert int(img.valid.sum()) == len(depth)
    for (r, c), v in depth.items():
        assert img.depth[r, c] == v


def test_cell_center_cloud_roundtrips_exactly(rng):
    m = ProjectionModel(H=16, W=64)
    depth = rng.uniform(1, 50, size=(m.H, m.W))
    valid = rng.random((m.H, m.W)) < 0.7
    img = RangeImage(depth, valid, m)
    cloud = backproject(img)
    again = project_cylindrical(cloud, m)
    assert np.array_equal(again.valid, img.valid)
    np.testing.assert_allclose(again.depth, img.depth, atol=1e-9)
    np.testing.assert_allclose(backproject(again).points, cloud.points, atol=1e-9)


def test_arbitrary_cloud_roundtrip_within_half_bin(rng):
    m = ProjectionModel(H=32, W=128)
    pts = rng.normal(size=(3000, 3)) * [20, 20, 2]
    img = project_cylindrical(PointCloud(pts), m)
    rec = backproject(img).points
    # the survivor of each cell is the nearest original binned there
    owner = {}
    for p in pts:
        r = float(np.linalg.norm(p))
        el = np.arcsin(p[2] / r)
        if not m.elevation_min <= el <= m.elevation_max:
            continue
        col = int(np.floor((np.arctan2(p[1], p[0]) + np.pi) / m.d_azimuth)) % m.W
        row = min(m.H - 1, int(np.floor((m.elevation_max - el) / m.d_elevation)))
        if (row, col) not in owner or r < owner[(row, col)][0]:
            owner[(row, col)] = (r, p)
    cells = list(zip(*np.nonzero(img.valid)))
    assert len(cells) == len(owner) == len(rec)
    for q, cell in zip(rec, cells):
        r, p = owner[cell]
        assert np.linalg.norm(q) == pytest.approx(r, abs=1e-9)
        daz = np.angle(np.exp(1j * (np.arctan2(p[1], p[0]) - np.arctan2(q[1], q[0]))))
        assert abs(daz) <= m.d_azimuth / 2 + 1e-9
        assert abs(np.arcsin(p[2] / r) - np.arcsin(q[2] / r)) <= m.d_elevation / 2 + 1e-9


def test_all_invalid_image_backprojects_to_empty_cloud():
    m = ProjectionModel(H=3, W=5)
    assert len(backproject(RangeImage(np.zeros((3, 5)), np.zeros((3, 5), bool), m))) == 0


# --- neighborhood normalization -------------------------------------------------------


def test_normalize_neighborhood_examples(rng):
    q = np.array([1.0, 2.0, 3.0])
    assert normalize_neighborhood(np.array([[1.0, 2.0, 4.0]]), q).tolist() == [[0.0, 0.0, 1.0]]
    assert not normalize_neighborhood(np.array([q, q]), q).any()
    nb = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(normalize_neighborhood(nb, q), np.array([[a - b for a, b in zip(p, q)] for p in nb]))


def test_normalize_neighborhood_is_translation_invariant(rng):
    nb = rng.normal(size=(5, 7, 3))
    q = rng.normal(size=(5, 3))
    t = rng.normal(size=3)
    np.testing.assert_allclose(normalize_neighborhood(nb + t, q + t), normalize_neighborhood(nb, q), atol=1e-12)


# --- file formats ------------------------------------------------------------------------


def test_kitti_bin_roundtrip_and_layout(tmp_path, rng):
    pts = rng.normal(size=(50, 3)) * 10
    path = tmp_path / "scan.bin"
    write_kitti_bin(PointCloud(pts), path, intensity=0.5)
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    assert raw.shape == (50, 4)
    assert np.all(raw[:, 3] == 0.5)
    np.testing.assert_array_equal(read_kitti_bin(path).points, pts.astype(np.float32).astype(np.float64))


def test_kitti_bin_rejects_truncated_file(tmp_path):
    path = tmp_path / "bad.bin"
    np.zeros(6, dtype="<f4").tofile(path)
    with pytest.raises(ValueError):
        read_kitti_bin(path)


def test_ply_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(12, 3))
    cols = rng.integers(0, 256, size=(12, 3))
    write_ply(tmp_path / "c.ply", pts, cols)
    p, c = read_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(p, pts, atol=1e-6)
    assert np.array_equal(c, cols)
    header = (tmp_path / "c.ply").read_text().splitlines()[:10]
    assert "element vertex 12" in header and "property uchar red" in header


def test_range_image_file_roundtrip(tmp_path, rng):
    m = ProjectionModel(H=4, W=6, elevation_min=-0.3, elevation_max=0.1)
    img = RangeImage(rng.uniform(1, 9, (4, 6)), rng.random((4, 6)) > 0.3, m)
    save_range_image(tmp_path / "x.npz", img)
    back = load_range_image(tmp_path / "x.npz")
    assert back.model == m
    assert np.array_equal(back.depth, img.depth) and np.array_equal(back.valid, img.valid)
