import numpy as np
import pytest
import torch

from scenemocap.camera import back_project
from scenemocap.fileio import read_ply
from scenemocap.scene import (FrameDepthParams, SceneError, UniformGridIndex,
                              aggregate_background, build_point_cloud,
                              depth_to_disparity, disparity_to_depth,
                              flip_disparity_polarity)


def test_frame_depth_params_ordering():
    FrameDepthParams(0.5, 10.0)
    with pytest.raises(SceneError):
        FrameDepthParams(2.0, 1.0)
    with pytest.raises(SceneError):
        FrameDepthParams(0.0, 1.0)


def test_disparity_boundaries():
    assert abs(disparity_to_depth(1.0, 0.7, 9.0) - 0.7) < 1e-12
    assert abs(disparity_to_depth(0.0, 0.7, 9.0) - 9.0) < 1e-12


def test_disparity_midpoint_value():
    # direct evaluation: zf*zn / (d*(zf-zn)+zn) at d=0.5, zn=1, zf=2
    assert abs(disparity_to_depth(0.5, 1.0, 2.0) - 4.0 / 3.0) < 1e-12


def test_disparity_monotone_decreasing():
    d = np.linspace(0, 1, 101)
    depth = disparity_to_depth(d, 0.5, 8.0)
    assert np.all(np.diff(depth) < 0)
    assert depth.min() >= 0.5 - 1e-12 and depth.max() <= 8.0 + 1e-12


def test_disparity_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(5):
        zn = rng.uniform(0.2, 2.0)
        zf = zn + rng.uniform(1.0, 10.0)
        depth = rng.uniform(zn, zf, size=(37, 53))
        d = depth_to_disparity(depth, zn, zf)
        assert d.min() > -1e-9 and d.max() < 1 + 1e-9
        back = disparity_to_depth(d, zn, zf)
        assert np.abs(back - depth).max() < 1e-6


def test_disparity_polarity_flip():
    d = np.array([0.0, 0.25, 1.0])
    assert np.allclose(flip_disparity_polarity(d), [1.0, 0.75, 0.0])


def test_disparity_rejects_bad_range():
    with pytest.raises(SceneError):
        disparity_to_depth(np.zeros((2, 2)), 3.0, 1.0)


def test_disparity_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    d = torch.as_tensor(rng.uniform(0, 1, size=(9, 11)))
    zn = torch.tensor(0.8, requires_grad=True)
    zf = torch.tensor(6.5, requires_grad=True)
    out = disparity_to_depth(d, zn, zf).sum()
    g_zn, g_zf = torch.autograd.grad(out, [zn, zf])
    step = 1e-6
    for var, g in (("zn", g_zn), ("zf", g_zf)):
        vals = []
        for sgn in (1, -1):
            a = 0.8 + sgn * step if var == "zn" else 0.8
            b = 6.5 + sgn * step if var == "zf" else 6.5
            vals.append(float(disparity_to_depth(d, torch.tensor(a), torch.tensor(b)).sum()))
        num = (vals[0] - vals[1]) / (2 * step)
        assert abs(float(g) - num) <= 1e-5 * abs(num)


def test_aggregate_background_constant_and_median():
    depths = np.stack([np.full((4, 4), 3.3)] * 5)
    masks = np.ones((5, 4, 4), bool)
    med, valid = aggregate_background(depths, masks)
    assert valid.all() and np.allclose(med, 3.3)

    vals = np.array([1.0, 2.0, 100.0])
    depths = vals[:, None, None] * np.ones((3, 2, 2))
    med, _ = aggregate_background(depths, np.ones((3, 2, 2), bool))
    assert np.allclose(med, 2.0)


def test_aggregate_background_even_count_mean_of_central():
    vals = np.array([1.0, 2.0, 4.0, 8.0])
    depths = vals[:, None, None] * np.ones((4, 1, 1))
    med, _ = aggregate_background(depths, np.ones((4, 1, 1), bool))
    assert abs(med[0, 0] - 3.0) < 1e-12


def test_aggregate_background_never_background_invalid():
    depths = np.ones((3, 2, 2))
    masks = np.ones((3, 2, 2), bool)
    masks[:, 0, 0] = False
    med, valid = aggregate_background(depths, masks)
    assert not valid[0, 0] and valid[1, 1]
    assert med[0, 0] == 0.0


def test_aggregate_background_permutation_invariant():
    rng = np.random.default_rng(2)
    depths = rng.uniform(1, 9, size=(7, 6, 5))
    masks = rng.random((7, 6, 5)) > 0.3
    med1, v1 = aggregate_background(depths, masks)
    perm = rng.permutation(7)
    med2, v2 = aggregate_background(depths[perm], masks[perm])
    assert np.array_equal(v1, v2)
    assert np.allclose(med1, med2, equal_nan=True)


def test_aggregate_background_robust_to_corruption():
    rng = np.random.default_rng(3)
    t, h, w = 20, 24, 32
    clean = rng.uniform(2, 6, size=(h, w))
    depths = np.tile(clean, (t, 1, 1))
    corrupted_frames = rng.choice(t, size=int(0.4 * t), replace=False)
    for f in corrupted_frames:
        hit = rng.random((h, w)) < 0.3  # each bad frame corrupts random pixels
        depths[f] += np.where(hit, 10.0, 0.0)
    med, _ = aggregate_background(depths, np.ones((t, h, w), bool))
    frac_clean = np.mean(np.abs(med - clean) < 1e-9)
    assert frac_clean >= 0.99


def test_aggregate_sort_based_reference():
    rng = np.random.default_rng(4)
    depths = rng.uniform(0, 10, size=(9, 8, 8))
    masks = rng.random((9, 8, 8)) > 0.4
    med, valid = aggregate_background(depths, masks)
    for i in range(8):
        for j in range(8):
            sel = np.sort(depths[masks[:, i, j], i, j])
            if len(sel) == 0:
                assert not valid[i, j]
                continue
            k = len(sel)
            want = sel[k // 2] if k % 2 else 0.5 * (sel[k // 2 - 1] + sel[k // 2])
            assert abs(med[i, j] - want) < 1e-12


def test_point_cloud_plane(cam):
    depth = np.full((cam.height, cam.width), 3.0)
    cloud = build_point_cloud(depth, np.ones_like(depth, bool), cam, voxel_size=0)
    assert np.allclose(cloud.points[:, 2], 3.0)
    assert len(cloud) == cam.height * cam.width


def test_point_cloud_count_matches_valid(cam):
    rng = np.random.default_rng(5)
    depth = rng.uniform(1, 5, size=(cam.height, cam.width))
    valid = rng.random((cam.height, cam.width)) > 0.5
    cloud = build_point_cloud(depth, valid, cam, voxel_size=0)
    assert len(cloud) == valid.sum()
    # every point back-projects to a real pixel
    for k in rng.integers(0, len(cloud), size=20):
        col, row = cloud.source_pixels[k]
        expected = back_project(cam, np.array([col, row], float), depth[row, col])
        assert np.abs(cloud.points[k] - expected).max() < 1e-12


def test_point_cloud_voxel_downsample_keeps_real_points(cam):
    rng = np.random.default_rng(6)
    depth = rng.uniform(1, 5, size=(cam.height, cam.width))
    full = build_point_cloud(depth, np.ones_like(depth, bool), cam, voxel_size=0)
    down = build_point_cloud(depth, np.ones_like(depth, bool), cam, voxel_size=0.3)
    assert 0 < len(down) < len(full)
    full_set = {tuple(p) for p in np.round(full.points, 9)}
    assert all(tuple(p) in full_set for p in np.round(down.points, 9))


def test_empty_cloud_raises(cam):
    with pytest.raises(SceneError):
        build_point_cloud(np.ones((4, 4)), np.zeros((4, 4), bool), cam)


def test_nearest_point_exact_and_ties():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    idx = UniformGridIndex(pts, cell_size=0.25)
    i, d = idx.nearest_index(np.array([0.0, 0.0, 0.0]))
    assert i == 0 and d == 0.0
    i, d = idx.nearest_index(np.array([1.2, 0.0, 0.0]))
    assert i == 1  # tie between duplicate points resolves to the lowest index


def test_nearest_point_above_plane():
    xs, zs = np.meshgrid(np.linspace(-3, 3, 61), np.linspace(-3, 3, 61))
    plane = np.stack([xs.ravel(), np.ones(xs.size), zs.ravel()], axis=1)
    cloud = UniformGridIndex(plane, cell_size=0.25)
    _, d = cloud.nearest_index(np.array([0.03, 0.0, -0.02]))  # 1 m above (y down)
    assert abs(d - 1.0) < 0.01


def test_nearest_matches_linear_scan():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-3, 3, size=(2000, 3))
    idx = UniformGridIndex(pts, cell_size=0.25)
    queries = np.concatenate([
        rng.uniform(-3.5, 3.5, size=(800, 3)),
        pts[rng.integers(0, 2000, 100)],            # exact hits
        rng.uniform(-9, 9, size=(100, 3)),          # far outside the cloud
    ])
    for q in queries:
        i, d = idx.nearest_index(q)
        d2 = np.einsum("ij,ij->i", pts - q, pts - q)
        want = int(np.argmin(d2))
        assert i == want
        assert abs(d - np.sqrt(d2[want])) < 1e-12


def test_ply_export_round_trip(tmp_path, cam):
    depth = np.full((cam.height, cam.width), 2.5)
    cloud = build_point_cloud(depth, np.ones_like(depth, bool), cam, voxel_size=0.2)
    cloud.save_ply(tmp_path / "scene.ply")
    verts, faces = read_ply(tmp_path / "scene.ply")
    assert faces is None
    assert np.abs(verts - cloud.points).max() < 1e-6  # float32 quantization
