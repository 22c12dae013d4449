import numpy as np
import pytest

from gfpnet.cloud import PointCloud
from gfpnet.gfs import GfsConfig, gfs_deform, make_label, make_labels
from gfpnet.net import NetworkConfig, chamfer
from gfpnet.pipeline import extract_patches
from gfpnet.shapes import ellipsoid, sphere


def test_fixed_point():
    s = sphere(1000)
    out = gfs_deform(s, PointCloud(s.points))
    assert np.max(np.abs(out.points - s.points)) < 1e-6


def test_radial_growth():
    s = sphere(2000)
    out = gfs_deform(s, PointCloud(sphere(4000, 1.1).points), steps=20, step_size=0.5)
    r = np.linalg.norm(out.points, axis=1).mean()
    assert 1.08 <= r <= 1.12


def test_out_of_reach_points_only_smoothed():
    s = sphere(1500)
    near = s.points[s.points[:, 2] > 0.5] * 1.1
    out = gfs_deform(s, PointCloud(near), steps=1, cutoff=0.2)
    far = s.points[:, 2] < -0.5
    assert np.array_equal(out.points[far], s.points[far])


def test_move_bounded_by_cutoff():
    rng = np.random.default_rng(0)
    s = sphere(800)
    t = PointCloud(rng.normal(size=(300, 3)))
    out = gfs_deform(s, t, steps=3, step_size=0.5, cutoff=0.3)
    assert np.max(np.linalg.norm(out.points - s.points, axis=1)) <= 3 * 0.5 * 0.3 + 1e-12


def test_errors():
    with pytest.raises(ValueError, match="normals required"):
        gfs_deform(PointCloud(np.zeros((5, 3))), PointCloud(np.zeros((5, 3))))
    with pytest.raises(ValueError):
        gfs_deform(sphere(50), PointCloud(sphere(50).points), step_size=0.0)


def _patches(n=200):
    gp = sphere(2048, 0.5)
    obs = ellipsoid((0.6, 0.5, 0.4), 4000, rng=np.random.default_rng(1), rotation=np.eye(3))
    cfg = NetworkConfig()
    idx = np.random.default_rng(2).choice(len(gp), n, replace=False)
    return extract_patches(gp, obs, 0.14, cfg, seed=0, indices=np.sort(idx))


def test_label_identity_template():
    p = _patches(5)[0]
    p.template = PointCloud(p.source.points)
    assert chamfer(make_label(p), p.source) < 1e-3


def test_labels_improve_on_sphere_to_ellipsoid():
    patches = [p for p in _patches() if p.has_template]
    labels = make_labels(patches, GfsConfig(quality_gate=False))
    better = [chamfer(l, p.template) <= chamfer(p.source, p.template) for p, l in zip(patches, labels)]
    assert np.mean(better) >= 0.95
    assert all(len(l) == len(p.source) for p, l in zip(patches, labels))


def test_labels_deterministic():
    patches = _patches(20)
    a = make_labels(patches)
    b = make_labels(patches)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a, b))
