import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gfpnet.cloud import PointCloud, estimate_normals, RigidTransform, apply_transform, rotation_about
from gfpnet.gp import GenericPrimitive
from gfpnet.net import chamfer
from gfpnet.registration import icp, icp_register, register_gp, umeyama
from gfpnet.shapes import car_like


def rot_err_deg(a, b):
    return np.degrees(Rotation.from_matrix(a @ b.T).magnitude())


def test_umeyama_exact():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(50, 3))
    t = RigidTransform(rotation_about((1, 2, 3), 0.7), (0.1, -2, 3), 1.7)
    est = umeyama(src, t.apply_points(src))
    assert rot_err_deg(est.rotation, t.rotation) < 1e-9
    assert est.scale == pytest.approx(1.7, abs=1e-12)
    np.testing.assert_allclose(est.translation, t.translation, atol=1e-12)


def test_identity_registration():
    car = car_like()
    t, rmse = icp_register(car, car)
    assert rmse < 1e-9
    assert rot_err_deg(t.rotation, np.eye(3)) < 1e-6 and abs(t.scale - 1) < 1e-9


def test_known_transform_recovered():
    car = car_like()
    rng = np.random.default_rng(1)
    axis = rng.normal(size=3)
    tr = rng.normal(size=3)
    truth = RigidTransform(rotation_about(axis, np.radians(20)), 0.3 * tr / np.linalg.norm(tr), 1.2)
    est, _ = icp_register(car, apply_transform(car, truth))
    assert rot_err_deg(est.rotation, truth.rotation) < 0.5
    assert np.linalg.norm(est.translation - truth.translation) < 1e-3
    assert abs(est.scale - truth.scale) < 1e-3


def test_partial_overlap_rmse():
    car = car_like()
    truth = RigidTransform(rotation_about((0, 0, 1), np.radians(10)), (0.1, 0.05, 0), 1.1)
    moved = apply_transform(car, truth)
    front = moved.subset(np.nonzero(moved.points[:, 0] > moved.centroid()[0] - 0.2)[0])
    res = icp(car, front)
    assert res.rmse < 1e-2


def test_rmse_non_increasing():
    car = car_like()
    truth = RigidTransform(rotation_about((0, 1, 1), np.radians(25)), (0.2, 0, -0.1), 0.9)
    res = icp(car, apply_transform(car, truth))
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_degenerate_target():
    line = PointCloud(np.c_[np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)])
    with pytest.raises(ValueError, match="degenerate geometry"):
        icp_register(car_like(), line)


def _gp(cloud):
    return GenericPrimitive("car", estimate_normals(cloud), 1, len(cloud), "x")


def test_register_gp_full_observation():
    car = car_like()
    c = car.points - car.centroid()
    gp = _gp(PointCloud(c))
    obs = PointCloud(c)
    reg = register_gp(gp, obs)
    assert chamfer(reg, obs) < 1e-6
    assert reg.has_normals


def test_register_gp_half_observation():
    car = car_like()
    c = car.points - car.centroid()
    c = c / np.linalg.norm(c.max(0) - c.min(0))
    gp = _gp(PointCloud(c))
    truth = RigidTransform(rotation_about((0, 0, 1), np.radians(8)), (0.2, 0.1, 0.0), 1.5)
    full = apply_transform(gp.cloud, truth)
    half = full.subset(np.nonzero(full.points[:, 1] > full.centroid()[1])[0])
    reg = register_gp(gp, half)
    assert chamfer(reg, full) / 1.5 < 0.05


def test_registration_equivariant():
    car = car_like()
    gp = _gp(PointCloud(car.points - car.centroid()))
    obs = apply_transform(car, RigidTransform(rotation_about((1, 0, 1), 0.3), (0.3, 0, 0.1), 1.1))
    extra = RigidTransform(rotation_about((0, 1, 0), 0.4), (-1, 2, 0.5), 1.0)
    a = register_gp(gp, obs)
    b = register_gp(gp, apply_transform(obs, extra))
    assert np.max(np.abs(extra.apply_points(a.points) - b.points)) < 1e-3
