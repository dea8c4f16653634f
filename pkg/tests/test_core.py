import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsfocus.core import (Camera, GaussianCloud, RenderSettings, covariance_3d, covariance_3d_vjp,
                          logit, project_cloud, project_gaussian, quat_to_rotmat, rotmat_vjp, sigmoid)
from gsfocus.errors import ContractError, InvalidParameterError

from conftest import random_cloud


def test_covariance_identity():
    np.testing.assert_allclose(covariance_3d(np.zeros(3), np.array([1.0, 0, 0, 0])), np.eye(3))


def test_covariance_axis_scaling():
    np.testing.assert_allclose(covariance_3d(np.array([np.log(2), 0, 0]), np.array([1.0, 0, 0, 0])),
                               np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_about_z():
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    cov = covariance_3d(np.array([np.log(2), 0, 0]), q)
    # brute force R S S^T R^T with an explicit z rotation
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    S = np.diag([2.0, 1, 1])
    np.testing.assert_allclose(cov, R @ S @ S.T @ R.T, atol=1e-12)
    np.testing.assert_allclose(cov, np.diag([1.0, 4, 1]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
       st.lists(st.floats(-3, 1), min_size=3, max_size=3))
def test_covariance_is_spd(qraw, ls):
    q = np.array(qraw)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    cov = covariance_3d(np.array(ls), q / np.linalg.norm(q))
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_rotation_matrix_orthonormal(rng):
    q = rng.normal(size=(20, 4))
    R = quat_to_rotmat(q / np.linalg.norm(q, axis=1, keepdims=True))
    for r in R:
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_rotmat_vjp_matches_fd(rng):
    q = rng.normal(size=4)
    dR = rng.normal(size=(3, 3))
    g = rotmat_vjp(q, dR)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (np.sum(quat_to_rotmat(q + e) * dR) - np.sum(quat_to_rotmat(q - e) * dR)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_covariance_vjp_matches_fd(rng):
    ls = rng.normal(-1, 0.3, 3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    dcov = rng.normal(size=(3, 3))
    d_ls, d_q = covariance_3d_vjp(ls[None], q[None], dcov[None])
    h = 1e-6
    f = lambda a, b: np.sum(covariance_3d(a, b) * dcov)  # noqa: E731
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        assert d_ls[0, i] == pytest.approx((f(ls + e, q) - f(ls - e, q)) / (2 * h), rel=1e-5)


def _axis_camera():
    return Camera(1, 64, 48, 100.0, 100.0, 32.0, 24.0, np.eye(3), np.zeros(3))


def _tiny(z):
    return GaussianCloud([[0.0, 0.0, z]], np.full((1, 3), np.log(1e-3)), [[1.0, 0, 0, 0]], [0.0], [[1, 1, 1]])


def test_on_axis_projection():
    out = project_gaussian(0, _tiny(1.0), _axis_camera())
    np.testing.assert_allclose(out["mean2d"], [32.0, 24.0])
    assert out["depth"] == 1.0


def test_screen_footprint_scales_inverse_square_depth():
    st = RenderSettings(dilation=0.0, filter_3d=0.0)
    cloud1 = _tiny(1.0)
    cloud1.log_scales[:] = np.log(0.05)
    cloud2 = cloud1.copy()
    cloud2.positions[0, 2] = 2.0
    c1 = project_gaussian(0, cloud1, _axis_camera(), st)["cov2d"]
    c2 = project_gaussian(0, cloud2, _axis_camera(), st)["cov2d"]
    np.testing.assert_allclose(c2, c1 / 4, rtol=1e-12)


def test_dilation_added_to_diagonal():
    a = project_gaussian(0, _tiny(1.0), _axis_camera(), RenderSettings(dilation=0.0, filter_3d=0.0))
    b = project_gaussian(0, _tiny(1.0), _axis_camera(), RenderSettings(filter_3d=0.0))
    np.testing.assert_allclose(b["cov2d"] - a["cov2d"], np.diag([0.3, 0.3]), atol=1e-12)


def test_behind_camera_is_culled():
    assert project_gaussian(0, _tiny(-1.0), _axis_camera()) is None


def test_projected_covariance_positive_definite(rng):
    proj = project_cloud(random_cloud(rng, 30, depth=3.0), _axis_camera())
    for c in proj.cov2d[proj.visible]:
        assert np.all(np.linalg.eigvalsh(c) > 0)


def test_cloud_invariants_and_copy(rng):
    cloud = random_cloud(rng, 7, sh=True)
    cloud.validate()
    assert np.all((cloud.alphas > 0) & (cloud.alphas < 1))
    dup = cloud.copy()
    dup.positions += 1
    assert not np.allclose(dup.positions, cloud.positions)
    sub = cloud.subset([0, 2])
    assert len(sub) == 2 and sub.sh1.shape == (2, 3, 3)
    both = GaussianCloud.concatenate([cloud, sub])
    assert len(both) == 9


def test_validate_rejects_bad_clouds(rng):
    cloud = random_cloud(rng, 3)
    cloud.positions[0, 0] = np.nan
    with pytest.raises(InvalidParameterError):
        cloud.validate()
    cloud = random_cloud(rng, 3)
    cloud.rotations[0] *= 2
    with pytest.raises(InvalidParameterError):
        cloud.validate()
    with pytest.raises(ContractError):
        GaussianCloud.concatenate([random_cloud(rng, 2), random_cloud(rng, 2, sh=True)])


def test_sigmoid_logit_inverse():
    p = np.linspace(0.01, 0.99, 9)
    np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-12)


def test_camera_position_and_look_at():
    cam = Camera.look_at(3, (0, -4, 1), (0, 0, 0), 32, 32, 60.0)
    np.testing.assert_allclose(cam.position, [0, -4, 1], atol=1e-12)
    pc = cam.R @ np.zeros(3) + cam.t
    assert pc[0] == pytest.approx(0, abs=1e-12) and pc[1] == pytest.approx(0, abs=1e-12)
    assert pc[2] > 0
