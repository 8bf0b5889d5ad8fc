import logging
import math

import numpy as np
import pytest

from src.errors import DegenerateInputError, FormatError, InvalidDepthError, InvalidRotationError, ShapeError
from src.gaussians import (
    SH_C0,
    SH_C1,
    AnalyticHead,
    GaussianPrimitive,
    GaussianSet,
    LinearHead,
    RawParams,
    activate_params,
    activation_backward,
    concat,
    covariance_from,
    eval_sh,
    lift_pixels,
    load_gaussians,
    save_gaussians,
)
from src.geometry import Camera, CameraExtrinsics, CameraIntrinsics, CameraRig


def random_unit_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def small_rig(n_cameras=1, size=4):
    c = (size - 1) / 2.0
    cams = [
        Camera(CameraIntrinsics(4.0, 4.0, c, c, size, size), CameraExtrinsics(np.eye(3), np.array([float(i), 0.0, 0.0])))
        for i in range(n_cameras)
    ]
    return CameraRig(tuple(cams))


def test_covariance_identity():
    np.testing.assert_allclose(covariance_from([1, 1, 1], [1, 0, 0, 0]), np.eye(3), atol=1e-15)


def test_covariance_rotated_scale():
    half = math.sqrt(0.5)
    cov = covariance_from([2.0, 1.0, 1.0], [half, 0.0, 0.0, half])
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_symmetric_positive_definite():
    rng = np.random.default_rng(3)
    for q in random_unit_quaternions(rng, 50):
        cov = covariance_from(rng.uniform(0.01, 3.0, 3), q)
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        np.linalg.cholesky(cov)


def test_covariance_errors():
    with pytest.raises(InvalidRotationError):
        covariance_from([1, 1, 1], [0, 0, 0, 0])
    with pytest.raises(DegenerateInputError):
        covariance_from([1, 0, 1], [1, 0, 0, 0])


def test_activation_examples():
    raw = RawParams(
        scale=np.zeros((3, 3)),
        rotation=np.array([[2.0, 0, 0, 0], [0, 3.0, 4.0, 0], [1.0, 1.0, 1.0, 1.0]]),
        opacity=np.array([-40.0, 40.0, 0.0]),
        sh=np.zeros((3, 4, 3)),
    )
    act = activate_params(raw)
    np.testing.assert_allclose(act.scales, math.log(2.0), atol=1e-12)
    np.testing.assert_allclose(act.rotations[0], [1, 0, 0, 0])
    np.testing.assert_allclose(act.rotations[1], [0, 0.6, 0.8, 0])
    assert act.opacities[0] < 1e-15
    assert act.opacities[1] > 1 - 1e-15
    assert act.quaternion_fallbacks == 0


def test_activation_is_monotone_in_scale_and_opacity():
    values = np.linspace(-20.0, 20.0, 401)
    count = len(values)
    raw = RawParams(np.repeat(values[:, None], 3, axis=1), np.tile([1.0, 0, 0, 0], (count, 1)), values, np.zeros((count, 1, 3)))
    act = activate_params(raw)
    assert np.all(np.diff(act.scales, axis=0) > 0)
    assert np.all(np.diff(act.opacities) > 0)
    assert np.all(act.scales > 0) and np.all((act.opacities > 0) & (act.opacities < 1))


def test_zero_quaternion_falls_back_to_identity(caplog):
    raw = RawParams(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 1, 3)))
    with caplog.at_level(logging.WARNING):
        act = activate_params(raw)
    assert act.quaternion_fallbacks == 2
    np.testing.assert_array_equal(act.rotations, [[1, 0, 0, 0], [1, 0, 0, 0]])
    assert "identity quaternion" in caplog.text


def test_eval_sh_degree_zero_is_isotropic():
    rng = np.random.default_rng(0)
    coeffs = np.array([[1.0, 2.0, 3.0]])
    for d in rng.normal(size=(20, 3)):
        d /= np.linalg.norm(d)
        np.testing.assert_allclose(eval_sh(coeffs, d, clamp=False), coeffs[0] * SH_C0)


def test_eval_sh_degree_one_band_zero_only():
    rng = np.random.default_rng(1)
    coeffs = np.zeros((4, 3))
    coeffs[0] = [1.0, 1.5, 2.0]
    values = [eval_sh(coeffs, d / np.linalg.norm(d)) for d in rng.normal(size=(100, 3))]
    np.testing.assert_allclose(values, np.broadcast_to(values[0], (100, 3)), atol=1e-15)


def test_eval_sh_z_linear_term():
    coeffs = np.zeros((4, 3))
    coeffs[2] = 1.0
    up = eval_sh(coeffs, [0.0, 0.0, 1.0], clamp=False)
    down = eval_sh(coeffs, [0.0, 0.0, -1.0], clamp=False)
    np.testing.assert_allclose(up - down, 2 * SH_C1, atol=1e-12)


def test_eval_sh_shape_mismatch():
    with pytest.raises(ShapeError):
        eval_sh(np.zeros(5), [0.0, 0.0, 1.0])
    with pytest.raises(ShapeError):
        eval_sh(np.zeros((5, 3)), [0.0, 0.0, 1.0])


def test_lift_counts_and_provenance():
    rig = small_rig(2)
    depth = np.full((2, 4, 4), 5.0)
    feats = np.full((2, 8, 4, 4), 0.5)
    gaussians = lift_pixels(depth, feats, rig, AnalyticHead())
    assert len(gaussians) == 32
    assert list(gaussians.cameras[:16]) == [0] * 16 and list(gaussians.cameras[16:]) == [1] * 16
    # raster order: row-major inside each camera, pixels stored as (u, v)
    np.testing.assert_array_equal(gaussians.pixels[1], [1, 0])
    np.testing.assert_array_equal(gaussians.pixels[4], [0, 1])
    np.testing.assert_allclose(gaussians.means[:16, 2], 5.0, atol=1e-9)


def test_lift_principal_point_lands_on_axis():
    size = 5
    rig = small_rig(1, size)
    depth = np.full((1, size, size), 7.0)
    gaussians = lift_pixels(depth, np.zeros((1, 8, size, size)), rig, AnalyticHead())
    centre = 2 * size + 2
    np.testing.assert_allclose(gaussians.means[centre], [0.0, 0.0, 7.0], atol=1e-12)


def test_lift_rejects_bad_depth():
    depth = np.full((1, 4, 4), 5.0)
    depth[0, 2, 3] = 0.0
    with pytest.raises(InvalidDepthError) as info:
        lift_pixels(depth, np.zeros((1, 8, 4, 4)), small_rig(), AnalyticHead())
    assert info.value.pixel == (0, 3, 2)


def test_analytic_head_reproduces_colour():
    rng = np.random.default_rng(5)
    feats = rng.uniform(0, 1, size=(1, 8, 4, 4))
    gaussians = lift_pixels(np.full((1, 4, 4), 3.0), feats, small_rig(), AnalyticHead())
    rgb = eval_sh(gaussians.sh, np.tile([0.0, 0.0, 1.0], (16, 1)))
    np.testing.assert_allclose(rgb, feats[0, :3].reshape(3, -1).T, atol=1e-12)
    np.testing.assert_allclose(gaussians.opacities, 0.9)
    np.testing.assert_allclose(gaussians.scales, 0.5 * 3.0 / 4.0)


def test_linear_head_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    head = LinearHead.initialise(8, 1, rng, std=0.1)
    feats = rng.uniform(0, 1, size=(5, 8))
    depth = rng.uniform(1, 10, 5)
    size = depth / 20.0
    upstream = [rng.normal(size=a.shape) for a in head.predict(feats, depth, size)]

    def loss(weight):
        out = LinearHead(weight, head.bias, 1).predict(feats, depth, size)
        return sum(float(np.sum(u * o)) for u, o in zip(upstream, out))

    d_weight, _ = head.backward(feats, depth, size, RawParams(*upstream))
    h = 1e-6
    for index in [(0, 0), (3, 9), (9, 2), (8, 19)]:
        plus, minus = head.weight.copy(), head.weight.copy()
        plus[index] += h
        minus[index] -= h
        assert d_weight[index] == pytest.approx((loss(plus) - loss(minus)) / (2 * h), rel=1e-6, abs=1e-8)


def test_activation_backward_opacity_and_scale():
    raw = RawParams(np.array([[0.3, -1.0, 2.0]]), np.array([[1.0, 0.2, 0.0, 0.0]]), np.array([0.4]), np.zeros((1, 1, 3)))
    grad = activation_backward(raw, np.ones((1, 3)), np.zeros((1, 4)), np.ones(1), np.zeros((1, 1, 3)))
    h = 1e-6
    for i in range(3):
        up = activate_params(raw._replace(scale=raw.scale + h * np.eye(3)[i])).scales[0, i]
        down = activate_params(raw._replace(scale=raw.scale - h * np.eye(3)[i])).scales[0, i]
        assert grad.scale[0, i] == pytest.approx((up - down) / (2 * h), rel=1e-6)
    alpha = 1 / (1 + math.exp(-0.4))
    assert grad.opacity[0] == pytest.approx(alpha * (1 - alpha))


def test_gaussian_set_validation():
    with pytest.raises(DegenerateInputError):
        GaussianSet(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.5], np.zeros((1, 1, 3)))
    with pytest.raises(DegenerateInputError):
        GaussianSet(np.zeros((1, 3)), np.ones((1, 3)), [[1, 0, 0, 0]], [1.5], np.zeros((1, 1, 3)))
    with pytest.raises(ShapeError):
        GaussianSet(np.zeros((1, 3)), np.ones((1, 3)), [[1, 0, 0, 0]], [0.5], np.zeros((1, 2, 3)))


def test_gaussian_set_indexing_and_concat():
    a = GaussianSet.from_primitives(
        [GaussianPrimitive(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]), 0.5, np.zeros((1, 3)))]
    )
    b = a.replace(means=np.ones((1, 3)))
    both = concat([a, GaussianSet.empty(), b])
    assert len(both) == 2
    np.testing.assert_array_equal(both[1].mu, [1.0, 1.0, 1.0])
    assert both[0].covariance.shape == (3, 3)


def test_gaussian_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    n = 6
    gaussians = GaussianSet(
        rng.normal(size=(n, 3)),
        rng.uniform(0.1, 1.0, size=(n, 3)),
        random_unit_quaternions(rng, n),
        rng.uniform(0, 1, n),
        rng.normal(size=(n, 4, 3)),
    )
    path = tmp_path / "scene.bin"
    save_gaussians(gaussians, str(path))
    loaded = load_gaussians(str(path))
    assert loaded.sh_degree == 1
    np.testing.assert_allclose(loaded.means, gaussians.means, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(loaded.sh, gaussians.sh, rtol=1e-6, atol=1e-6)


def test_gaussian_file_rejects_garbage():
    with pytest.raises(FormatError):
        GaussianSet.from_bytes(b"nope")
    with pytest.raises(FormatError):
        GaussianSet.from_bytes(b"XXXX" + bytes(12))
