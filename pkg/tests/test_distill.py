import numpy as np
import pytest

from src.distill import (
    KeypointHeads,
    aggregate,
    anchor_feature,
    anchor_feature_backward,
    bilinear_sample,
    gen_keypoints,
    gen_weights,
    sample_points,
    sample_view_features,
    viewpoint_distillation,
)
from src.errors import BehindCameraError, FormatError, ProtocolError, ShapeError
from src.geometry import build_rig, project
from src.membank import InstanceRecord


def random_maps(rng, rig, channels=4):
    cam = rig[0].intrinsics
    return rng.uniform(size=(len(rig), channels, cam.height, cam.width))


def test_gen_keypoints_zero_and_bias():
    heads = KeypointHeads.zeros(6, 2, n_samples=4)
    np.testing.assert_array_equal(gen_keypoints(np.zeros(6), heads), np.zeros((4, 3)))
    bias = np.arange(12, dtype=np.float64)
    biased = KeypointHeads(heads.offset_w, bias, heads.weight_w, heads.weight_b, 4, 2)
    np.testing.assert_array_equal(gen_keypoints(np.zeros(6), biased), bias.reshape(4, 3))


def test_gen_keypoints_matches_matrix_product():
    rng = np.random.default_rng(0)
    heads = KeypointHeads.random(5, 2, rng, n_samples=3)
    feature = rng.normal(size=5)
    expected = np.zeros(9)
    for j in range(9):
        expected[j] = sum(feature[i] * heads.offset_w[i, j] for i in range(5)) + heads.offset_b[j]
    np.testing.assert_allclose(gen_keypoints(feature, heads), expected.reshape(3, 3), atol=1e-12)


def test_gen_keypoints_rejects_wrong_width():
    with pytest.raises(ShapeError):
        gen_keypoints(np.zeros(3), KeypointHeads.zeros(6, 1))


def test_weights_are_a_distribution():
    rng = np.random.default_rng(1)
    heads = KeypointHeads.random(8, 3, rng, weight_std=2.0)
    for _ in range(20):
        w = gen_weights(rng.normal(size=8) * 5, heads)
        assert w.shape == (3, 8)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0)


def test_sample_points_examples():
    center = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(sample_points(np.zeros((4, 3)), center), np.tile(center, (4, 1)))
    np.testing.assert_array_equal(sample_points(np.eye(3), center), [[2, 2, 3], [1, 3, 3], [1, 2, 4]])
    rec = InstanceRecord(np.zeros(2), np.concatenate([center, [1, 1, 1, 0, 0, 0]]), 0.5, 0.0, np.eye(4))
    rng = np.random.default_rng(2)
    offsets = rng.normal(size=(5, 3))
    np.testing.assert_allclose(sample_points(offsets, rec), offsets + center)


def test_bilinear_sample_examples():
    feat = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    value, inside = bilinear_sample(feat, [2.0, 1.0])
    assert inside and value[0] == 6.0
    square = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    value, inside = bilinear_sample(square, [0.5, 0.5])
    assert inside and value[0] == pytest.approx(1.5)
    value, inside = bilinear_sample(feat, [-5.0, 2.0])
    assert not inside
    np.testing.assert_array_equal(value, [0.0])


def test_bilinear_sample_on_last_texel():
    feat = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    value, inside = bilinear_sample(feat, [3.0, 2.0])
    assert inside and value[0] == 11.0


def test_sample_view_features_on_optical_axis():
    rig = build_rig(2)
    cam = rig[0].intrinsics
    maps = np.full((2, 3, cam.height, cam.width), 0.7)
    point = rig[0].center + np.array([10.0, 0.0, 0.0])
    samples = sample_view_features(point, maps, rig)
    assert samples.mask[0, 0]
    np.testing.assert_allclose(samples.features[0, 0], 0.7, atol=1e-12)


def test_sample_view_features_behind_every_camera():
    rig = build_rig(2)
    maps = np.ones((2, 3, rig[0].intrinsics.height, rig[0].intrinsics.width))
    samples = sample_view_features(np.array([[-20.0, 0.0, 1.5]]), maps, rig)
    assert not samples.mask.any()
    assert not samples.features.any()


def test_sample_view_features_matches_project_then_sample():
    rng = np.random.default_rng(3)
    rig = build_rig(2)
    maps = random_maps(rng, rig)
    points = np.column_stack([rng.uniform(6, 20, 10), rng.uniform(-6, 6, 10), rng.uniform(0, 2.5, 10)])
    samples = sample_view_features(points, maps, rig)
    for n, cam in enumerate(rig):
        for s, p in enumerate(points):
            try:
                pixel, _ = project(p, cam)
                expected, inside = bilinear_sample(maps[n], pixel)
            except BehindCameraError:
                expected, inside = np.zeros(4), False
            assert samples.mask[n, s] == inside
            np.testing.assert_allclose(samples.features[n, s], expected, atol=1e-12)


def test_sample_view_features_needs_one_map_per_camera():
    rig = build_rig(2)
    with pytest.raises(ShapeError):
        sample_view_features(np.zeros((1, 3)), np.zeros((3, 2, 4, 4)), rig)


def test_aggregate_examples():
    features = np.eye(4).reshape(1, 4, 4)
    mask = np.ones((1, 4), dtype=bool)
    one_hot = np.array([[0.0, 0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(aggregate(one_hot, features, mask), [0, 0, 1, 0])
    np.testing.assert_allclose(aggregate(np.full((1, 4), 0.25), features, mask), [0.25] * 4)


def test_aggregate_matches_loop_oracle_and_is_linear():
    rng = np.random.default_rng(4)
    w = rng.uniform(size=(3, 5))
    f1, f2 = rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 6))
    mask = rng.uniform(size=(3, 5)) > 0.3
    expected = np.zeros(6)
    for n in range(3):
        for s in range(5):
            if mask[n, s]:
                expected += w[n, s] * f1[n, s]
    np.testing.assert_allclose(aggregate(w, f1, mask), expected, atol=1e-12)
    combined = aggregate(w, 2.0 * f1 - 0.5 * f2, mask)
    np.testing.assert_allclose(combined, 2.0 * aggregate(w, f1, mask) - 0.5 * aggregate(w, f2, mask), atol=1e-12)
    with pytest.raises(ShapeError):
        aggregate(w, f1[:, :4], mask)


def test_same_maps_give_zero_distillation():
    rng = np.random.default_rng(5)
    rig = build_rig(3)
    maps = random_maps(rng, rig)
    heads = KeypointHeads.random(6, 3, rng)
    features = rng.normal(size=(4, 6))
    centers = np.column_stack([rng.uniform(8, 20, 4), rng.uniform(-4, 4, 4), np.full(4, 0.75)])
    term, original, novel = viewpoint_distillation(features, centers, [0.9] * 4, heads, maps, rig, maps, rig, True)
    assert term.value == 0.0
    assert not term.empty
    for a, b in zip(original, novel):
        np.testing.assert_array_equal(a.value, b.value)


def test_distillation_requires_novel_pass():
    rig = build_rig(1)
    maps = np.zeros((1, 2, rig[0].intrinsics.height, rig[0].intrinsics.width))
    heads = KeypointHeads.zeros(2, 1)
    with pytest.raises(ProtocolError):
        viewpoint_distillation(np.zeros((1, 2)), np.zeros((1, 3)), [1.0], heads, maps, rig, maps, rig, False)


def test_map_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    rig = build_rig(2)
    maps = random_maps(rng, rig, channels=3)
    heads = KeypointHeads.random(5, 2, rng, n_samples=6, offset_std=0.8, weight_std=0.5)
    feature = rng.normal(size=5)
    center = np.array([12.0, 1.0, 0.8])
    upstream = rng.normal(size=3)
    sample = anchor_feature(feature, center, heads, maps, rig)
    grad = anchor_feature_backward(sample, upstream, maps.shape)
    assert np.any(grad), "keypoints should land inside at least one view"

    flat = np.argsort(-np.abs(grad).reshape(-1))[:6]
    h = 1e-6
    for index in [np.unravel_index(i, maps.shape) for i in flat]:
        plus, minus = maps.copy(), maps.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (
            upstream @ anchor_feature(feature, center, heads, plus, rig).value
            - upstream @ anchor_feature(feature, center, heads, minus, rig).value
        ) / (2 * h)
        assert grad[index] == pytest.approx(numeric, rel=1e-3)


def test_heads_round_trip_and_garbage():
    rng = np.random.default_rng(7)
    heads = KeypointHeads.random(4, 3, rng, n_samples=5)
    loaded = KeypointHeads.from_bytes(heads.to_bytes())
    np.testing.assert_array_equal(loaded.offset_w, heads.offset_w)
    np.testing.assert_array_equal(loaded.weight_b, heads.weight_b)
    assert (loaded.n_samples, loaded.n_cameras) == (5, 3)
    with pytest.raises(FormatError):
        KeypointHeads.from_bytes(b"KPH")
