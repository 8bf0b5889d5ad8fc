import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.getcwd())

from src.errors import BehindCameraError, FormatError, InvalidDepthError, InvalidPoseError
from src.geometry import (
    BENCHMARK_SETTINGS,
    DEFAULT_RANGE,
    SUBSET_RANGE,
    SUPERSET_RANGE,
    Camera,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    RigDelta,
    RigDeltaRange,
    build_rig,
    load_rig,
    make_pose,
    perturb_extrinsic,
    project,
    sample_rig_delta,
    save_rig,
    unproject,
)


def identity_camera(f=100.0, c=64.0, size=129):
    return Camera(CameraIntrinsics(f, f, c, c, size, size), CameraExtrinsics(np.eye(3), np.zeros(3)))


def forward_camera():
    return build_rig(1)[0]


def optical_axis(ext: CameraExtrinsics) -> np.ndarray:
    return ext.rotation.T @ np.array([0.0, 0.0, 1.0])


def test_project_on_optical_axis():
    cam = identity_camera()
    pixel, depth = project([0.0, 0.0, 10.0], cam)
    np.testing.assert_allclose(pixel, [64.0, 64.0])
    assert depth == 10.0


def test_project_hand_evaluated_pinhole():
    pixel, depth = project([1.0, 0.0, 10.0], identity_camera())
    np.testing.assert_allclose(pixel, [74.0, 64.0], atol=1e-12)
    assert depth == pytest.approx(10.0)


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, -1.0], identity_camera())
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, 0.0], identity_camera())


def test_unproject_examples():
    cam = identity_camera()
    np.testing.assert_allclose(unproject([64.0, 64.0], 5.0, cam), [0.0, 0.0, 5.0], atol=1e-12)
    np.testing.assert_allclose(unproject([74.0, 64.0], 10.0, cam), [1.0, 0.0, 10.0], atol=1e-12)
    with pytest.raises(InvalidDepthError):
        unproject([10.0, 10.0], 0.0, cam)


def test_project_unproject_round_trip():
    rng = np.random.default_rng(0)
    cam = forward_camera()
    points = np.column_stack([rng.uniform(0.5, 40, 1000), rng.uniform(-10, 10, 1000), rng.uniform(-3, 5, 1000)])
    for p in points:
        try:
            pixel, depth = project(p, cam)
        except BehindCameraError:
            continue
        if depth <= 0.1:
            continue
        np.testing.assert_allclose(unproject(pixel, depth, cam), p, atol=1e-9)


def test_extrinsics_reject_non_orthonormal():
    with pytest.raises(InvalidPoseError):
        CameraExtrinsics(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(InvalidPoseError):
        CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_zero_delta_is_identity():
    ext = forward_camera().extrinsics
    out = perturb_extrinsic(ext, RigDelta())
    assert out is ext
    assert out == ext


def test_pitch_tilts_optical_axis_up():
    ext = forward_camera().extrinsics
    out = perturb_extrinsic(ext, RigDelta(pitch_deg=5.0))
    before, after = optical_axis(ext), optical_axis(out)
    angle = math.degrees(math.acos(np.clip(before @ after, -1.0, 1.0)))
    assert angle == pytest.approx(5.0, abs=1e-9)
    assert after[2] > 0, "positive pitch must tilt the optical axis upward"
    np.testing.assert_allclose(out.center, ext.center, atol=1e-12)


def test_height_moves_center_along_up():
    ext = forward_camera().extrinsics
    out = perturb_extrinsic(ext, RigDelta(height_m=1.0))
    np.testing.assert_allclose(out.center - ext.center, [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(out.rotation, ext.rotation)


def test_inverse_delta_restores_pose():
    rng = np.random.default_rng(1)
    for cam in build_rig(3):
        for _ in range(20):
            delta = sample_rig_delta(rng, SUPERSET_RANGE)
            back = perturb_extrinsic(perturb_extrinsic(cam.extrinsics, delta), -delta)
            np.testing.assert_allclose(back.matrix, cam.extrinsics.matrix, atol=1e-9)


def test_long_perturbation_chain_keeps_rotations_proper():
    rng = np.random.default_rng(5)
    rig = build_rig(3)
    for _ in range(100):
        rig = rig.perturbed(sample_rig_delta(rng, SUBSET_RANGE))
        for cam in rig:
            rotation = cam.extrinsics.rotation
            np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-10)
            assert np.linalg.det(rotation) == pytest.approx(1.0, abs=1e-10)


def test_perturb_requires_orthogonal_axes():
    with pytest.raises(InvalidPoseError):
        perturb_extrinsic(forward_camera().extrinsics, RigDelta(pitch_deg=1.0), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0))


def test_degenerate_range_samples_zero():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert sample_rig_delta(rng, RigDeltaRange()).is_zero()


@pytest.mark.parametrize("delta_range", [DEFAULT_RANGE, SUPERSET_RANGE, SUBSET_RANGE])
def test_samples_stay_inside_range(delta_range):
    rng = np.random.default_rng(42)
    samples = [sample_rig_delta(rng, delta_range) for _ in range(10_000)]
    assert all(delta_range.contains(d) for d in samples)
    for axis, values in (
        ("pitch", [d.pitch_deg for d in samples]),
        ("height", [d.height_m for d in samples]),
        ("depth", [d.depth_m for d in samples]),
    ):
        low, high = getattr(delta_range, axis)
        stderr = (high - low) / math.sqrt(12.0) / math.sqrt(len(values))
        assert abs(np.mean(values) - 0.5 * (low + high)) < 3 * stderr + 1e-12, f"{axis} mean off-centre"


def test_sampling_is_reproducible():
    a = [sample_rig_delta(np.random.default_rng(7), DEFAULT_RANGE) for _ in range(3)]
    b = [sample_rig_delta(np.random.default_rng(7), DEFAULT_RANGE) for _ in range(3)]
    assert a == b


def test_range_presets_match_study_values():
    assert DEFAULT_RANGE.pitch == (-10.0, 5.0)
    assert DEFAULT_RANGE.height == (-0.7, 1.0)
    assert SUPERSET_RANGE.pitch == (-15.0, 10.0)
    assert SUPERSET_RANGE.depth == (-0.5, 1.5)


def test_benchmark_settings_order():
    names = [name for name, _ in BENCHMARK_SETTINGS]
    assert names == ["original", "pitch +5", "pitch -10", "height +1.0", "height -0.7", "depth +1.0"]
    assert BENCHMARK_SETTINGS[0][1].is_zero()


def test_rig_perturbation_is_joint():
    rig = build_rig(3)
    moved = rig.perturbed(RigDelta(height_m=0.5, depth_m=0.25))
    for before, after in zip(rig, moved):
        np.testing.assert_allclose(after.center - before.center, [0.25, 0.0, 0.5], atol=1e-12)


def test_rig_at_ego_pose_commutes_with_perturbation():
    rig = build_rig(3)
    pose = make_pose(0.4, (3.0, -2.0, 0.0))
    delta = RigDelta(pitch_deg=-7.0, height_m=0.3, depth_m=0.6)
    a = rig.perturbed(delta).at_ego_pose(pose)
    b = rig.at_ego_pose(pose).perturbed(delta)
    for ca, cb in zip(a, b):
        np.testing.assert_allclose(ca.extrinsics.matrix, cb.extrinsics.matrix, atol=1e-9)


def test_build_rig_cameras_look_along_their_yaw():
    rig = build_rig(3, yaw_spacing_deg=55.0)
    assert rig.names == ("front", "yaw+55", "yaw-55")
    axis = optical_axis(rig[1].extrinsics)
    assert math.degrees(math.atan2(axis[1], axis[0])) == pytest.approx(55.0)
    np.testing.assert_allclose(rig[0].center, [1.0, 0.0, 1.5])


def test_rig_file_round_trip(tmp_path):
    rig = build_rig(2, width=40, height=30, focal=35.0)
    path = tmp_path / "rig.json"
    save_rig(rig, str(path))
    loaded = load_rig(str(path))
    assert loaded.names == rig.names
    for a, b in zip(rig, loaded):
        assert a.intrinsics == b.intrinsics
        np.testing.assert_allclose(a.extrinsics.matrix, b.extrinsics.matrix, atol=1e-12)


def test_malformed_rig_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"cameras": [{"intrinsics": {"fx": 1}}]}')
    with pytest.raises(FormatError):
        load_rig(str(path))
    path.write_text("not json")
    with pytest.raises(FormatError):
        load_rig(str(path))


def test_rig_names_must_match_cameras():
    with pytest.raises(FormatError):
        CameraRig((forward_camera(),), ("a", "b"))
