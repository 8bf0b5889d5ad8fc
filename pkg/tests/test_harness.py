import math

import numpy as np
import pytest

from src.config import SceneConfig, config_from_dict
from src.errors import ConfigError, DegenerateInputError
from src.features import extract_batch
from src.geometry import BENCHMARK_SETTINGS, SUPERSET_RANGE, RigDelta, build_rig, sample_rig_delta
from src.harness import (
    CSV_COLUMNS,
    FRAME_DT,
    BenchmarkReport,
    BenchmarkRow,
    box_surface_offsets,
    build_scene,
    descriptor_projection,
    ego_future,
    ego_gap,
    frame_instances,
    future_obstacles,
    lift_with_history,
    psnr,
    render_dataset,
    render_frame,
    run_benchmark,
    write_report,
)
from src.losses import cyclic_recon_loss
from src.pipeline import ReconstructionPipeline

SMALL = {
    "scene": {"n_objects": 3, "n_timesteps": 4},
    "rig": {"n_cameras": 1, "width": 32, "height": 24, "focal": 24.0},
    "bank": {"warmup_frames": 1, "top_k": 4},
    "distill": {"n_samples": 4},
    "benchmark": {"seeds": [0], "timestep": 1},
}


def small_rig():
    return build_rig(1, width=32, height=24, focal=24.0)


def test_same_seed_same_scene():
    assert build_scene(7).to_bytes() == build_scene(7).to_bytes()
    assert build_scene(7).to_bytes() != build_scene(8).to_bytes()


def test_negative_object_count():
    with pytest.raises(DegenerateInputError):
        build_scene(0, n_objects=-1)


def test_box_clusters_are_centred():
    scene = build_scene(3, n_objects=5)
    assert len(scene.tracks) == 5
    labels = scene.labels_at(2)
    gaussians = scene.gaussians_at(2)
    for i, track in enumerate(scene.tracks):
        cluster = gaussians.means[labels == i]
        np.testing.assert_allclose(cluster.mean(axis=0), track.center_at(2 * FRAME_DT), atol=1e-6)


def test_box_surface_offsets_cover_faces():
    offsets, faces = box_surface_offsets(np.array([4.0, 2.0, 1.5]), 3.0)
    np.testing.assert_allclose(offsets.mean(axis=0), 0.0, atol=1e-12)
    assert set(faces) == set(range(6))
    np.testing.assert_allclose(np.abs(offsets).max(axis=0), [2.0, 1.0, 0.75])


def test_scene_stays_in_arena_and_ego_moves_smoothly():
    scene = build_scene(11, n_objects=8)
    for track in scene.tracks:
        for t in range(scene.n_timesteps):
            assert np.all(np.abs(track.center_at(t * FRAME_DT)[:2]) <= 50.0)
    steps = np.diff(scene.ego_poses[:, :3, 3], axis=0)
    assert np.all(np.linalg.norm(steps, axis=1) < 5.0)


def test_empty_scene_renders_nothing_above_horizon():
    # ground starting ahead of the rig keeps every primitive well clear of the near plane
    scene = build_scene(0, n_objects=0, cfg=SceneConfig(ground_x_range=(6.0, 60.0)))
    frame = render_frame(scene, small_rig(), RigDelta(), 0)
    cy = frame.rig[0].intrinsics.cy
    rows = int(math.floor(cy)) - 2
    assert np.all(frame.alpha[0, : rows + 1] < 1e-3)
    # rows looking at ground about 8 m ahead
    assert frame.alpha[0, 15:17].min() > 0.5


def test_render_dataset_keys_and_sanity():
    scene = build_scene(1, n_objects=2)
    deltas = [RigDelta()] + [d for _, d in BENCHMARK_SETTINGS[1:]]
    data = render_dataset(scene, small_rig(), deltas, [0, 1])
    assert sorted(data) == [(i, t) for i in range(6) for t in (0, 1)]
    original = render_frame(scene, small_rig(), RigDelta(), 1)
    np.testing.assert_array_equal(data[(0, 1)].images, original.images)
    assert psnr(original.images, original.images) == math.inf
    assert psnr(data[(3, 1)].images, original.images) < math.inf
    assert data[(3, 1)].delta == RigDelta(height_m=1.0)


def test_frame_instances_match_tracks():
    scene = build_scene(2, n_objects=4)
    rig = small_rig()
    frame = render_frame(scene, rig, RigDelta(), 1)
    instances = frame_instances(scene, 1, rig, extract_batch(frame.images), descriptor_projection(16, 0))
    assert len(instances.records) == 4
    assert instances.features.shape == (4, 16)
    assert np.all((instances.confidences >= 0) & (instances.confidences <= 1))
    ego_x = scene.ego_speed * FRAME_DT
    np.testing.assert_allclose(instances.centers[:, 0], [t.center_at(FRAME_DT)[0] - ego_x for t in scene.tracks])


def test_descriptor_projection_identity_at_native_width():
    np.testing.assert_array_equal(descriptor_projection(16, 3), np.eye(16))
    assert descriptor_projection(8, 3).shape == (16, 8)


def test_ego_future_is_straight_ahead():
    scene = build_scene(0, n_objects=1)
    future = ego_future(scene, 2)
    np.testing.assert_allclose(future[:, 0], scene.ego_speed * 0.5 * np.arange(1, 7))
    np.testing.assert_allclose(future[:, 1], 0.0, atol=1e-12)
    obstacles = future_obstacles(scene, 2)
    assert len(obstacles) == 6 and all(len(b) == 1 for b in obstacles)


def test_benchmark_reports_six_settings(tmp_path):
    config = config_from_dict(SMALL)
    report = run_benchmark(config)
    assert report.settings == [name for name, _ in BENCHMARK_SETTINGS]
    original = report.rows[0]
    assert original.setting == "original"
    assert original.psnr == math.inf
    assert original.distill == 0.0
    for row in report.rows:
        assert math.isfinite(row.cyclic) and row.cyclic >= 0
        assert row.collision_1s <= row.collision_2s <= row.collision_3s

    csv_path, summary_path = write_report(report, str(tmp_path))
    header = open(csv_path).readline().strip().split(",")
    assert header == CSV_COLUMNS
    summary = open(summary_path).read()
    assert "pitch -10" in summary and "seeds: 0" in summary


def test_benchmark_csv_is_deterministic(tmp_path):
    config = config_from_dict(SMALL)
    for name in ("a", "b"):
        write_report(run_benchmark(config), str(tmp_path / name))
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_disabled_components_are_reported():
    data = {**SMALL, "benchmark": {**SMALL["benchmark"], "use_planner": False, "use_distillation": False}}
    report = run_benchmark(config_from_dict(data))
    assert report.disabled == ("distillation", "planner")
    assert all(r.l2_avg == 0.0 and r.distill == 0.0 for r in report.rows)
    assert "disabled components" in report.summary()


def test_benchmark_rejects_bad_seeds():
    config = config_from_dict(SMALL)
    config.benchmark.seeds = [-1]
    with pytest.raises(ConfigError):
        run_benchmark(config)
    config.benchmark.seeds = []
    with pytest.raises(ConfigError):
        run_benchmark(config)


def test_report_means_per_setting():
    report = BenchmarkReport([])
    assert report.settings == []
    assert report.setting_means() == {}


def test_ego_gap_measures_distance_to_the_ego_segment():
    size = np.array([4.0, 3.0, 1.5])
    times = np.arange(4) * FRAME_DT
    assert ego_gap(np.array([20.0, 0.0, 0.75]), np.zeros(2), size, 0.0, times) == pytest.approx(17.5 - 2.5)
    assert ego_gap(np.array([0.0, 10.0, 0.75]), np.zeros(2), size, 5.0, times) == pytest.approx(10.0 - 2.5)
    # the ego drives into a parked box
    assert ego_gap(np.array([6.0, 0.0, 0.75]), np.zeros(2), size, 5.0, times) < 0.0


@pytest.mark.parametrize("seed", range(10))
def test_objects_keep_clear_of_the_ego_path(seed):
    cfg = SceneConfig()
    scene = build_scene(seed, n_objects=8)
    times = np.arange(scene.n_timesteps) * FRAME_DT
    for track in scene.tracks:
        assert ego_gap(track.center, track.velocity, track.size, scene.ego_speed, times) >= cfg.ego_clearance


def test_distillation_runs_only_on_novel_passes(monkeypatch):
    import src.harness as harness

    calls = []
    real = harness.viewpoint_distillation

    def recording(*args, **kwargs):
        calls.append(args[8])
        return real(*args, **kwargs)

    monkeypatch.setattr(harness, "viewpoint_distillation", recording)
    run_benchmark(config_from_dict(SMALL))
    assert 0 < len(calls) <= len(BENCHMARK_SETTINGS) - 1
    assert all(flag is True for flag in calls)


def test_random_configurations_run_end_to_end():
    rng = np.random.default_rng(2024)
    pipeline = ReconstructionPipeline()
    for case in range(200):
        cfg = SceneConfig(
            n_timesteps=3,
            object_max_speed=float(rng.uniform(0.0, 6.0)),
            ego_speed=float(rng.uniform(0.0, 9.9)),
            ground_spacing=float(rng.uniform(0.8, 2.0)),
        )
        scene = build_scene(case, n_objects=int(rng.integers(0, 4)), cfg=cfg)
        rig = build_rig(int(rng.integers(1, 3)), width=int(rng.integers(12, 33)), height=int(rng.integers(8, 25)), focal=float(rng.uniform(10.0, 30.0)))
        delta = sample_rig_delta(rng, SUPERSET_RANGE)
        current = render_frame(scene, rig, RigDelta(), 1)
        lifted, support = lift_with_history(pipeline, current, render_frame(scene, rig, RigDelta(), 0))
        synth = pipeline.synthesize(lifted, current.images, current.depth, current.rig, delta, support)
        assert len(synth) == len(rig)
        assert all(np.all(np.isfinite(v.color)) for v in synth), f"case {case}"
        cyclic = cyclic_recon_loss(synth, current.rig.perturbed(delta), current.rig, current.images, pipeline)
        assert math.isfinite(cyclic) and cyclic >= 0.0, f"case {case}"


def test_setting_means_average_collision_rates():
    def row(seed, setting, collisions):
        values = dict(seed=seed, setting=setting, pitch_deg=0.0, height_m=0.0, depth_m=0.0, psnr=20.0 + seed)
        values.update(cyclic=0.1, distill=0.0, distill_empty=False, feature_consistency=0.0, recon_original=0.0)
        values.update(depth_l1=0.0, l2_1s=0.0, l2_2s=0.0, l2_3s=0.0, l2_avg=0.0)
        values.update(zip(("collision_1s", "collision_2s", "collision_3s", "collision_avg"), collisions))
        return BenchmarkRow(**values)

    report = BenchmarkReport([row(0, "original", (0.0, 0.0, 1.0, 1 / 3)), row(1, "original", (0.0, 1.0, 1.0, 2 / 3))])
    means = report.setting_means()["original"]
    assert means["psnr"] == pytest.approx(20.5)
    assert (means["collision_1s"], means["collision_2s"], means["collision_3s"]) == (0.0, 0.5, 1.0)
    assert means["collision_avg"] == pytest.approx(0.5)
