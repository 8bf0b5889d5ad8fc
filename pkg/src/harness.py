"""Synthetic scenes, ground-truth rendering and the unseen-rig benchmark.

Scenes live in a world frame with z up. The ego drives along +x at a constant
speed and is sampled at 2 Hz. Objects are coloured boxes made of Gaussian
clusters moving with constant velocity over a textured ground plane.
"""

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.config import FRAME_DT, Config, SceneConfig
from src.distill import KeypointHeads, viewpoint_distillation
from src.errors import ConfigError, DegenerateInputError
from src.features import N_CHANNELS, extract_batch
from src.gaussians import SH_C0, AnalyticHead, GaussianSet, concat, sh_basis_count
from src.geometry import (
    BENCHMARK_SETTINGS,
    RANGE_PRESETS,
    CameraRig,
    RigDelta,
    RigDeltaRange,
    build_rig,
    invert_pose,
    load_rig,
    make_pose,
    sample_rig_delta,
    transform_points,
)
from src.losses import cyclic_recon_loss, depth_l1, original_recon_loss
from src.membank import AttentionParams, InstanceRecord, MemoryBank, NOVEL_VIEW, ORIGINAL_VIEW, fuse
from src.metrics import (
    EGO_SIZE,
    N_WAYPOINTS,
    WAYPOINT_DT,
    OrientedBox,
    collision_rate,
    l2_displacement,
    mean_rates,
    plan_trajectory,
)
from src.pipeline import ReconstructionPipeline, choose_view, history_support, render_rig
from src.rasterizer import RenderSettings, RenderTarget

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
GROUND_BASE_COLOR = np.array([0.42, 0.45, 0.40])
OBJECT_OPACITY = 0.95
GROUND_OPACITY = 0.95
FACE_SHADES = (1.0, 0.8, 0.9, 0.8, 0.9, 0.7)  # +z, +x, +y, -x, -y, -z
EGO_HALF_LENGTH = 2.5
PLACEMENT_ATTEMPTS = 200


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    center: np.ndarray  # (3,) world position at time 0
    size: np.ndarray  # (l, w, h)
    yaw: float
    velocity: np.ndarray  # (vx, vy) world m/s
    color: np.ndarray

    def center_at(self, time: float) -> np.ndarray:
        return self.center + np.array([self.velocity[0], self.velocity[1], 0.0]) * time

    def box_at(self, time: float) -> OrientedBox:
        c = self.center_at(time)
        return OrientedBox(float(c[0]), float(c[1]), float(self.size[0]), float(self.size[1]), self.yaw)


def box_surface_offsets(size: np.ndarray, points_per_meter: float) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric grids over the six faces of an axis-aligned box centred at the origin.

    Returns (offsets, face index per offset); opposite faces carry mirrored grids,
    so the offsets average to the origin.
    """
    half = np.asarray(size, dtype=np.float64) / 2.0
    offsets, faces = [], []

    def grid(extent: float) -> np.ndarray:
        n = max(2, int(math.ceil(2 * extent * points_per_meter)) + 1)
        return np.linspace(-extent, extent, n)

    face_axes = ((2, 0, 1), (0, 1, 2), (1, 0, 2))  # normal axis, then the two in-plane axes
    for axis_id, (normal, a, b) in enumerate(face_axes):
        ga, gb = np.meshgrid(grid(half[a]), grid(half[b]), indexing="ij")
        for sign_id, sign in enumerate((1.0, -1.0)):
            pts = np.zeros((ga.size, 3))
            pts[:, normal] = sign * half[normal]
            pts[:, a] = ga.reshape(-1)
            pts[:, b] = gb.reshape(-1)
            offsets.append(pts)
            face = (0, 5) if normal == 2 else ((1, 3) if normal == 0 else (2, 4))
            faces.append(np.full(len(pts), face[sign_id]))
    return np.concatenate(offsets), np.concatenate(faces)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    seed: int
    n_timesteps: int
    ground: GaussianSet
    tracks: Tuple[ObjectTrack, ...]
    object_offsets: Tuple[np.ndarray, ...]
    object_colors: Tuple[np.ndarray, ...]
    object_scale: float
    ego_speed: float
    sh_degree: int = 1

    def time_of(self, t: int) -> float:
        return t * FRAME_DT

    def ego_pose_at(self, time: float) -> np.ndarray:
        return make_pose(0.0, (self.ego_speed * time, 0.0, 0.0))

    def ego_pose(self, t: int) -> np.ndarray:
        return self.ego_pose_at(self.time_of(t))

    @property
    def ego_poses(self) -> np.ndarray:
        return np.stack([self.ego_pose(t) for t in range(self.n_timesteps)])

    def object_gaussians(self, index: int, time: float) -> GaussianSet:
        track = self.tracks[index]
        c, s = math.cos(track.yaw), math.sin(track.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        offsets = self.object_offsets[index]
        means = offsets @ rot.T + track.center_at(time)
        count = len(offsets)
        sh = np.zeros((count, sh_basis_count(self.sh_degree), 3))
        sh[:, 0, :] = self.object_colors[index] / SH_C0
        quat = np.zeros((count, 4))
        quat[:, 0] = 1.0
        return GaussianSet(
            means, np.full((count, 3), self.object_scale), quat, np.full(count, OBJECT_OPACITY), sh
        )

    def gaussians_at(self, t: int) -> GaussianSet:
        time = self.time_of(t)
        return concat([self.ground] + [self.object_gaussians(i, time) for i in range(len(self.tracks))])

    def labels_at(self, t: int) -> np.ndarray:
        """Object index per primitive of ``gaussians_at``; -1 for the ground."""
        parts = [np.full(len(self.ground), -1)] + [np.full(len(o), i) for i, o in enumerate(self.object_offsets)]
        return np.concatenate(parts)

    def to_bytes(self) -> bytes:
        chunks = [self.gaussians_at(t).to_bytes() for t in range(self.n_timesteps)]
        for track in self.tracks:
            chunks.append(
                np.concatenate([track.center, track.size, [track.yaw], track.velocity, track.color]).astype("<f8").tobytes()
            )
        return b"".join(chunks)


def _ground(rng: np.random.Generator, cfg: SceneConfig, sh_degree: int) -> GaussianSet:
    xs = np.arange(cfg.ground_x_range[0], cfg.ground_x_range[1] + 1e-9, cfg.ground_spacing)
    ys = np.arange(-cfg.ground_half_width, cfg.ground_half_width + 1e-9, cfg.ground_spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx, gy = gx.reshape(-1), gy.reshape(-1)
    count = gx.size
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(3, 2))
    k = 2.0 * math.pi / cfg.texture_period
    texture = np.stack(
        [np.sin(k * gx + phases[c, 0]) * np.cos(0.7 * k * gy + phases[c, 1]) for c in range(3)], axis=1
    )
    colors = np.clip(GROUND_BASE_COLOR + cfg.texture_amplitude * texture, 0.0, 1.0)
    sh = np.zeros((count, sh_basis_count(sh_degree), 3))
    sh[:, 0, :] = colors / SH_C0
    scales = np.tile([cfg.ground_scale, cfg.ground_scale, cfg.ground_thickness], (count, 1))
    quat = np.zeros((count, 4))
    quat[:, 0] = 1.0
    return GaussianSet(np.stack([gx, gy, np.zeros(count)], axis=1), scales, quat, np.full(count, GROUND_OPACITY), sh)


def ego_gap(center: np.ndarray, velocity: np.ndarray, size: np.ndarray, ego_speed: float, times: np.ndarray) -> float:
    """Smallest distance between a box's bounding circle and the ego footprint at ``times``.

    The ego is a segment of half length ``EGO_HALF_LENGTH`` along +x centred on its
    position; negative values mean overlap.
    """
    times = np.asarray(times, dtype=np.float64)
    pos = center[:2] + np.asarray(velocity)[None, :] * times[:, None]
    dx = np.maximum(np.abs(pos[:, 0] - ego_speed * times) - EGO_HALF_LENGTH, 0.0)
    return float(np.min(np.hypot(dx, pos[:, 1])) - 0.5 * math.hypot(size[0], size[1]))


def build_scene(
    seed: int,
    n_objects: Optional[int] = None,
    n_timesteps: Optional[int] = None,
    cfg: Optional[SceneConfig] = None,
    sh_degree: int = 1,
) -> SyntheticScene:
    """Deterministic scene for a seed: textured ground plus ``n_objects`` moving boxes."""
    cfg = cfg or SceneConfig()
    n_objects = cfg.n_objects if n_objects is None else n_objects
    n_timesteps = cfg.n_timesteps if n_timesteps is None else n_timesteps
    if n_objects < 0:
        raise DegenerateInputError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    ground = _ground(rng, cfg, sh_degree)

    half_arena = cfg.arena_size / 2.0
    # objects stay inside the arena for the whole sequence plus one planning horizon
    duration = (n_timesteps - 1) * FRAME_DT + N_WAYPOINTS * WAYPOINT_DT
    frame_times = np.arange(n_timesteps) * FRAME_DT
    tracks, offsets, colors = [], [], []
    for i in range(n_objects):
        for _ in range(PLACEMENT_ATTEMPTS):
            size = np.array([rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.2), rng.uniform(1.4, 2.0)])
            center = np.array([rng.uniform(8.0, 40.0), rng.uniform(-10.0, 10.0), size[2] / 2.0])
            yaw = float(rng.uniform(-math.pi, math.pi))
            speed = float(rng.uniform(0.0, cfg.object_max_speed)) if rng.random() < 0.7 else 0.0
            velocity = speed * np.array([math.cos(yaw), math.sin(yaw)])
            end = center[:2] + velocity * duration
            overshoot = np.max(np.abs(end) / (half_arena - 5.0))
            if overshoot > 1.0:
                velocity = velocity / overshoot
            if ego_gap(center, velocity, size, cfg.ego_speed, frame_times) >= cfg.ego_clearance:
                break
        else:
            raise DegenerateInputError(
                f"Object {i} of seed {seed} found no placement {cfg.ego_clearance} m clear of the ego path"
            )
        color = rng.uniform(0.15, 0.95, size=3)
        local, face = box_surface_offsets(size, cfg.box_points_per_meter)
        shade = np.asarray(FACE_SHADES)[face][:, None]
        tracks.append(ObjectTrack(center, size, yaw, velocity, color))
        offsets.append(local)
        colors.append(np.clip(color * shade, 0.0, 1.0))
    logger.debug(f"Built scene seed={seed} with {len(ground)} ground and {sum(map(len, offsets))} object primitives")
    return SyntheticScene(
        seed=seed,
        n_timesteps=n_timesteps,
        ground=ground,
        tracks=tuple(tracks),
        object_offsets=tuple(offsets),
        object_colors=tuple(colors),
        object_scale=0.45 / cfg.box_points_per_meter,
        ego_speed=cfg.ego_speed,
        sh_degree=sh_degree,
    )


# ---------------------------------------------------------------------------
# Ground-truth rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderedFrame:
    delta: RigDelta
    timestep: int
    rig: CameraRig  # posed in the world
    views: List[RenderTarget]

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.color for v in self.views])

    @property
    def depth(self) -> np.ndarray:
        return np.stack([v.depth for v in self.views])

    @property
    def alpha(self) -> np.ndarray:
        return np.stack([v.alpha for v in self.views])


def render_frame(
    scene: SyntheticScene,
    rig: CameraRig,
    delta: RigDelta,
    t: int,
    settings: Optional[RenderSettings] = None,
    reference: bool = True,
) -> RenderedFrame:
    posed = rig.perturbed(delta).at_ego_pose(scene.ego_pose(t))
    return RenderedFrame(delta, t, posed, render_rig(scene.gaussians_at(t), posed, settings, reference))


def render_dataset(
    scene: SyntheticScene,
    rig: CameraRig,
    deltas: Sequence[RigDelta],
    timesteps: Sequence[int],
    settings: Optional[RenderSettings] = None,
    reference: bool = True,
) -> Dict[Tuple[int, int], RenderedFrame]:
    """Ground-truth renders keyed by (delta index, timestep)."""
    return {(i, t): render_frame(scene, rig, d, t, settings, reference) for i, d in enumerate(deltas) for t in timesteps}


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


class FrameInstances(NamedTuple):
    records: List[InstanceRecord]
    features: np.ndarray  # (M, feature_dim)
    centers: np.ndarray  # (M, 3) ego frame
    sizes: np.ndarray  # (M, 3)
    confidences: np.ndarray  # (M,)


def _box_points(center: np.ndarray, size: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    return np.vstack([center, (signs * size / 2.0) @ rot.T + center])


def descriptor_projection(feature_dim: int, seed: int) -> np.ndarray:
    raw_dim = N_CHANNELS + 8
    if feature_dim == raw_dim:
        return np.eye(raw_dim)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(raw_dim), size=(raw_dim, feature_dim))


def frame_instances(
    scene: SyntheticScene,
    t: int,
    rig_ego: CameraRig,
    feat_maps: np.ndarray,
    projection: np.ndarray,
    view_id: int = ORIGINAL_VIEW,
) -> FrameInstances:
    """Per-object records as perceived through ``rig_ego`` (cameras in the ego frame).

    Confidence is the visible fraction of the box centre and corners, attenuated
    with distance; the feature joins image features sampled at the projected
    centre with a geometric encoding of the anchor.
    """
    time = scene.time_of(t)
    ego_pose = scene.ego_pose(t)
    ego_from_world = invert_pose(ego_pose)
    ego_yaw = math.atan2(ego_pose[1, 0], ego_pose[0, 0])
    records, feats, centers, sizes, confs = [], [], [], [], []
    for track in scene.tracks:
        center = transform_points(ego_from_world, track.center_at(time)[None])[0]
        yaw = math.atan2(math.sin(track.yaw - ego_yaw), math.cos(track.yaw - ego_yaw))
        velocity = ego_from_world[:2, :2] @ track.velocity
        points = _box_points(center, track.size, yaw)
        visible = np.zeros(len(points), dtype=bool)
        sampled, n_seen = np.zeros(N_CHANNELS), 0
        for n, cam in enumerate(rig_ego):
            pix, _, in_front = cam.project_points(points)
            inside = in_front & (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height - 1)
            visible |= inside
            if inside[0]:
                u, v = int(round(pix[0, 0])), int(round(pix[0, 1]))
                sampled += feat_maps[n][:, v, u]
                n_seen += 1
        if n_seen:
            sampled /= n_seen
        distance = float(np.linalg.norm(center[:2]))
        confidence = float(visible.mean() * math.exp(-distance / 40.0))
        geometry = np.array(
            [center[0] / 50.0, center[1] / 50.0, center[2] / 5.0, *(track.size / 5.0), math.cos(yaw), math.sin(yaw)]
        )
        feature = np.concatenate([sampled, geometry]) @ projection
        anchor = np.concatenate([center, track.size, [yaw], velocity])
        records.append(InstanceRecord(feature, anchor, confidence, time, ego_pose, view_id))
        feats.append(feature)
        centers.append(center)
        sizes.append(track.size)
        confs.append(confidence)
    dim = projection.shape[1]
    return FrameInstances(
        records,
        np.asarray(feats, dtype=np.float64).reshape(-1, dim),
        np.asarray(centers, dtype=np.float64).reshape(-1, 3),
        np.asarray(sizes, dtype=np.float64).reshape(-1, 3),
        np.asarray(confs, dtype=np.float64),
    )


def ego_future(scene: SyntheticScene, t: int) -> np.ndarray:
    """Logged ego trajectory over the next 3 s in the ego frame at ``t``."""
    ego_from_world = invert_pose(scene.ego_pose(t))
    start = scene.time_of(t)
    points = [scene.ego_pose_at(start + WAYPOINT_DT * (i + 1))[:3, 3] for i in range(N_WAYPOINTS)]
    return transform_points(ego_from_world, np.array(points))[:, :2]


def future_obstacles(scene: SyntheticScene, t: int) -> List[List[OrientedBox]]:
    """Object boxes at each waypoint time, in the ego frame at ``t``."""
    ego_pose = scene.ego_pose(t)
    ego_from_world = invert_pose(ego_pose)
    ego_yaw = math.atan2(ego_pose[1, 0], ego_pose[0, 0])
    start = scene.time_of(t)
    out = []
    for i in range(N_WAYPOINTS):
        time = start + WAYPOINT_DT * (i + 1)
        boxes = []
        for track in scene.tracks:
            c = transform_points(ego_from_world, track.center_at(time)[None])[0]
            boxes.append(OrientedBox(float(c[0]), float(c[1]), float(track.size[0]), float(track.size[1]), track.yaw - ego_yaw))
        out.append(boxes)
    return out


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRow:
    seed: int
    setting: str
    pitch_deg: float
    height_m: float
    depth_m: float
    psnr: float
    cyclic: float
    distill: float
    distill_empty: bool
    feature_consistency: float
    recon_original: float
    depth_l1: float
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float
    collision_1s: float
    collision_2s: float
    collision_3s: float
    collision_avg: float


CSV_COLUMNS = ["schema"] + [f.name for f in fields(BenchmarkRow)]
COLLISION_COLUMNS = ("collision_1s", "collision_2s", "collision_3s", "collision_avg")


@dataclass
class BenchmarkReport:
    rows: List[BenchmarkRow]
    disabled: Tuple[str, ...] = ()

    @property
    def settings(self) -> List[str]:
        seen = []
        for row in self.rows:
            if row.setting not in seen:
                seen.append(row.setting)
        return seen

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                values = [CSV_SCHEMA_VERSION]
                for value in asdict(row).values():
                    values.append(repr(value) if isinstance(value, float) else value)
                writer.writerow(values)

    def setting_means(self) -> Dict[str, Dict[str, float]]:
        numeric = [f.name for f in fields(BenchmarkRow) if f.type in (float, "float") and f.name not in COLLISION_COLUMNS]
        out = {}
        for setting in self.settings:
            rows = [r for r in self.rows if r.setting == setting]
            means = {name: float(np.mean([getattr(r, name) for r in rows])) for name in numeric}
            rates = mean_rates([tuple(getattr(r, name) for name in COLLISION_COLUMNS) for r in rows])
            means.update(zip(COLLISION_COLUMNS, rates))
            out[setting] = means
        return out

    def summary(self) -> str:
        lines = [f"rigsplat benchmark summary (csv schema {CSV_SCHEMA_VERSION})"]
        seeds = sorted({r.seed for r in self.rows})
        lines.append(f"seeds: {', '.join(map(str, seeds))}")
        if self.disabled:
            lines.append(f"disabled components (reported as 0): {', '.join(self.disabled)}")
        header = f"{'setting':<14}{'psnr':>9}{'cyclic':>10}{'distill':>10}{'feat':>10}{'L2 avg':>9}{'col avg':>9}"
        lines.append(header)
        for setting, means in self.setting_means().items():
            lines.append(
                f"{setting:<14}{means['psnr']:>9.2f}{means['cyclic']:>10.5f}{means['distill']:>10.5f}"
                f"{means['feature_consistency']:>10.5f}{means['l2_avg']:>9.3f}{means['collision_avg']:>9.3f}"
            )
        return "\n".join(lines) + "\n"


def resolve_range(config: Config) -> RigDeltaRange:
    base = RANGE_PRESETS[config.ranges.preset]
    return RigDeltaRange(
        pitch=tuple(config.ranges.pitch) if config.ranges.pitch else base.pitch,
        height=tuple(config.ranges.height) if config.ranges.height else base.height,
        depth=tuple(config.ranges.depth) if config.ranges.depth else base.depth,
    )


def resolve_rig(config: Config) -> CameraRig:
    if config.rig.file:
        return load_rig(config.rig.file)
    r = config.rig
    return build_rig(r.n_cameras, r.width, r.height, r.focal, r.mount_height, r.mount_forward, r.yaw_spacing_deg)


def make_pipeline(config: Config) -> ReconstructionPipeline:
    return ReconstructionPipeline(
        head=AnalyticHead(config.benchmark.sh_degree, config.benchmark.pixel_footprint),
        settings=RenderSettings.from_config(config.rasterizer),
        lambda_p=config.losses.lambda_perceptual,
    )


def disabled_components(config: Config) -> Tuple[str, ...]:
    b = config.benchmark
    flags = (("memory_bank", b.use_memory_bank), ("distillation", b.use_distillation), ("cyclic", b.use_cyclic), ("planner", b.use_planner))
    return tuple(name for name, enabled in flags if not enabled)


def _warm_bank(
    config: Config,
    scene: SyntheticScene,
    rig: CameraRig,
    t: int,
    pipeline: ReconstructionPipeline,
    projection: np.ndarray,
    rng: np.random.Generator,
) -> MemoryBank:
    bank = MemoryBank(config.bank.capacity)
    delta_range = resolve_range(config)
    for frame in range(max(0, t - config.bank.warmup_frames), t):
        novel = choose_view(rng, config.bank.novel_probability)
        delta = sample_rig_delta(rng, delta_range) if novel else RigDelta()
        rendered = render_frame(scene, rig, delta, frame, pipeline.settings, reference=False)
        maps = extract_batch(rendered.images)
        instances = frame_instances(scene, frame, rig.perturbed(delta), maps, projection, NOVEL_VIEW if novel else ORIGINAL_VIEW)
        bank.update(instances.records, config.bank.top_k)
    return bank


def lift_with_history(
    pipeline: ReconstructionPipeline, current: RenderedFrame, previous: RenderedFrame
) -> Tuple[GaussianSet, GaussianSet]:
    """Current-frame primitives plus the previous frame's primitives the current views do not contradict."""
    lifted = pipeline.lift(current.images, current.depth, current.rig)
    support = history_support(pipeline.lift(previous.images, previous.depth, previous.rig), current.rig, current.depth)
    return lifted, support


def novel_view_psnr(
    scene: SyntheticScene, rig: CameraRig, delta: RigDelta, t: int, pipeline: ReconstructionPipeline
) -> float:
    """PSNR of the view synthesized for ``rig.perturbed(delta)`` at frame ``t`` against ground truth."""
    if t < 1:
        raise DegenerateInputError("Novel-view synthesis needs the previous frame; t must be >= 1")
    original = render_frame(scene, rig, RigDelta(), t, pipeline.settings)
    previous = render_frame(scene, rig, RigDelta(), t - 1, pipeline.settings)
    lifted, support = lift_with_history(pipeline, original, previous)
    synth = pipeline.synthesize(lifted, original.images, original.depth, original.rig, delta, support)
    truth = render_frame(scene, rig, delta, t, pipeline.settings)
    return psnr(np.stack([v.color for v in synth]), truth.images)


def run_seed(config: Config, seed: int) -> List[BenchmarkRow]:
    """Every benchmark setting for one scene, in reporting order."""
    b = config.benchmark
    scene = build_scene(seed, cfg=config.scene, sh_degree=b.sh_degree)
    rig = resolve_rig(config)
    pipeline = make_pipeline(config)
    settings = pipeline.settings
    t = b.timestep
    tau = config.losses.tau
    projection = descriptor_projection(config.bank.feature_dim, config.distill.head_seed)
    head_rng = np.random.default_rng(config.distill.head_seed)
    heads = KeypointHeads.random(
        config.bank.feature_dim, len(rig), head_rng, config.distill.n_samples, config.distill.offset_std, config.distill.weight_std
    )
    attn_std = 0.1 / math.sqrt(config.bank.feature_dim)
    cross = AttentionParams.random(config.bank.feature_dim, head_rng, config.bank.heads, attn_std)
    self_params = AttentionParams.random(config.bank.feature_dim, head_rng, config.bank.heads, attn_std)

    original = render_frame(scene, rig, RigDelta(), t, settings)
    adjacent = [render_frame(scene, rig, RigDelta(), s, settings) for s in (t - 1, t + 1)]
    lifted, support = lift_with_history(pipeline, original, adjacent[0])
    orig_maps = extract_batch(original.images)
    recon_original = original_recon_loss(lifted, [f.images for f in adjacent], [f.rig for f in adjacent], pipeline)
    gt_future = ego_future(scene, t)
    obstacles = future_obstacles(scene, t)

    rows = []
    for index, (name, delta) in enumerate(BENCHMARK_SETTINGS):
        rng = np.random.default_rng([seed, index])
        novel = not delta.is_zero()
        synth_delta = delta
        if b.calibration_noise_deg > 0 and novel:
            synth_delta = RigDelta(delta.pitch_deg + float(rng.normal(0.0, b.calibration_noise_deg)), delta.height_m, delta.depth_m)
        gt_novel = render_frame(scene, rig, delta, t, settings)
        synth = pipeline.synthesize(lifted, original.images, original.depth, original.rig, synth_delta, support)
        synth_images = np.stack([v.color for v in synth])
        synth_depth = np.stack([v.depth for v in synth])

        psnr_value = psnr(synth_images, gt_novel.images)
        cyclic = (
            cyclic_recon_loss(synth, original.rig.perturbed(synth_delta), original.rig, original.images, pipeline)
            if b.use_cyclic
            else 0.0
        )
        mask = gt_novel.alpha > 0.5
        depth_err = depth_l1(synth_depth, gt_novel.depth, mask) if mask.any() else 0.0
        novel_maps = extract_batch(synth_images)
        consistency = float(np.mean((novel_maps - extract_batch(gt_novel.images)) ** 2))

        # perception branch consumes the synthesized view
        rig_novel_ego = rig.perturbed(delta)
        current = frame_instances(scene, t, rig_novel_ego, novel_maps, projection, NOVEL_VIEW if novel else ORIGINAL_VIEW)
        fused = current.features
        if b.use_memory_bank and len(current.records):
            bank = _warm_bank(config, scene, rig, t, pipeline, projection, rng)
            aligned = bank.aligned(scene.ego_pose(t), scene.time_of(t))
            bank_feats = np.stack([r.feature for r in aligned]) if aligned else np.zeros((0, config.bank.feature_dim))
            fused = fuse(current.features, bank_feats, cross, self_params)

        distill_value, distill_empty = 0.0, False
        if b.use_distillation and novel and len(current.records):
            term, _, _ = viewpoint_distillation(
                fused, current.centers, current.confidences, heads, orig_maps, rig, novel_maps, rig_novel_ego, novel, tau
            )
            distill_value, distill_empty = term.value, term.empty

        l2 = (0.0, 0.0, 0.0, 0.0)
        col = (0.0, 0.0, 0.0, 0.0)
        if b.use_planner:
            plan = plan_trajectory(scene.ego_speed, current.centers, current.sizes, current.confidences, tau)
            l2 = l2_displacement(plan, gt_future)
            col = collision_rate(plan, EGO_SIZE, obstacles)

        rows.append(
            BenchmarkRow(
                seed, name, delta.pitch_deg, delta.height_m, delta.depth_m, psnr_value, cyclic, distill_value,
                distill_empty, consistency, recon_original, depth_err, *l2, *col,
            )
        )
        if b.write_png:
            png_dir = os.path.join(b.output_dir, "png")
            os.makedirs(png_dir, exist_ok=True)
            slug = name.replace(" ", "_").replace("+", "p").replace("-", "m")
            for n, view in enumerate(synth):
                view.save_png(os.path.join(png_dir, f"seed{seed}_{slug}_cam{n}.png"))
        logger.info(f"seed {seed} {name}: psnr={psnr_value:.2f} cyclic={cyclic:.5f} distill={distill_value:.5f}")
    return rows


def run_benchmark(config: Config) -> BenchmarkReport:
    if not config.benchmark.seeds:
        raise ConfigError("No scene seeds configured", key="benchmark.seeds")
    for seed in config.benchmark.seeds:
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"Scene seed {seed!r} is not a non-negative integer", key="benchmark.seeds")
    seeds = list(config.benchmark.seeds)
    if config.benchmark.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.benchmark.workers) as pool:
            per_seed = list(pool.map(run_seed, [config] * len(seeds), seeds))
    else:
        per_seed = [run_seed(config, seed) for seed in seeds]
    return BenchmarkReport([row for rows in per_seed for row in rows], disabled_components(config))


def write_report(report: BenchmarkReport, output_dir: str) -> Tuple[str, str]:
    os.makedirs(output_dir, exist_ok=True)
    csv_path = os.path.join(output_dir, "report.csv")
    summary_path = os.path.join(output_dir, "summary.txt")
    report.write_csv(csv_path)
    with open(summary_path, "w") as f:
        f.write(report.summary())
    logger.info(f"Wrote {csv_path} and {summary_path}")
    return csv_path, summary_path
