"""Benchmark/pipeline configuration.

The configuration file is TOML with the sections listed in ``SECTIONS``. Every key
has a default; unknown keys are rejected so that a typo never silently falls back
to a default. Environment variables (loaded from ``.env`` by the CLI) override
the file for the handful of run-level settings in ``ENV_OVERRIDES``.
"""

import dataclasses
import logging
import os
import tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from src.errors import ConfigError

logger = logging.getLogger(__name__)

FRAME_DT = 0.5
MAX_FRAME_MOTION = 5.0


@dataclass
class SceneConfig:
    n_objects: int = 5
    n_timesteps: int = 8
    arena_size: float = 100.0
    ground_x_range: Tuple[float, float] = (-10.0, 60.0)
    ground_half_width: float = 30.0
    ground_spacing: float = 1.0
    ground_scale: float = 0.6
    ground_thickness: float = 0.02
    texture_amplitude: float = 0.12
    texture_period: float = 9.0
    box_points_per_meter: float = 3.0
    object_max_speed: float = 4.0
    ego_speed: float = 5.0
    # objects keep this distance from the ego path over the sequence
    ego_clearance: float = 4.0


@dataclass
class RigConfig:
    n_cameras: int = 3
    width: int = 64
    height: int = 48
    focal: float = 48.0
    mount_height: float = 1.5
    mount_forward: float = 1.0
    yaw_spacing_deg: float = 55.0
    # Optional rig description file; overrides the generated rig when set
    file: str = ""


@dataclass
class RangesConfig:
    preset: str = "default"
    # Explicit [low, high] intervals override the preset when given
    pitch: Optional[Tuple[float, float]] = None
    height: Optional[Tuple[float, float]] = None
    depth: Optional[Tuple[float, float]] = None


@dataclass
class RasterizerConfig:
    tile_size: int = 16
    cov_floor: float = 0.3
    transmittance_cutoff: float = 1e-6
    far_depth: float = 100.0
    background: Tuple[float, float, float] = (0.6, 0.75, 0.9)
    # 0 disables the support cut or the Jacobian clamp
    extent_sigma: float = 3.0
    jacobian_clamp: float = 1.3


@dataclass
class LossesConfig:
    render_l2: float = 1.0
    perceptual: float = 1.0
    recon_original: float = 1.0
    recon_cyclic: float = 1.0
    depth_l1: float = 1.0
    distill: float = 1.0
    det: float = 1.0
    map: float = 1.0
    motion: float = 1.0
    plan: float = 1.0
    lambda_perceptual: float = 0.2
    tau: float = 0.3

    def weights(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in WEIGHT_KEYS}


WEIGHT_KEYS = (
    "render_l2", "perceptual", "recon_original", "recon_cyclic", "depth_l1", "distill",
    "det", "map", "motion", "plan",
)


@dataclass
class BankConfig:
    capacity: int = 600
    top_k: int = 32
    heads: int = 1
    feature_dim: int = 16
    warmup_frames: int = 2
    novel_probability: float = 0.5


@dataclass
class DistillConfig:
    n_samples: int = 8
    offset_std: float = 0.5
    weight_std: float = 0.1
    head_seed: int = 0


@dataclass
class BenchmarkConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1])
    timestep: int = 2
    output_dir: str = "bench_out"
    write_png: bool = False
    workers: int = 1
    sh_degree: int = 1
    pixel_footprint: float = 0.3
    use_memory_bank: bool = True
    use_distillation: bool = True
    use_cyclic: bool = True
    use_planner: bool = True
    calibration_noise_deg: float = 0.0


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    ranges: RangesConfig = field(default_factory=RangesConfig)
    rasterizer: RasterizerConfig = field(default_factory=RasterizerConfig)
    losses: LossesConfig = field(default_factory=LossesConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return dataclasses.asdict(self)


SECTIONS = {
    "scene": SceneConfig,
    "rig": RigConfig,
    "ranges": RangesConfig,
    "rasterizer": RasterizerConfig,
    "losses": LossesConfig,
    "bank": BankConfig,
    "distill": DistillConfig,
    "benchmark": BenchmarkConfig,
}

ENV_OVERRIDES = {
    "RIGSPLAT_OUTPUT_DIR": ("benchmark", "output_dir", str),
}


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"Config key '{key}' expects a boolean", key=key)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Config key '{key}' expects an integer", key=key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"Config key '{key}' expects a number", key=key)
        return float(value)
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, list):
            raise ConfigError(f"Config key '{key}' expects a list", key=key)
        return tuple(float(v) for v in value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"Config key '{key}' expects a list", key=key)
        return list(value)
    return value


def _build_section(name: str, table: Dict[str, Any]):
    cls = SECTIONS[name]
    section = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{name}.{key}'", key=f"{name}.{key}")
        setattr(section, key, _coerce(value, getattr(section, key), f"{name}.{key}"))
    return section


def validate(config: Config) -> Config:
    for name in WEIGHT_KEYS:
        if getattr(config.losses, name) < 0:
            raise ConfigError(f"Loss weight 'losses.{name}' must be >= 0", key=f"losses.{name}")
    if config.losses.lambda_perceptual < 0:
        raise ConfigError("'losses.lambda_perceptual' must be >= 0", key="losses.lambda_perceptual")
    if not config.benchmark.seeds:
        raise ConfigError("'benchmark.seeds' must list at least one scene seed", key="benchmark.seeds")
    if config.ranges.preset not in ("default", "superset", "subset"):
        raise ConfigError(f"Unknown range preset '{config.ranges.preset}'", key="ranges.preset")
    for axis in ("pitch", "height", "depth"):
        interval = getattr(config.ranges, axis)
        if interval is not None and (len(interval) != 2 or interval[0] > interval[1]):
            raise ConfigError(f"'ranges.{axis}' must be [low, high] with low <= high", key=f"ranges.{axis}")
    if config.bank.capacity < 0 or config.bank.top_k < 0:
        raise ConfigError("'bank.capacity' and 'bank.top_k' must be >= 0", key="bank.capacity")
    if config.bank.heads < 1 or config.bank.feature_dim % config.bank.heads != 0:
        raise ConfigError("'bank.heads' must divide 'bank.feature_dim'", key="bank.heads")
    if not 0 <= config.benchmark.sh_degree <= 3:
        raise ConfigError("'benchmark.sh_degree' must be within 0..3", key="benchmark.sh_degree")
    if not 1 <= config.benchmark.timestep < config.scene.n_timesteps - 1:
        raise ConfigError("'benchmark.timestep' needs a frame on each side", key="benchmark.timestep")
    if config.rasterizer.tile_size < 1:
        raise ConfigError("'rasterizer.tile_size' must be positive", key="rasterizer.tile_size")
    for key in ("extent_sigma", "jacobian_clamp"):
        if getattr(config.rasterizer, key) < 0:
            raise ConfigError(f"'rasterizer.{key}' must be >= 0", key=f"rasterizer.{key}")
    # one frame of ego motion must stay under MAX_FRAME_MOTION metres
    if not 0.0 <= config.scene.ego_speed * FRAME_DT < MAX_FRAME_MOTION:
        raise ConfigError(
            f"'scene.ego_speed' must be in [0, {MAX_FRAME_MOTION / FRAME_DT:g}) m/s, got {config.scene.ego_speed}",
            key="scene.ego_speed",
        )
    if config.scene.ego_clearance < 0:
        raise ConfigError("'scene.ego_clearance' must be >= 0", key="scene.ego_clearance")
    return config


def config_from_dict(data: Dict[str, Any]) -> Config:
    config = Config()
    for name, table in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section '{name}'", key=name)
        if not isinstance(table, dict):
            raise ConfigError(f"Config section '{name}' must be a table", key=name)
        setattr(config, name, _build_section(name, table))
    return validate(config)


def load_config(path: Optional[str] = None) -> Config:
    """Loads a TOML config over the defaults; ``None`` returns the defaults."""
    if path is None:
        config = validate(Config())
    else:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}", key=path)
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Malformed config file {path}: {e}", key=path) from e
        config = config_from_dict(data)
        logger.info(f"Loaded config from {path}")

    for env_name, (section, key, cast) in ENV_OVERRIDES.items():
        value = os.getenv(env_name)
        if value:
            setattr(getattr(config, section), key, cast(value))
    return config
