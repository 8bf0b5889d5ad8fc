"""Pinhole cameras, rigs and the rig-perturbation protocol.

Conventions: right-handed frames, the camera looks along +z with image x to the
right and image y down. Pixel centres sit at integer coordinates. Extrinsics map
world to camera (``x_cam = R @ x_world + t``). Rigs are described in the vehicle
(ego) frame whose forward and up axes travel with the rig; the default vehicle
frame is x forward, y left, z up.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.errors import BehindCameraError, FormatError, InvalidDepthError, InvalidPoseError

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4
ORTHONORMAL_TOL = 1e-9
RIG_FILE_VERSION = 1

FORWARD = (1.0, 0.0, 0.0)
UP = (0.0, 0.0, 1.0)


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidPoseError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidPoseError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """Camera-from-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen(self.rotation)
        translation = _frozen(self.translation).reshape(3)
        if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
            raise InvalidPoseError("Rotation must be a finite 3x3 matrix")
        if not np.all(np.isfinite(translation)):
            raise InvalidPoseError("Translation must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidPoseError("Rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise InvalidPoseError("Rotation has det -1 (reflection)")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, matrix) -> "CameraExtrinsics":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidPoseError("Extrinsic matrix must have last row [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_center(cls, rotation, center) -> "CameraExtrinsics":
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, -rotation @ np.asarray(center, dtype=np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.center

    def with_extrinsics(self, extrinsics: CameraExtrinsics) -> "Camera":
        return Camera(self.intrinsics, extrinsics)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.extrinsics.rotation.T + self.extrinsics.translation

    def project_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised projection. Returns (pixels, depth, in_front); pixels of points
        behind the near plane are zero and must be ignored via ``in_front``."""
        cam = self.to_camera(np.atleast_2d(points))
        depth = cam[:, 2]
        in_front = depth > NEAR_PLANE
        safe_z = np.where(in_front, depth, 1.0)
        k = self.intrinsics
        pixels = np.stack([k.fx * cam[:, 0] / safe_z + k.cx, k.fy * cam[:, 1] / safe_z + k.cy], axis=-1)
        pixels[~in_front] = 0.0
        return pixels, depth, in_front

    def unproject_pixels(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        depths = np.asarray(depths, dtype=np.float64).reshape(-1)
        if np.any(~(depths > 0)):
            raise InvalidDepthError("Depth must be positive to unproject")
        k = self.intrinsics
        cam = np.stack(
            [(pixels[:, 0] - k.cx) / k.fx * depths, (pixels[:, 1] - k.cy) / k.fy * depths, depths], axis=-1
        )
        return (cam - self.extrinsics.translation) @ self.extrinsics.rotation

    def pixel_size(self, depth) -> np.ndarray:
        """World-space footprint (meters) of one pixel at the given depth."""
        return np.asarray(depth, dtype=np.float64) / math.sqrt(self.intrinsics.fx * self.intrinsics.fy)


def project(point, cam: Camera) -> Tuple[np.ndarray, float]:
    """Projects one world point; raises BehindCameraError inside the near plane."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise BehindCameraError("Point must be finite")
    x, y, z = cam.extrinsics.rotation @ point + cam.extrinsics.translation
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"Point at camera depth {z:.6g} m is behind the near plane")
    k = cam.intrinsics
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def unproject(pixel, depth: float, cam: Camera) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"Depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    k = cam.intrinsics
    p_cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return cam.extrinsics.rotation.T @ (p_cam - cam.extrinsics.translation)


# ---------------------------------------------------------------------------
# Rig perturbation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigDelta:
    pitch_deg: float = 0.0
    height_m: float = 0.0
    depth_m: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.pitch_deg, self.height_m, self.depth_m)):
            raise InvalidPoseError(f"Rig delta must be finite: {self}")

    def is_zero(self) -> bool:
        return self.pitch_deg == 0.0 and self.height_m == 0.0 and self.depth_m == 0.0

    def __neg__(self) -> "RigDelta":
        return RigDelta(-self.pitch_deg, -self.height_m, -self.depth_m)

    def label(self) -> str:
        if self.is_zero():
            return "original"
        parts = []
        if self.pitch_deg:
            parts.append(f"pitch {self.pitch_deg:+g}deg")
        if self.height_m:
            parts.append(f"height {self.height_m:+.1f}m")
        if self.depth_m:
            parts.append(f"depth {self.depth_m:+.1f}m")
        return ", ".join(parts)


@dataclass(frozen=True)
class RigDeltaRange:
    pitch: Tuple[float, float] = (0.0, 0.0)
    height: Tuple[float, float] = (0.0, 0.0)
    depth: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("pitch", "height", "depth"):
            low, high = getattr(self, name)
            if not low <= high:
                raise InvalidPoseError(f"Range '{name}' has low {low} > high {high}")

    def contains(self, delta: RigDelta) -> bool:
        return (
            self.pitch[0] <= delta.pitch_deg <= self.pitch[1]
            and self.height[0] <= delta.height_m <= self.height[1]
            and self.depth[0] <= delta.depth_m <= self.depth[1]
        )


# Training-time augmentation ranges
DEFAULT_RANGE = RigDeltaRange(pitch=(-10.0, 5.0), height=(-0.7, 1.0), depth=(-0.2, 1.0))
SUPERSET_RANGE = RigDeltaRange(pitch=(-15.0, 10.0), height=(-1.0, 1.5), depth=(-0.5, 1.5))
SUBSET_RANGE = RigDeltaRange(pitch=(-5.0, 2.0), height=(-0.3, 0.5), depth=(-0.1, 0.5))

RANGE_PRESETS: Dict[str, RigDeltaRange] = {
    "default": DEFAULT_RANGE,
    "superset": SUPERSET_RANGE,
    "subset": SUBSET_RANGE,
}

# Unseen-rig evaluation settings, in reporting order
BENCHMARK_SETTINGS: Tuple[Tuple[str, RigDelta], ...] = (
    ("original", RigDelta()),
    ("pitch +5", RigDelta(pitch_deg=5.0)),
    ("pitch -10", RigDelta(pitch_deg=-10.0)),
    ("height +1.0", RigDelta(height_m=1.0)),
    ("height -0.7", RigDelta(height_m=-0.7)),
    ("depth +1.0", RigDelta(depth_m=1.0)),
)


def _check_axes(forward_axis, up_axis) -> Tuple[np.ndarray, np.ndarray]:
    forward = np.asarray(forward_axis, dtype=np.float64).reshape(3)
    up = np.asarray(up_axis, dtype=np.float64).reshape(3)
    if (
        abs(np.linalg.norm(forward) - 1.0) > ORTHONORMAL_TOL
        or abs(np.linalg.norm(up) - 1.0) > ORTHONORMAL_TOL
        or abs(float(forward @ up)) > ORTHONORMAL_TOL
    ):
        raise InvalidPoseError("Vehicle forward/up axes must be orthogonal unit vectors")
    return forward, up


def perturb_extrinsic(ext: CameraExtrinsics, delta: RigDelta, forward_axis=FORWARD, up_axis=UP) -> CameraExtrinsics:
    """Re-mounts a camera: shift by ``height_m * up + depth_m * forward`` (vehicle
    frame), then pitch about the vehicle lateral axis through the new centre.

    Positive pitch tilts a forward-facing optical axis upward. Because the pitch
    pivots on the camera centre, translation and rotation commute and applying
    ``-delta`` afterwards restores the original pose.
    """
    forward, up = _check_axes(forward_axis, up_axis)
    if delta.is_zero():
        return ext

    center = ext.center + delta.height_m * up + delta.depth_m * forward
    rotation = ext.rotation
    if delta.pitch_deg != 0.0:
        lateral = np.cross(forward, up)
        pitch = Rotation.from_rotvec(math.radians(delta.pitch_deg) * lateral).as_matrix()
        # camera-to-world turns by `pitch`, so camera-from-world picks up its transpose
        rotation = rotation @ pitch.T
    return CameraExtrinsics.from_center(rotation, center)


def sample_rig_delta(rng: np.random.Generator, delta_range: RigDeltaRange) -> RigDelta:
    """Uniform draw inside the box; the generator is the only source of randomness."""
    return RigDelta(
        pitch_deg=float(rng.uniform(*delta_range.pitch)),
        height_m=float(rng.uniform(*delta_range.height)),
        depth_m=float(rng.uniform(*delta_range.depth)),
    )


# ---------------------------------------------------------------------------
# Rigid poses
# ---------------------------------------------------------------------------


def make_pose(yaw: float = 0.0, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """World-from-ego 4x4 pose from a heading (radians about +z) and a position."""
    c, s = math.cos(yaw), math.sin(yaw)
    pose = np.eye(4)
    pose[:2, :2] = [[c, -s], [s, c]]
    pose[:3, 3] = np.asarray(translation, dtype=np.float64)
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    inv = np.eye(4)
    inv[:3, :3] = pose[:3, :3].T
    inv[:3, 3] = -pose[:3, :3].T @ pose[:3, 3]
    return inv


def transform_points(pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ pose[:3, :3].T + pose[:3, 3]


# ---------------------------------------------------------------------------
# Rigs
# ---------------------------------------------------------------------------

# camera (x right, y down, z forward) from vehicle (x forward, y left, z up)
CAMERA_FROM_VEHICLE = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: Tuple[Camera, ...]
    names: Tuple[str, ...] = ()
    forward_axis: Tuple[float, float, float] = FORWARD
    up_axis: Tuple[float, float, float] = UP

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        names = tuple(self.names) or tuple(f"cam{i}" for i in range(len(self.cameras)))
        if len(names) != len(self.cameras):
            raise FormatError("Rig needs one name per camera")
        object.__setattr__(self, "names", names)
        _check_axes(self.forward_axis, self.up_axis)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> Camera:
        return self.cameras[index]

    def __iter__(self):
        return iter(self.cameras)

    def perturbed(self, delta: RigDelta) -> "CameraRig":
        """Applies one delta jointly to every camera of the rig."""
        if delta.is_zero():
            return self
        cameras = tuple(
            cam.with_extrinsics(perturb_extrinsic(cam.extrinsics, delta, self.forward_axis, self.up_axis))
            for cam in self.cameras
        )
        return CameraRig(cameras, self.names, self.forward_axis, self.up_axis)

    def at_ego_pose(self, world_from_ego: np.ndarray) -> "CameraRig":
        """Places an ego-frame rig into the world at the given vehicle pose."""
        ego_from_world = invert_pose(world_from_ego)
        cameras = []
        for cam in self.cameras:
            rotation = cam.extrinsics.rotation @ ego_from_world[:3, :3]
            translation = cam.extrinsics.rotation @ ego_from_world[:3, 3] + cam.extrinsics.translation
            cameras.append(cam.with_extrinsics(CameraExtrinsics(rotation, translation)))
        # perturbation axes follow the vehicle into the world
        world_rot = np.asarray(world_from_ego, dtype=np.float64)[:3, :3]
        forward = tuple(float(v) for v in world_rot @ np.asarray(self.forward_axis, dtype=np.float64))
        up = tuple(float(v) for v in world_rot @ np.asarray(self.up_axis, dtype=np.float64))
        return CameraRig(tuple(cameras), self.names, forward, up)

    def to_dict(self) -> Dict:
        return {
            "version": RIG_FILE_VERSION,
            "forward_axis": list(self.forward_axis),
            "up_axis": list(self.up_axis),
            "cameras": [
                {
                    "name": name,
                    "intrinsics": {
                        "fx": cam.intrinsics.fx,
                        "fy": cam.intrinsics.fy,
                        "cx": cam.intrinsics.cx,
                        "cy": cam.intrinsics.cy,
                        "width": cam.intrinsics.width,
                        "height": cam.intrinsics.height,
                    },
                    "extrinsic": [float(v) for v in cam.extrinsics.matrix.reshape(-1)],
                }
                for name, cam in zip(self.names, self.cameras)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CameraRig":
        try:
            if data.get("version", RIG_FILE_VERSION) != RIG_FILE_VERSION:
                raise FormatError(f"Unsupported rig file version {data.get('version')}")
            cameras, names = [], []
            for entry in data["cameras"]:
                k = entry["intrinsics"]
                intrinsics = CameraIntrinsics(
                    float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]), int(k["width"]), int(k["height"])
                )
                extrinsic = entry["extrinsic"]
                if len(extrinsic) != 16:
                    raise FormatError("Extrinsic must list 16 row-major values")
                cameras.append(Camera(intrinsics, CameraExtrinsics.from_matrix(extrinsic)))
                names.append(str(entry.get("name", f"cam{len(names)}")))
            return cls(
                tuple(cameras),
                tuple(names),
                tuple(data.get("forward_axis", FORWARD)),
                tuple(data.get("up_axis", UP)),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"Malformed rig description: missing or invalid {e}") from e


def save_rig(rig: CameraRig, path: str):
    with open(path, "w") as f:
        json.dump(rig.to_dict(), f, indent=2)


def load_rig(path: str) -> CameraRig:
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"Rig file {path} is not valid JSON: {e}") from e
    return CameraRig.from_dict(data)


def build_rig(
    n_cameras: int = 3,
    width: int = 64,
    height: int = 48,
    focal: float = 48.0,
    mount_height: float = 1.5,
    mount_forward: float = 1.0,
    yaw_spacing_deg: float = 55.0,
) -> CameraRig:
    """Front-centred fan of cameras: yaw 0, +spacing, -spacing, +2*spacing, ..."""
    yaws: List[float] = [0.0]
    step = 1
    while len(yaws) < n_cameras:
        yaws.append(step * yaw_spacing_deg)
        if len(yaws) < n_cameras:
            yaws.append(-step * yaw_spacing_deg)
        step += 1
    intrinsics = CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    cameras, names = [], []
    for yaw_deg in yaws:
        yaw = math.radians(yaw_deg)
        vehicle_from_camera_yaw = Rotation.from_euler("z", yaw).as_matrix()
        rotation = CAMERA_FROM_VEHICLE @ vehicle_from_camera_yaw.T
        center = np.array([mount_forward, 0.0, mount_height])
        cameras.append(Camera(intrinsics, CameraExtrinsics.from_center(rotation, center)))
        names.append("front" if yaw_deg == 0 else f"yaw{yaw_deg:+.0f}")
    return CameraRig(tuple(cameras), tuple(names))
