"""Open-loop planning metrics and a rule-based planner stand-in.

Trajectories are six (x, y) waypoints in the ego frame at t0, spaced 0.5 s apart,
so the 1 s / 2 s / 3 s horizons are waypoint indices 1, 3 and 5.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.errors import ShapeError

WAYPOINT_DT = 0.5
N_WAYPOINTS = 6
HORIZONS = (1, 2, 3)
EGO_SIZE = (4.0, 2.0)


def horizon_index(seconds: float) -> int:
    return int(round(seconds / WAYPOINT_DT)) - 1


def _trajectory(points) -> np.ndarray:
    traj = np.asarray(points, dtype=np.float64)
    if traj.shape != (N_WAYPOINTS, 2) or not np.all(np.isfinite(traj)):
        raise ShapeError(f"Trajectory must be {N_WAYPOINTS} finite (x, y) waypoints, got shape {traj.shape}")
    return traj


def l2_displacement(pred, gt) -> Tuple[float, float, float, float]:
    """Displacement at each horizon waypoint and their mean."""
    pred, gt = _trajectory(pred), _trajectory(gt)
    dist = np.linalg.norm(pred - gt, axis=1)
    values = [float(dist[horizon_index(h)]) for h in HORIZONS]
    return values[0], values[1], values[2], float(np.mean(values))


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    length: float
    width: float
    yaw: float = 0.0

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [self.length / 2.0, self.width / 2.0]
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + [self.x, self.y]

    def axes(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, s], [-s, c]])


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test; boxes that only touch do not overlap."""
    ca, cb = a.corners(), b.corners()
    for axis in np.concatenate([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() <= pb.min() or pb.max() <= pa.min():
            return False
    return True


def headings(traj: np.ndarray) -> np.ndarray:
    """Heading at each waypoint from the step that reached it; the ego starts at the origin facing +x."""
    prev = np.vstack([[0.0, 0.0], traj[:-1]])
    steps = traj - prev
    out = np.zeros(len(traj))
    heading = 0.0
    for i, (dx, dy) in enumerate(steps):
        if dx * dx + dy * dy > 1e-12:
            heading = math.atan2(dy, dx)
        out[i] = heading
    return out


def collisions_per_waypoint(pred, obstacles: Sequence[Sequence[OrientedBox]], ego_size=EGO_SIZE) -> np.ndarray:
    traj = _trajectory(pred)
    if len(obstacles) != N_WAYPOINTS:
        raise ShapeError(f"Need obstacle boxes for each of the {N_WAYPOINTS} waypoints, got {len(obstacles)}")
    hits = np.zeros(N_WAYPOINTS, dtype=bool)
    for i, (point, heading) in enumerate(zip(traj, headings(traj))):
        ego = OrientedBox(point[0], point[1], ego_size[0], ego_size[1], heading)
        hits[i] = any(boxes_overlap(ego, box) for box in obstacles[i])
    return hits


def collision_rate(pred, ego_size, obstacles: Sequence[Sequence[OrientedBox]]) -> Tuple[float, float, float, float]:
    """Per-trajectory rate at each horizon: 1 when any waypoint up to it collides."""
    hits = collisions_per_waypoint(pred, obstacles, ego_size)
    values = [float(hits[: horizon_index(h) + 1].any()) for h in HORIZONS]
    return values[0], values[1], values[2], float(np.mean(values))


def mean_rates(rows: Sequence[Tuple[float, ...]]) -> Tuple[float, ...]:
    """Fraction of evaluated samples per horizon."""
    if not rows:
        return (0.0, 0.0, 0.0, 0.0)
    return tuple(float(v) for v in np.mean(np.asarray(rows, dtype=np.float64), axis=0))


def plan_trajectory(
    ego_speed: float,
    centers: np.ndarray,
    sizes: np.ndarray,
    confidences: Sequence[float],
    tau: float = 0.3,
    ego_size=EGO_SIZE,
    margin: float = 1.0,
) -> np.ndarray:
    """Constant-speed rollout along +x that stops short of the nearest confident
    instance inside the ego corridor."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
    stop = math.inf
    for center, size, conf in zip(centers, sizes, confidences):
        if conf <= tau or center[0] <= 0:
            continue
        half_corridor = ego_size[1] / 2.0 + max(size[0], size[1]) / 2.0 + margin
        if abs(center[1]) < half_corridor:
            reach = center[0] - max(size[0], size[1]) / 2.0 - ego_size[0] / 2.0 - margin
            stop = min(stop, max(reach, 0.0))
    times = WAYPOINT_DT * np.arange(1, N_WAYPOINTS + 1)
    xs = np.minimum(ego_speed * times, stop)
    return np.stack([xs, np.zeros(N_WAYPOINTS)], axis=1)
