"""Viewpoint-mixed instance memory: storage, temporal alignment and attention fusion.

Anchors are 9-vectors ``[x, y, z, l, w, h, yaw, vx, vy]`` expressed in the ego
frame of the record's capture time. Records from original-view and novel-view
passes are stored interleaved; ``view_id`` is kept for diagnostics only.
"""

import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from src.errors import FormatError, ShapeError, TemporalOrderError
from src.geometry import invert_pose

logger = logging.getLogger(__name__)

ANCHOR_DIM = 9
ORIGINAL_VIEW = 0
NOVEL_VIEW = 1

BANK_MAGIC = b"MBK1"
BANK_VERSION = 1
HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class InstanceRecord:
    feature: np.ndarray
    anchor: np.ndarray
    confidence: float
    timestamp: float
    ego_pose: np.ndarray
    view_id: int = ORIGINAL_VIEW

    def __post_init__(self):
        feature = np.array(self.feature, dtype=np.float64).reshape(-1)
        anchor = np.array(self.anchor, dtype=np.float64).reshape(-1)
        pose = np.array(self.ego_pose, dtype=np.float64)
        if anchor.shape != (ANCHOR_DIM,):
            raise ShapeError(f"Anchor must have {ANCHOR_DIM} entries, got {anchor.shape}")
        if pose.shape != (4, 4):
            raise ShapeError(f"Ego pose must be 4x4, got {pose.shape}")
        if not np.all(np.isfinite(feature)):
            raise ShapeError("Instance feature must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ShapeError(f"Confidence {self.confidence} outside [0, 1]")
        if np.any(anchor[3:6] <= 0):
            raise ShapeError(f"Box size must be positive, got {anchor[3:6]}")
        for array in (feature, anchor, pose):
            array.setflags(write=False)
        object.__setattr__(self, "feature", feature)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "ego_pose", pose)
        object.__setattr__(self, "confidence", float(self.confidence))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def center(self) -> np.ndarray:
        return self.anchor[0:3]

    @property
    def size(self) -> np.ndarray:
        return self.anchor[3:6]

    @property
    def yaw(self) -> float:
        return float(self.anchor[6])

    @property
    def velocity(self) -> np.ndarray:
        return self.anchor[7:9]


def _wrap_angle(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


def align_to_current(records: Iterable[InstanceRecord], current_ego_pose: np.ndarray, current_time: float) -> List[InstanceRecord]:
    """Propagates anchors with their velocity and re-expresses them in the current ego frame."""
    current_from_world = invert_pose(current_ego_pose)
    aligned = []
    for rec in records:
        dt = current_time - rec.timestamp
        if dt < 0:
            raise TemporalOrderError(f"Record at t={rec.timestamp} is newer than the current frame t={current_time}")
        if dt == 0 and np.array_equal(rec.ego_pose, current_ego_pose):
            aligned.append(rec)
            continue
        transform = current_from_world @ rec.ego_pose
        rot = transform[:3, :3]
        velocity = np.array([rec.velocity[0], rec.velocity[1], 0.0])
        center = rot @ (rec.center + velocity * dt) + transform[:3, 3]
        new_velocity = rot @ velocity
        yaw = _wrap_angle(rec.yaw + math.atan2(rot[1, 0], rot[0, 0]))
        anchor = np.concatenate([center, rec.size, [yaw], new_velocity[:2]])
        aligned.append(replace(rec, anchor=anchor, timestamp=current_time, ego_pose=current_ego_pose))
    return aligned


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Affine query/key/value/output maps (row-vector convention ``x @ W + b``)."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    heads: int = 1

    def __post_init__(self):
        dim = np.asarray(self.wq).shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if np.asarray(getattr(self, name)).shape != (dim, dim):
                raise ShapeError(f"Projection {name} must be {dim}x{dim}")
        for name in ("bq", "bk", "bv", "bo"):
            if np.asarray(getattr(self, name)).shape != (dim,):
                raise ShapeError(f"Bias {name} must have {dim} entries")
        if self.heads < 1 or dim % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide feature dimension {dim}")

    @property
    def dim(self) -> int:
        return np.asarray(self.wq).shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @classmethod
    def identity(cls, dim: int, heads: int = 1) -> "AttentionParams":
        eye, zero = np.eye(dim), np.zeros(dim)
        return cls(eye, zero, eye, zero, eye, zero, eye, zero, heads)

    @classmethod
    def zeros(cls, dim: int, heads: int = 1) -> "AttentionParams":
        w, b = np.zeros((dim, dim)), np.zeros(dim)
        return cls(w, b, w, b, w, b, w, b, heads)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, heads: int = 1, std: Optional[float] = None) -> "AttentionParams":
        std = std if std is not None else 1.0 / math.sqrt(dim)
        mats = [rng.normal(0.0, std, size=(dim, dim)) for _ in range(4)]
        zero = np.zeros(dim)
        return cls(mats[0], zero, mats[1], zero, mats[2], zero, mats[3], zero, heads)


def _attend(queries: np.ndarray, memory: np.ndarray, params: AttentionParams) -> np.ndarray:
    q = queries @ params.wq + params.bq
    k = memory @ params.wk + params.bk
    v = memory @ params.wv + params.bv
    m, n, h, d = q.shape[0], k.shape[0], params.heads, params.head_dim
    q = q.reshape(m, h, d).transpose(1, 0, 2)
    k = k.reshape(n, h, d).transpose(1, 0, 2)
    v = v.reshape(n, h, d).transpose(1, 0, 2)
    weights = softmax(q @ k.transpose(0, 2, 1) * params.scale, axis=-1)
    mixed = (weights @ v).transpose(1, 0, 2).reshape(m, h * d)
    return queries + mixed @ params.wo + params.bo


def _check_features(features: np.ndarray, params: AttentionParams, name: str) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.dim:
        raise ShapeError(f"{name} must be (M, {params.dim}), got {features.shape}")
    return features


def cross_attend(features: np.ndarray, bank_features: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Residual cross-attention of current instances over bank records; an empty bank returns the queries."""
    features = _check_features(features, params, "Queries")
    if features.shape[0] == 0:
        raise ShapeError("Cross-attention needs at least one query")
    bank_features = np.asarray(bank_features, dtype=np.float64)
    if bank_features.size == 0:
        return features.copy()
    bank_features = _check_features(bank_features, params, "Bank features")
    return _attend(features, bank_features, params)


def self_attend(features: np.ndarray, params: AttentionParams) -> np.ndarray:
    features = _check_features(features, params, "Instances")
    if features.shape[0] == 0:
        raise ShapeError("Self-attention needs at least one instance")
    return _attend(features, features, params)


def fuse(features, bank_features, cross: AttentionParams, self_params: AttentionParams) -> np.ndarray:
    """Cross-attention over the bank, then self-attention among the current instances."""
    return self_attend(cross_attend(features, bank_features, cross), self_params)


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------


def select_top_k(confidences: Sequence[float], k: int) -> np.ndarray:
    """Indices of the k most confident entries, ties to the lower index, returned ascending."""
    conf = np.asarray(confidences, dtype=np.float64)
    if k <= 0 or conf.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-conf, kind="stable")
    return np.sort(order[:k])


class MemoryBank:
    """FIFO store of instance records, oldest first. Single writer."""

    def __init__(self, capacity: int = 600):
        if capacity < 0:
            raise ShapeError("Bank capacity must be >= 0")
        self.capacity = capacity
        self._records = deque()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> Tuple[InstanceRecord, ...]:
        return tuple(self._records)

    def features(self) -> np.ndarray:
        if not self._records:
            return np.zeros((0, 0))
        return np.stack([r.feature for r in self._records])

    def update(self, instances: Sequence[InstanceRecord], k: int) -> int:
        """Appends the top-k instances by confidence; returns how many records were evicted."""
        chosen = select_top_k([r.confidence for r in instances], k)
        for i in chosen:
            self._records.append(instances[i])
        evicted = 0
        while len(self._records) > self.capacity:
            self._records.popleft()
            evicted += 1
        if evicted:
            logger.debug(f"Memory bank evicted {evicted} records")
        return evicted

    def aligned(self, current_ego_pose: np.ndarray, current_time: float) -> List[InstanceRecord]:
        return align_to_current(self._records, current_ego_pose, current_time)

    def to_bytes(self) -> bytes:
        dim = len(self._records[0].feature) if self._records else 0
        rows = [
            np.concatenate([[r.confidence, r.timestamp, float(r.view_id)], r.ego_pose.reshape(-1), r.anchor, r.feature])
            for r in self._records
        ]
        body = np.asarray(rows, dtype="<f8").reshape(len(rows), 3 + 16 + ANCHOR_DIM + dim)
        return HEADER.pack(BANK_MAGIC, BANK_VERSION, len(rows), dim) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, capacity: int = 600) -> "MemoryBank":
        if len(data) < HEADER.size:
            raise FormatError("Truncated memory bank header")
        magic, version, count, dim = HEADER.unpack_from(data)
        if magic != BANK_MAGIC or version != BANK_VERSION:
            raise FormatError(f"Not a memory bank checkpoint (magic {magic!r}, version {version})")
        width = 3 + 16 + ANCHOR_DIM + dim
        body = np.frombuffer(data, dtype="<f8", offset=HEADER.size)
        if body.size != count * width:
            raise FormatError(f"Expected {count * width} values, found {body.size}")
        bank = cls(max(capacity, count))
        for row in body.reshape(count, width):
            bank._records.append(
                InstanceRecord(
                    feature=row[3 + 16 + ANCHOR_DIM :],
                    anchor=row[3 + 16 : 3 + 16 + ANCHOR_DIM],
                    confidence=row[0],
                    timestamp=row[1],
                    ego_pose=row[3 : 3 + 16].reshape(4, 4),
                    view_id=int(row[2]),
                )
            )
        return bank


def update_bank(bank: MemoryBank, instances: Sequence[InstanceRecord], k: int) -> MemoryBank:
    bank.update(instances, k)
    return bank


def save_bank(bank: MemoryBank, path: str):
    with open(path, "wb") as f:
        f.write(bank.to_bytes())


def load_bank(path: str, capacity: int = 600) -> MemoryBank:
    with open(path, "rb") as f:
        return MemoryBank.from_bytes(f.read(), capacity)
