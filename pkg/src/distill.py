"""Anchor-sampled features for viewpoint-consistent distillation.

For each instance, an offset head proposes ``n_samples`` 3D keypoints around the
anchor centre, every keypoint is projected into every camera and bilinearly
sampled, and a weight head (softmax over all cameras and keypoints) aggregates
the samples into one feature per anchor. Keypoints and the rig must be in the
same frame; offsets are added to the centre without rotating by the box yaw.
"""

import logging
import struct
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from src.errors import FormatError, ProtocolError, ShapeError
from src.geometry import CameraRig
from src.losses import DEFAULT_TAU, DistillTerm, distill_loss

logger = logging.getLogger(__name__)

HEADS_MAGIC = b"KPH1"
HEADS_VERSION = 1
HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class KeypointHeads:
    offset_w: np.ndarray  # (N_i, n_samples * 3)
    offset_b: np.ndarray  # (n_samples * 3,)
    weight_w: np.ndarray  # (N_i, n_cameras * n_samples)
    weight_b: np.ndarray  # (n_cameras * n_samples,)
    n_samples: int
    n_cameras: int

    def __post_init__(self):
        dim = self.offset_w.shape[0]
        if self.offset_w.shape != (dim, self.n_samples * 3) or self.offset_b.shape != (self.n_samples * 3,):
            raise ShapeError("Offset head does not match n_samples")
        cells = self.n_cameras * self.n_samples
        if self.weight_w.shape != (dim, cells) or self.weight_b.shape != (cells,):
            raise ShapeError("Weight head does not match n_cameras x n_samples")

    @property
    def feature_dim(self) -> int:
        return self.offset_w.shape[0]

    @classmethod
    def random(
        cls,
        feature_dim: int,
        n_cameras: int,
        rng: np.random.Generator,
        n_samples: int = 8,
        offset_std: float = 0.5,
        weight_std: float = 0.1,
    ) -> "KeypointHeads":
        return cls(
            rng.normal(0.0, offset_std / np.sqrt(feature_dim), size=(feature_dim, n_samples * 3)),
            rng.normal(0.0, offset_std, size=n_samples * 3),
            rng.normal(0.0, weight_std, size=(feature_dim, n_cameras * n_samples)),
            np.zeros(n_cameras * n_samples),
            n_samples,
            n_cameras,
        )

    @classmethod
    def zeros(cls, feature_dim: int, n_cameras: int, n_samples: int = 8) -> "KeypointHeads":
        return cls(
            np.zeros((feature_dim, n_samples * 3)),
            np.zeros(n_samples * 3),
            np.zeros((feature_dim, n_cameras * n_samples)),
            np.zeros(n_cameras * n_samples),
            n_samples,
            n_cameras,
        )

    def to_bytes(self) -> bytes:
        body = np.concatenate(
            [self.offset_w.reshape(-1), self.offset_b, self.weight_w.reshape(-1), self.weight_b]
        ).astype("<f8")
        return HEADER.pack(HEADS_MAGIC, HEADS_VERSION, self.n_samples, self.n_cameras) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeypointHeads":
        if len(data) < HEADER.size:
            raise FormatError("Truncated keypoint head header")
        magic, version, n_samples, n_cameras = HEADER.unpack_from(data)
        if magic != HEADS_MAGIC or version != HEADS_VERSION:
            raise FormatError(f"Not a keypoint head checkpoint (magic {magic!r}, version {version})")
        body = np.frombuffer(data, dtype="<f8", offset=HEADER.size).astype(np.float64)
        per_dim = 3 * n_samples + n_cameras * n_samples
        if per_dim == 0 or body.size % per_dim:
            raise FormatError("Keypoint head body has an inconsistent size")
        dim = body.size // per_dim - 1
        split = np.cumsum([dim * 3 * n_samples, 3 * n_samples, dim * n_cameras * n_samples])
        ow, ob, ww, wb = np.split(body, split)
        return cls(ow.reshape(dim, -1), ob, ww.reshape(dim, -1), wb, n_samples, n_cameras)


def gen_keypoints(feature: np.ndarray, heads: KeypointHeads) -> np.ndarray:
    """Signed offsets in meters, (n_samples, 3)."""
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    if feature.shape[0] != heads.feature_dim:
        raise ShapeError(f"Feature has {feature.shape[0]} entries, heads expect {heads.feature_dim}")
    return (feature @ heads.offset_w + heads.offset_b).reshape(heads.n_samples, 3)


def gen_weights(feature: np.ndarray, heads: KeypointHeads) -> np.ndarray:
    """Aggregation weights (n_cameras, n_samples), softmax over every entry."""
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    logits = feature @ heads.weight_w + heads.weight_b
    return softmax(logits).reshape(heads.n_cameras, heads.n_samples)


def sample_points(offsets: np.ndarray, anchor) -> np.ndarray:
    """Keypoints = offsets + anchor centre. ``anchor`` is an InstanceRecord or a centre."""
    center = np.asarray(getattr(anchor, "center", anchor), dtype=np.float64).reshape(-1)[:3]
    return np.asarray(offsets, dtype=np.float64) + center


class BilinearTaps(NamedTuple):
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside: np.ndarray


def _taps(pixels: np.ndarray, height: int, width: int) -> BilinearTaps:
    u, v = pixels[:, 0], pixels[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    u = np.where(inside, u, 0.0)
    v = np.where(inside, v, 0.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    return BilinearTaps(x0, np.minimum(x0 + 1, width - 1), y0, np.minimum(y0 + 1, height - 1), u - x0, v - y0, inside)


def bilinear_sample_many(feat_map: np.ndarray, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(C, H, W) map sampled at (P, 2) pixels -> ((P, C) values, (P,) in-view mask)."""
    feat_map = np.asarray(feat_map, dtype=np.float64)
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    _, height, width = feat_map.shape
    t = _taps(pixels, height, width)
    fx, fy = t.fx[:, None], t.fy[:, None]
    values = (
        feat_map[:, t.y0, t.x0].T * (1 - fx) * (1 - fy)
        + feat_map[:, t.y0, t.x1].T * fx * (1 - fy)
        + feat_map[:, t.y1, t.x0].T * (1 - fx) * fy
        + feat_map[:, t.y1, t.x1].T * fx * fy
    )
    values[~t.inside] = 0.0
    return values, t.inside


def bilinear_sample(feat_map: np.ndarray, pixel) -> Tuple[np.ndarray, bool]:
    """One pixel; outside [0, W-1] x [0, H-1] returns zeros and ``False``."""
    values, inside = bilinear_sample_many(feat_map, np.asarray(pixel, dtype=np.float64).reshape(1, 2))
    return values[0], bool(inside[0])


class ViewSamples(NamedTuple):
    features: np.ndarray  # (N, S, C)
    mask: np.ndarray  # (N, S)
    pixels: np.ndarray  # (N, S, 2)


def sample_view_features(points: np.ndarray, feat_maps: np.ndarray, rig: CameraRig) -> ViewSamples:
    feat_maps = np.asarray(feat_maps, dtype=np.float64)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if feat_maps.ndim != 4 or feat_maps.shape[0] != len(rig):
        raise ShapeError(f"Need one (C, H, W) map per camera, got {feat_maps.shape} for {len(rig)} cameras")
    n_views, channels = feat_maps.shape[:2]
    features = np.zeros((n_views, len(points), channels))
    mask = np.zeros((n_views, len(points)), dtype=bool)
    pixels = np.zeros((n_views, len(points), 2))
    for n, cam in enumerate(rig):
        pix, _, in_front = cam.project_points(points)
        values, inside = bilinear_sample_many(feat_maps[n], np.where(in_front[:, None], pix, -1.0))
        visible = inside & in_front
        features[n] = np.where(visible[:, None], values, 0.0)
        mask[n] = visible
        pixels[n] = pix
    return ViewSamples(features, mask, pixels)


def aggregate(weights: np.ndarray, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if features.ndim != 3 or weights.shape != features.shape[:2] or mask.shape != weights.shape:
        raise ShapeError(f"Weights {weights.shape}, features {features.shape} and mask {mask.shape} disagree")
    return np.einsum("ns,nsc->c", np.where(mask, weights, 0.0), features)


class AnchorSample(NamedTuple):
    value: np.ndarray  # (C,)
    weights: np.ndarray  # (N, S)
    samples: ViewSamples


def anchor_feature(instance_feature, center, heads: KeypointHeads, feat_maps, rig: CameraRig) -> AnchorSample:
    points = sample_points(gen_keypoints(instance_feature, heads), center)
    samples = sample_view_features(points, feat_maps, rig)
    weights = gen_weights(instance_feature, heads)
    return AnchorSample(aggregate(weights, samples.features, samples.mask), weights, samples)


def anchor_feature_backward(sample: AnchorSample, grad_value: np.ndarray, map_shape) -> np.ndarray:
    """Gradient of ``<grad_value, sample.value>`` w.r.t. the (N, C, H, W) feature maps."""
    grad = np.zeros(map_shape)
    _, _, height, width = map_shape
    grad_value = np.asarray(grad_value, dtype=np.float64)
    for n in range(map_shape[0]):
        t = _taps(sample.samples.pixels[n], height, width)
        scale = np.where(sample.samples.mask[n], sample.weights[n], 0.0)
        for ys, xs, tap in (
            (t.y0, t.x0, (1 - t.fx) * (1 - t.fy)),
            (t.y0, t.x1, t.fx * (1 - t.fy)),
            (t.y1, t.x0, (1 - t.fx) * t.fy),
            (t.y1, t.x1, t.fx * t.fy),
        ):
            contrib = (scale * tap)[:, None] * grad_value[None, :]
            for c in range(map_shape[1]):
                np.add.at(grad[n, c], (ys, xs), contrib[:, c])
    return grad


def distill_features(
    instance_features: np.ndarray, centers: np.ndarray, heads: KeypointHeads, feat_maps, rig: CameraRig
) -> List[AnchorSample]:
    return [anchor_feature(f, c, heads, feat_maps, rig) for f, c in zip(instance_features, centers)]


def viewpoint_distillation(
    instance_features: np.ndarray,
    centers: np.ndarray,
    confidences: Sequence[float],
    heads: KeypointHeads,
    original_maps,
    original_rig: CameraRig,
    novel_maps,
    novel_rig: CameraRig,
    novel_pass: bool,
    tau: float = DEFAULT_TAU,
) -> Tuple[DistillTerm, List[AnchorSample], List[AnchorSample]]:
    """Distillation term between novel-view and original-view anchor features.

    Only defined for passes that consumed a novel view.
    """
    if not novel_pass:
        raise ProtocolError("Viewpoint distillation applies only to novel-view passes")
    original = distill_features(instance_features, centers, heads, original_maps, original_rig)
    novel = distill_features(instance_features, centers, heads, novel_maps, novel_rig)
    dim = np.asarray(original_maps).shape[1]
    s_orig = np.array([a.value for a in original]).reshape(-1, dim)
    s_novel = np.array([a.value for a in novel]).reshape(-1, dim)
    term = distill_loss(s_novel, s_orig, confidences, tau)
    return term, original, novel
