"""Training objectives: rendering, reconstruction, depth, distillation and the weighted total."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import convolve2d, correlate2d

from src.config import WEIGHT_KEYS
from src.errors import ConfigError, DegenerateInputError, ProtocolError, ShapeError, SizeError

logger = logging.getLogger(__name__)

LAMBDA_PERCEPTUAL = 0.2
DEFAULT_TAU = 0.3


def _check_pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"Shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def render_l2(pred, target) -> float:
    """Mean squared error over every pixel and channel."""
    pred, target = _check_pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def render_l2_grad(pred, target) -> np.ndarray:
    pred, target = _check_pair(pred, target)
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------------------
# Perceptual metrics
# ---------------------------------------------------------------------------


class PerceptualMetric(ABC):
    @abstractmethod
    def __call__(self, pred: np.ndarray, target: np.ndarray) -> float:
        """Distance in [0, inf), zero for identical images."""

    @abstractmethod
    def gradient(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        """d metric / d pred, treating ``target`` as constant."""


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


@dataclass
class SSIMMetric(PerceptualMetric):
    """(1 - SSIM) / 2 with the SSIM map clamped to [0, 1]; 'valid' windows only."""

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    window: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.window = gaussian_window(self.window_size, self.sigma)

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def _channels(self, pred, target):
        pred, target = _check_pair(pred, target)
        if pred.ndim == 2:
            pred, target = pred[..., None], target[..., None]
        if pred.ndim != 3:
            raise ShapeError(f"Expected (H, W) or (H, W, C) images, got {pred.shape}")
        if pred.shape[0] < self.window_size or pred.shape[1] < self.window_size:
            raise SizeError(
                f"Image {pred.shape[0]}x{pred.shape[1]} is smaller than the {self.window_size}x{self.window_size} window"
            )
        return pred, target

    def _stats(self, x, y):
        w = self.window
        mu_x = correlate2d(x, w, mode="valid")
        mu_y = correlate2d(y, w, mode="valid")
        m_xx = correlate2d(x * x, w, mode="valid")
        m_yy = correlate2d(y * y, w, mode="valid")
        m_xy = correlate2d(x * y, w, mode="valid")
        a1 = 2.0 * mu_x * mu_y + self.c1
        a2 = 2.0 * (m_xy - mu_x * mu_y) + self.c2
        b1 = mu_x * mu_x + mu_y * mu_y + self.c1
        b2 = (m_xx - mu_x * mu_x) + (m_yy - mu_y * mu_y) + self.c2
        return mu_x, mu_y, a1, a2, b1, b2

    def ssim_map(self, pred, target) -> np.ndarray:
        pred, target = self._channels(pred, target)
        maps = []
        for ch in range(pred.shape[2]):
            _, _, a1, a2, b1, b2 = self._stats(pred[..., ch], target[..., ch])
            maps.append(np.clip(a1 * a2 / (b1 * b2), 0.0, 1.0))
        return np.stack(maps, axis=-1)

    def __call__(self, pred, target) -> float:
        return float(0.5 * (1.0 - np.mean(self.ssim_map(pred, target))))

    def gradient(self, pred, target) -> np.ndarray:
        squeeze = np.asarray(pred).ndim == 2
        pred, target = self._channels(pred, target)
        grad = np.zeros_like(pred)
        w = self.window
        for ch in range(pred.shape[2]):
            x, y = pred[..., ch], target[..., ch]
            mu_x, mu_y, a1, a2, b1, b2 = self._stats(x, y)
            s = a1 * a2 / (b1 * b2)
            # d loss / d S for the clamped mean over all channels
            d_s = np.where((s >= 0.0) & (s <= 1.0), -0.5 / (s.size * pred.shape[2]), 0.0)
            d_m1 = (2.0 * mu_y * a2 - 2.0 * mu_y * a1) / (b1 * b2) - s * (2.0 * mu_x / b1 - 2.0 * mu_x / b2)
            d_m2 = -s / b2
            d_m3 = 2.0 * a1 / (b1 * b2)
            grad[..., ch] = (
                convolve2d(d_s * d_m1, w, mode="full")
                + 2.0 * x * convolve2d(d_s * d_m2, w, mode="full")
                + y * convolve2d(d_s * d_m3, w, mode="full")
            )
        return grad[..., 0] if squeeze else grad


DEFAULT_METRIC = SSIMMetric()


def perceptual(pred, target, metric: Optional[PerceptualMetric] = None) -> float:
    return (metric or DEFAULT_METRIC)(pred, target)


def recon_term(pred, target, lambda_p: float = LAMBDA_PERCEPTUAL, metric: Optional[PerceptualMetric] = None) -> float:
    """render_l2 + lambda_p * perceptual, the image term shared by the reconstruction losses."""
    value = render_l2(pred, target)
    if lambda_p:
        value += lambda_p * perceptual(pred, target, metric)
    return value


def recon_term_grad(pred, target, lambda_p: float = LAMBDA_PERCEPTUAL, metric: Optional[PerceptualMetric] = None):
    grad = render_l2_grad(pred, target)
    if lambda_p:
        grad = grad + lambda_p * (metric or DEFAULT_METRIC).gradient(pred, target)
    return grad


def mean_recon(renders: Sequence, targets: Sequence, lambda_p: float = LAMBDA_PERCEPTUAL, metric=None) -> float:
    """Average reconstruction term over paired renders (RenderTarget or arrays) and target images."""
    if len(renders) != len(targets) or not len(renders):
        raise ShapeError(f"Got {len(renders)} renders for {len(targets)} target images")
    values = [recon_term(getattr(r, "color", r), t, lambda_p, metric) for r, t in zip(renders, targets)]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Reconstruction losses
# ---------------------------------------------------------------------------


def original_recon_loss(
    gaussians_t,
    frames_adjacent: Sequence,
    rigs_adjacent: Sequence,
    pipeline,
) -> float:
    """Renders frame-t primitives into the rigs of frames t-1 and t+1 and compares
    against those frames' images."""
    if not frames_adjacent or len(frames_adjacent) != len(rigs_adjacent) or any(f is None for f in frames_adjacent):
        raise ProtocolError("Original reconstruction needs the images and rig of every adjacent frame")
    values = []
    for images, rig in zip(frames_adjacent, rigs_adjacent):
        if rig is None:
            raise ProtocolError("Adjacent frame has no rig pose")
        values.append(pipeline.recon(pipeline.render(gaussians_t, rig), images))
    return float(np.mean(values))


def cyclic_recon_loss(novel_images, novel_rig, original_rig, original_images, pipeline, novel_depth=None) -> float:
    """Re-lifts synthesized novel views and renders them back into the original rig.

    ``novel_images`` are RenderTargets (their depth channel drives the re-lift) or
    colour arrays accompanied by ``novel_depth``.
    """
    colors, depth = _split_views(novel_images, novel_depth)
    relifted = pipeline.lift(colors, depth, novel_rig)
    return pipeline.recon(pipeline.render(relifted, original_rig), original_images)


def _split_views(views, depth=None) -> Tuple[np.ndarray, np.ndarray]:
    if depth is None:
        if not all(hasattr(v, "depth") for v in views):
            raise ProtocolError("Novel views need a depth channel to be re-lifted")
        return np.stack([v.color for v in views]), np.stack([v.depth for v in views])
    return np.stack([getattr(v, "color", v) for v in views]), np.asarray(depth, dtype=np.float64)


def depth_l1(pred, target, valid_mask=None) -> float:
    pred, target = _check_pair(pred, target)
    mask = np.ones(pred.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ShapeError(f"Mask shape {mask.shape} does not match depth maps {pred.shape}")
    if not mask.any():
        raise DegenerateInputError("Depth L1 mask selects no pixel")
    return float(np.mean(np.abs(pred[mask] - target[mask])))


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


class DistillTerm(NamedTuple):
    value: float
    grad_novel: np.ndarray
    grad_orig: np.ndarray  # always zero: the original branch is detached
    selected: np.ndarray  # boolean mask of anchors with confidence > tau
    empty: bool


def distill_loss(s_novel, s_orig, confidences, tau: float = DEFAULT_TAU) -> DistillTerm:
    """Mean squared distance between novel-view and detached original-view anchor
    features over anchors whose confidence exceeds ``tau``."""
    s_novel = np.atleast_2d(np.asarray(s_novel, dtype=np.float64))
    s_orig = np.atleast_2d(np.asarray(s_orig, dtype=np.float64))
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if s_novel.shape != s_orig.shape:
        raise ShapeError(f"Anchor features disagree: {s_novel.shape} vs {s_orig.shape}")
    if confidences.shape[0] != s_novel.shape[0]:
        raise ShapeError(f"{confidences.shape[0]} confidences for {s_novel.shape[0]} anchors")
    selected = confidences > tau
    grad_novel = np.zeros_like(s_novel)
    grad_orig = np.zeros_like(s_orig)
    count = int(selected.sum())
    if count == 0:
        logger.debug(f"No anchor above confidence {tau}; distillation term is zero")
        return DistillTerm(0.0, grad_novel, grad_orig, selected, True)
    diff = s_novel[selected] - s_orig[selected]
    value = float(np.sum(diff**2) / count)
    grad_novel[selected] = 2.0 * diff / count
    return DistillTerm(value, grad_novel, grad_orig, selected, False)


# ---------------------------------------------------------------------------
# Weighted total
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    terms: Dict[str, float]
    weights: Dict[str, float]
    total: float
    flags: Tuple[str, ...] = ()

    def as_dict(self) -> Dict[str, float]:
        row = dict(self.terms)
        row["total"] = self.total
        return row


def total_loss(terms: Mapping[str, float], weights: Mapping[str, float], flags: Sequence[str] = ()) -> LossReport:
    """Weighted sum of the named terms. Terms without an entry (det, map, motion,
    plan by default) count as 0; weights without an entry count as 1."""
    for name in list(terms) + list(weights):
        if name not in WEIGHT_KEYS:
            raise ConfigError(f"Unknown loss term '{name}'", key=f"losses.{name}")
    resolved_weights = {}
    for name in WEIGHT_KEYS:
        weight = float(weights.get(name, 1.0))
        if weight < 0:
            raise ConfigError(f"Loss weight '{name}' must be >= 0, got {weight}", key=f"losses.{name}")
        resolved_weights[name] = weight
    resolved_terms = {}
    for name in WEIGHT_KEYS:
        value = float(terms.get(name, 0.0))
        if not value >= 0:
            raise DegenerateInputError(f"Loss term '{name}' must be >= 0, got {value}")
        resolved_terms[name] = value
    total = float(sum(resolved_weights[n] * resolved_terms[n] for n in WEIGHT_KEYS))
    return LossReport(resolved_terms, resolved_weights, total, tuple(flags))
