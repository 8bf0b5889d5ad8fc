"""Lift / render / synthesize loop shared by the losses, the benchmark and training."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from src.features import extract_batch
from src.gaussians import AnalyticHead, GaussianSet, ParamHead, concat, lift_pixels
from src.geometry import CameraRig, RigDelta
from src.losses import LAMBDA_PERCEPTUAL, PerceptualMetric, mean_recon
from src.rasterizer import RenderSettings, RenderTarget, rasterize, rasterize_reference

logger = logging.getLogger(__name__)

HISTORY_DEPTH_TOLERANCE = 0.1


def render_rig(
    gaussians: GaussianSet, rig: CameraRig, settings: Optional[RenderSettings] = None, reference: bool = False
) -> List[RenderTarget]:
    render = rasterize_reference if reference else rasterize
    return [render(gaussians, cam, settings=settings) for cam in rig]


def views_from_images(images: np.ndarray, depth: np.ndarray, background) -> List[RenderTarget]:
    """Wraps input images as fully opaque render targets."""
    images = np.asarray(images, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    return [RenderTarget(img.copy(), np.ones(img.shape[:2]), d.copy(), bg) for img, d in zip(images, depth)]


def choose_view(rng: np.random.Generator, p_novel: float) -> bool:
    """Per-step coin flip: True means the perception branch consumes a novel view."""
    return bool(rng.random() < p_novel)


def history_support(
    history: GaussianSet, rig: CameraRig, depth: np.ndarray, tolerance: float = HISTORY_DEPTH_TOLERANCE
) -> GaussianSet:
    """Primitives lifted from an earlier frame that the current views do not contradict.

    A primitive is dropped when some current camera sees it at a depth more than
    ``tolerance`` (relative) away from that camera's depth map; primitives outside
    every current view are kept. The survivors fill regions a perturbed rig sees
    but the current frame does not.
    """
    depth = np.asarray(depth, dtype=np.float64)
    contradicted = np.zeros(len(history), dtype=bool)
    for n, cam in enumerate(rig):
        pix, z, in_front = cam.project_points(history.means)
        u = np.rint(pix[:, 0]).astype(np.int64)
        v = np.rint(pix[:, 1]).astype(np.int64)
        inside = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        seen = depth[n][v[inside], u[inside]]
        contradicted[np.nonzero(inside)[0]] |= np.abs(z[inside] - seen) > tolerance * seen
    kept = history.take(~contradicted)
    logger.debug(f"History support keeps {len(kept)} of {len(history)} primitives")
    return kept


@dataclass
class ReconstructionPipeline:
    head: ParamHead = field(default_factory=AnalyticHead)
    extractor: Callable[[np.ndarray], np.ndarray] = extract_batch
    settings: RenderSettings = field(default_factory=RenderSettings)
    reference: bool = False
    lambda_p: float = LAMBDA_PERCEPTUAL
    metric: Optional[PerceptualMetric] = None

    def features(self, images: np.ndarray) -> np.ndarray:
        return self.extractor(np.asarray(images, dtype=np.float64))

    def lift(self, images: np.ndarray, depth: np.ndarray, rig: CameraRig) -> GaussianSet:
        return lift_pixels(depth, self.features(images), rig, self.head)

    def render(self, gaussians: GaussianSet, rig: CameraRig) -> List[RenderTarget]:
        return render_rig(gaussians, rig, self.settings, self.reference)

    def recon(self, renders, images) -> float:
        return mean_recon(renders, list(images), self.lambda_p, self.metric)

    def synthesize(
        self,
        gaussians: GaussianSet,
        images: np.ndarray,
        depth: np.ndarray,
        rig: CameraRig,
        delta: RigDelta,
        support: Optional[GaussianSet] = None,
    ) -> List[RenderTarget]:
        """Novel views at ``rig.perturbed(delta)``; a zero delta returns the input views.

        ``support`` (see ``history_support``) is rendered together with ``gaussians``.
        """
        if delta.is_zero():
            return views_from_images(images, depth, self.settings.background)
        if support is not None and len(support):
            gaussians = concat([gaussians, support])
        return self.render(gaussians, rig.perturbed(delta))

    def self_recon_loss(self, images: np.ndarray, depth: np.ndarray, rig: CameraRig) -> float:
        return self.recon(self.render(self.lift(images, depth, rig), rig), images)
