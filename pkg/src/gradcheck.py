"""Central finite-difference check of ``rasterize_backward``.

The check runs on the dense reference path with no early termination, where the
rendered image is a smooth function of every parameter. Each scalar parameter is
nudged by ``h = step * max(1, |p|)`` in both directions and the loss
``sum(upstream * color)`` is differenced.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple

import numpy as np

from src.gaussians import SH_C0, GaussianSet, sh_basis_count
from src.geometry import Camera, CameraExtrinsics, CameraIntrinsics
from src.rasterizer import RenderSettings, rasterize_backward, rasterize_reference_with_cache

logger = logging.getLogger(__name__)

GROUPS = ("mu", "s", "r", "alpha", "sh")
FIELDS = {"mu": "means", "s": "scales", "r": "rotations", "alpha": "opacities", "sh": "sh"}
DEFAULT_TOLERANCE = 1e-3
DEFAULT_STEP = 1e-4
FLOOR_FRACTION = 1e-3


class GradRow(NamedTuple):
    group: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckResult:
    rows: List[GradRow]
    tolerance: float

    def group_rows(self, group: str) -> List[GradRow]:
        return [r for r in self.rows if r.group == group]

    def group_max(self) -> Dict[str, float]:
        return {g: max((r.rel_err for r in self.group_rows(g)), default=0.0) for g in GROUPS}

    def group_passed(self) -> Dict[str, bool]:
        return {g: err <= self.tolerance for g, err in self.group_max().items()}

    @property
    def passed(self) -> bool:
        return all(self.group_passed().values())

    def worst(self) -> GradRow:
        return max(self.rows, key=lambda r: r.rel_err)


def gradcheck_camera(image_size: int = 16) -> Camera:
    focal = 1.2 * image_size
    center = (image_size - 1) / 2.0
    intrinsics = CameraIntrinsics(focal, focal, center, center, image_size, image_size)
    return Camera(intrinsics, CameraExtrinsics(np.eye(3), np.zeros(3)))


def random_scene(n_gaussians: int, seed: int, sh_degree: int = 1) -> GaussianSet:
    """Primitives in front of the gradcheck camera with colours away from the clamp."""
    rng = np.random.default_rng(seed)
    means = np.column_stack(
        [rng.uniform(-0.6, 0.6, n_gaussians), rng.uniform(-0.6, 0.6, n_gaussians), rng.uniform(3.0, 5.0, n_gaussians)]
    )
    scales = rng.uniform(0.15, 0.4, size=(n_gaussians, 3))
    rotations = rng.normal(size=(n_gaussians, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = rng.uniform(0.3, 0.8, n_gaussians)
    sh = rng.normal(0.0, 0.05, size=(n_gaussians, sh_basis_count(sh_degree), 3))
    sh[:, 0, :] = rng.uniform(0.3, 0.7, size=(n_gaussians, 3)) / SH_C0
    return GaussianSet(means, scales, rotations, opacities, sh)


def _loss(gaussians: GaussianSet, cam: Camera, upstream: np.ndarray, settings: RenderSettings) -> float:
    target, _ = rasterize_reference_with_cache(gaussians, cam, settings=settings)
    return float(np.sum(upstream * target.color))


def _with_entry(gaussians: GaussianSet, attr: str, index: tuple, value: float) -> GaussianSet:
    array = np.array(getattr(gaussians, attr))
    array[index] = value
    return gaussians.replace(**{attr: array})


def numeric_gradient(
    gaussians: GaussianSet, cam: Camera, upstream: np.ndarray, attr: str, index: tuple, settings: RenderSettings, step: float
) -> float:
    p = float(getattr(gaussians, attr)[index])
    h = step * max(1.0, abs(p))
    plus = _loss(_with_entry(gaussians, attr, index, p + h), cam, upstream, settings)
    minus = _loss(_with_entry(gaussians, attr, index, p - h), cam, upstream, settings)
    return (plus - minus) / (2.0 * h)


def run_gradcheck(
    n_gaussians: int = 8,
    seed: int = 0,
    image_size: int = 16,
    tolerance: float = DEFAULT_TOLERANCE,
    perturb_analytic: float = 0.0,
    step: float = DEFAULT_STEP,
) -> GradcheckResult:
    """Compares analytic and numeric gradients for every parameter of every primitive.

    ``perturb_analytic`` scales the analytic gradients by ``1 + perturb_analytic``
    before comparison; a nonzero value must make the check fail.
    """
    gaussians = random_scene(n_gaussians, seed)
    cam = gradcheck_camera(image_size)
    settings = RenderSettings(extent_sigma=None)  # smooth support for finite differences
    upstream = np.random.default_rng(seed + 1).normal(size=(image_size, image_size, 3))

    _, cache = rasterize_reference_with_cache(gaussians, cam, settings=settings)
    analytic = rasterize_backward(gaussians, cam, upstream, cache).groups()

    rows = []
    for group in GROUPS:
        attr = FIELDS[group]
        values = analytic[group] * (1.0 + perturb_analytic)
        numeric = np.zeros_like(values)
        for index in np.ndindex(values.shape):
            numeric[index] = numeric_gradient(gaussians, cam, upstream, attr, index, settings, step)
        floor = FLOOR_FRACTION * max(float(np.max(np.abs(numeric))), 1e-12)
        for index in np.ndindex(values.shape):
            a, n = float(values[index]), float(numeric[index])
            rel = abs(a - n) / max(abs(a), abs(n), floor)
            rows.append(GradRow(group, index, a, n, rel))
    result = GradcheckResult(rows, tolerance)
    for group, err in result.group_max().items():
        logger.info(f"gradcheck {group}: max relative error {err:.2e}")
    return result
