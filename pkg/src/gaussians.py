"""Gaussian primitives, activation heads and pixel-wise lifting.

A ``GaussianSet`` is stored struct-of-arrays: ``means`` (G, 3), ``scales`` (G, 3),
``rotations`` (G, 4) as (w, x, y, z) quaternions, ``opacities`` (G,), ``sh``
(G, (k+1)^2, 3) and per-primitive provenance ``(camera, u, v)``. Rotations are
normalised wherever they are used, so a slightly denormalised quaternion (as
produced by finite differences) is still a valid input.
"""

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit, logit

from src.errors import DegenerateInputError, FormatError, InvalidDepthError, InvalidRotationError, ShapeError

logger = logging.getLogger(__name__)

# Real spherical-harmonics constants (graphics sign convention)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3

GAUSSIAN_MAGIC = b"GSP1"
GAUSSIAN_VERSION = 1
HEADER = struct.Struct("<4sIII")


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_of(n_basis: int) -> int:
    for degree in range(MAX_SH_DEGREE + 1):
        if sh_basis_count(degree) == n_basis:
            return degree
    raise ShapeError(f"{n_basis} SH coefficients per channel do not form a degree 0..{MAX_SH_DEGREE} basis")


def _readonly(array, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------


def quaternion_to_matrix(quats: np.ndarray) -> np.ndarray:
    """(..., 4) wxyz quaternions to (..., 3, 3) rotation matrices; normalises first."""
    quats = np.asarray(quats, dtype=np.float64)
    flat = quats.reshape(-1, 4)
    if flat.shape[0] == 0:
        return np.zeros(quats.shape[:-1] + (3, 3))
    if np.any(np.linalg.norm(flat, axis=1) == 0):
        raise InvalidRotationError("Zero-norm quaternion")
    matrices = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return matrices.reshape(quats.shape[:-1] + (3, 3))


def covariance_from(scale, rot) -> np.ndarray:
    """Sigma = R diag(s^2) R^T for one primitive."""
    scale = np.asarray(scale, dtype=np.float64).reshape(3)
    if np.any(scale <= 0):
        raise DegenerateInputError(f"Scale must be strictly positive, got {scale}")
    rotation = quaternion_to_matrix(np.asarray(rot, dtype=np.float64).reshape(4))
    cov = (rotation * scale**2) @ rotation.T
    return 0.5 * (cov + cov.T)


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    mats = quaternion_to_matrix(rotations)
    cov = np.einsum("gij,gj,gkj->gik", mats, np.asarray(scales) ** 2, mats)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


# ---------------------------------------------------------------------------
# Primitive containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray
    camera: int = -1
    pixel: tuple = (-1, -1)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.scale, self.rot)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    cameras: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        means = _readonly(self.means).reshape(-1, 3)
        count = means.shape[0]
        scales = _readonly(self.scales).reshape(count, 3)
        rotations = _readonly(self.rotations).reshape(count, 4)
        opacities = _readonly(self.opacities).reshape(count)
        sh = _readonly(self.sh)
        if sh.ndim != 3 or sh.shape[0] != count or sh.shape[2] != 3:
            raise ShapeError(f"SH coefficients must have shape ({count}, n_basis, 3), got {sh.shape}")
        sh_degree_of(sh.shape[1])
        if np.any(scales <= 0):
            raise DegenerateInputError("Gaussian scales must be strictly positive")
        if np.any((opacities < 0) | (opacities > 1)):
            raise DegenerateInputError("Gaussian opacities must lie in [0, 1]")
        if count and np.any(np.linalg.norm(rotations, axis=1) == 0):
            raise InvalidRotationError("Zero-norm quaternion in GaussianSet")
        cameras = np.full(count, -1) if self.cameras is None else self.cameras
        pixels = np.full((count, 2), -1) if self.pixels is None else self.pixels
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "opacities", opacities)
        object.__setattr__(self, "sh", sh)
        object.__setattr__(self, "cameras", _readonly(cameras, np.int64).reshape(count))
        object.__setattr__(self, "pixels", _readonly(pixels, np.int64).reshape(count, 2))

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.means[index],
            scale=self.scales[index],
            rot=self.rotations[index],
            opacity=float(self.opacities[index]),
            sh_coeffs=self.sh[index],
            camera=int(self.cameras[index]),
            pixel=(int(self.pixels[index, 0]), int(self.pixels[index, 1])),
        )

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianSet":
        n_basis = sh_basis_count(sh_degree)
        return cls(np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, n_basis, 3)))

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if not primitives:
            return cls.empty()
        return cls(
            np.stack([p.mu for p in primitives]),
            np.stack([p.scale for p in primitives]),
            np.stack([p.rot for p in primitives]),
            np.array([p.opacity for p in primitives]),
            np.stack([p.sh_coeffs for p in primitives]),
            np.array([p.camera for p in primitives]),
            np.array([p.pixel for p in primitives]),
        )

    def replace(self, **changes) -> "GaussianSet":
        return replace(self, **changes)

    def take(self, index) -> "GaussianSet":
        """Subset by boolean mask or index array, preserving order."""
        return GaussianSet(
            self.means[index],
            self.scales[index],
            self.rotations[index],
            self.opacities[index],
            self.sh[index],
            self.cameras[index],
            self.pixels[index],
        )

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)

    def to_bytes(self) -> bytes:
        count = len(self)
        records = np.concatenate(
            [
                self.means,
                self.scales,
                self.rotations,
                self.opacities[:, None],
                self.sh.reshape(count, -1),
            ],
            axis=1,
        )
        return HEADER.pack(GAUSSIAN_MAGIC, GAUSSIAN_VERSION, count, self.sh_degree) + records.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GaussianSet":
        if len(data) < HEADER.size:
            raise FormatError("Truncated GaussianSet header")
        magic, version, count, degree = HEADER.unpack_from(data)
        if magic != GAUSSIAN_MAGIC:
            raise FormatError(f"Bad GaussianSet magic {magic!r}")
        if version != GAUSSIAN_VERSION:
            raise FormatError(f"Unsupported GaussianSet version {version}")
        if degree > MAX_SH_DEGREE:
            raise FormatError(f"SH degree {degree} out of range")
        n_basis = sh_basis_count(degree)
        width = 11 + 3 * n_basis
        body = np.frombuffer(data, dtype="<f4", offset=HEADER.size)
        if body.size != count * width:
            raise FormatError(f"Expected {count * width} floats, found {body.size}")
        records = body.reshape(count, width).astype(np.float64)
        return cls(
            records[:, 0:3],
            records[:, 3:6],
            records[:, 6:10],
            records[:, 10],
            records[:, 11:].reshape(count, n_basis, 3),
        )


def save_gaussians(gaussians: GaussianSet, path: str):
    with open(path, "wb") as f:
        f.write(gaussians.to_bytes())


def load_gaussians(path: str) -> GaussianSet:
    with open(path, "rb") as f:
        return GaussianSet.from_bytes(f.read())


def concat(sets: Sequence[GaussianSet]) -> GaussianSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return GaussianSet.empty()
    return GaussianSet(
        np.concatenate([s.means for s in sets]),
        np.concatenate([s.scales for s in sets]),
        np.concatenate([s.rotations for s in sets]),
        np.concatenate([s.opacities for s in sets]),
        np.concatenate([s.sh for s in sets]),
        np.concatenate([s.cameras for s in sets]),
        np.concatenate([s.pixels for s in sets]),
    )


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (G, (degree+1)^2) for unit directions (G, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        cols += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of each basis function w.r.t. the direction, (G, n_basis, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -SH_C1 + zero, zero), (zero, zero, SH_C1 + zero), (-SH_C1 + zero, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def eval_sh(sh_coeffs, view_direction, clamp: bool = True) -> np.ndarray:
    """Evaluates SH colour. Accepts one primitive ((n_basis, 3) or flat 3*n_basis)
    with one direction, or batches (G, n_basis, 3) with (G, 3) directions."""
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    dirs = np.asarray(view_direction, dtype=np.float64)
    single = dirs.ndim == 1
    if single:
        if coeffs.ndim == 1:
            if coeffs.size % 3:
                raise ShapeError(f"Coefficient count {coeffs.size} is not a multiple of 3")
            coeffs = coeffs.reshape(-1, 3)
        coeffs = coeffs[None]
        dirs = dirs[None]
    if coeffs.ndim != 3 or coeffs.shape[2] != 3 or coeffs.shape[0] != dirs.shape[0]:
        raise ShapeError(f"SH coefficients {coeffs.shape} do not match directions {dirs.shape}")
    degree = sh_degree_of(coeffs.shape[1])
    rgb = np.einsum("gb,gbc->gc", sh_basis(dirs, degree), coeffs)
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb[0] if single else rgb


# ---------------------------------------------------------------------------
# Activations and heads
# ---------------------------------------------------------------------------


class RawParams(NamedTuple):
    scale: np.ndarray  # (P, 3)
    rotation: np.ndarray  # (P, 4)
    opacity: np.ndarray  # (P,)
    sh: np.ndarray  # (P, n_basis, 3)


class ActivatedParams(NamedTuple):
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    quaternion_fallbacks: int


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def activate_params(raw: RawParams) -> ActivatedParams:
    """softplus scales, unit quaternions, logistic opacity, pass-through colour.

    An all-zero rotation head falls back to the identity quaternion; the number of
    fallbacks is reported rather than raised.
    """
    scales = softplus(np.asarray(raw.scale, dtype=np.float64))
    rotation = np.asarray(raw.rotation, dtype=np.float64)
    norms = np.linalg.norm(rotation, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    identity = np.zeros_like(rotation)
    identity[..., 0] = 1.0
    rotations = np.where(zero[..., None], identity, rotation / np.where(norms == 0, 1.0, norms))
    fallbacks = int(np.count_nonzero(zero))
    if fallbacks:
        logger.warning(f"{fallbacks} zero-norm rotation heads replaced by the identity quaternion")
    opacities = expit(np.asarray(raw.opacity, dtype=np.float64))
    return ActivatedParams(scales, rotations, opacities, np.asarray(raw.sh, dtype=np.float64), fallbacks)


def activation_backward(raw: RawParams, grad_scales, grad_rotations, grad_opacities, grad_sh) -> RawParams:
    """Pulls gradients w.r.t. activated parameters back onto the raw heads."""
    grad_scale = grad_scales * expit(raw.scale)
    norms = np.linalg.norm(raw.rotation, axis=-1, keepdims=True)
    safe = np.where(norms == 0, 1.0, norms)
    unit = raw.rotation / safe
    radial = np.sum(grad_rotations * unit, axis=-1, keepdims=True)
    grad_rotation = np.where(norms == 0, 0.0, (grad_rotations - radial * unit) / safe)
    alpha = expit(raw.opacity)
    grad_opacity = grad_opacities * alpha * (1.0 - alpha)
    return RawParams(grad_scale, grad_rotation, grad_opacity, grad_sh)


class ParamHead(ABC):
    """Maps per-pixel features and depth to raw Gaussian parameter heads."""

    sh_degree: int

    @abstractmethod
    def predict(self, features: np.ndarray, depth: np.ndarray, pixel_size: np.ndarray) -> RawParams:
        """features (P, C), depth (P,), pixel_size (P,) world meters per pixel."""

    def __call__(self, features, depth, pixel_size) -> RawParams:
        return self.predict(features, depth, pixel_size)


@dataclass
class AnalyticHead(ParamHead):
    """Closed-form head: isotropic scale ``footprint * pixel_size``, fixed opacity,
    band-0 colour from the first three feature channels, higher bands zero."""

    sh_degree: int = 1
    footprint: float = 0.3
    opacity: float = 0.9

    def predict(self, features, depth, pixel_size) -> RawParams:
        features = np.asarray(features, dtype=np.float64)
        count = features.shape[0]
        if features.shape[1] < 3:
            raise ShapeError("AnalyticHead needs at least three colour channels")
        scale = np.repeat((self.footprint * np.asarray(pixel_size, dtype=np.float64))[:, None], 3, axis=1)
        rotation = np.zeros((count, 4))
        rotation[:, 0] = 1.0
        sh = np.zeros((count, sh_basis_count(self.sh_degree), 3))
        sh[:, 0, :] = features[:, :3] / SH_C0
        return RawParams(inverse_softplus(scale), rotation, np.full(count, logit(self.opacity)), sh)


@dataclass
class LinearHead(ParamHead):
    """One affine map from [features, log depth, log pixel_size] to every raw head."""

    weight: np.ndarray
    bias: np.ndarray
    sh_degree: int = 1

    @staticmethod
    def output_dim(sh_degree: int) -> int:
        return 3 + 4 + 1 + 3 * sh_basis_count(sh_degree)

    @classmethod
    def initialise(
        cls, n_features: int, sh_degree: int, rng: np.random.Generator, std: float = 0.01, init_scale: float = 0.05
    ) -> "LinearHead":
        out_dim = cls.output_dim(sh_degree)
        weight = rng.normal(0.0, std, size=(n_features + 2, out_dim))
        bias = np.zeros(out_dim)
        bias[0:3] = inverse_softplus(init_scale)
        bias[3] = 1.0  # identity rotation
        bias[8:11] = 0.5 / SH_C0  # mid-grey band 0 keeps the colour clamp inactive
        return cls(weight, bias, sh_degree)

    @staticmethod
    def inputs(features, depth, pixel_size) -> np.ndarray:
        log_depth = np.log(np.asarray(depth, dtype=np.float64))[:, None]
        log_size = np.log(np.asarray(pixel_size, dtype=np.float64))[:, None]
        return np.concatenate([np.asarray(features, dtype=np.float64), log_depth, log_size], axis=1)

    def split(self, out: np.ndarray) -> RawParams:
        count = out.shape[0]
        return RawParams(out[:, 0:3], out[:, 3:7], out[:, 7], out[:, 8:].reshape(count, -1, 3))

    def predict(self, features, depth, pixel_size) -> RawParams:
        x = self.inputs(features, depth, pixel_size)
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"LinearHead expects {self.weight.shape[0] - 2} features, got {x.shape[1] - 2}")
        return self.split(x @ self.weight + self.bias)

    def backward(self, features, depth, pixel_size, grad: RawParams):
        """Returns (d_weight, d_bias) for a gradient on the raw heads."""
        x = self.inputs(features, depth, pixel_size)
        g = np.concatenate(
            [grad.scale, grad.rotation, np.asarray(grad.opacity)[:, None], grad.sh.reshape(grad.sh.shape[0], -1)],
            axis=1,
        )
        return x.T @ g, g.sum(axis=0)


# ---------------------------------------------------------------------------
# Lifting
# ---------------------------------------------------------------------------


class LiftInputs(NamedTuple):
    features: np.ndarray  # (P, C) in (camera, row, col) order
    depth: np.ndarray  # (P,)
    pixel_size: np.ndarray  # (P,)
    means: np.ndarray  # (P, 3)
    cameras: np.ndarray  # (P,)
    pixels: np.ndarray  # (P, 2) as (u, v)


def gather_lift_inputs(depth: np.ndarray, feats: np.ndarray, rig) -> LiftInputs:
    depth = np.asarray(depth, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if depth.ndim != 3 or feats.ndim != 4:
        raise ShapeError(f"Expected depth (N, H, W) and features (N, C, H, W), got {depth.shape}, {feats.shape}")
    n_views, height, width = depth.shape
    if feats.shape[0] != n_views or feats.shape[2:] != (height, width) or len(rig) != n_views:
        raise ShapeError(f"Depth {depth.shape}, features {feats.shape} and {len(rig)} cameras disagree")
    bad = ~(np.isfinite(depth) & (depth > 0))
    if np.any(bad):
        n, v, u = (int(i) for i in np.argwhere(bad)[0])
        raise InvalidDepthError(f"Nonpositive depth {depth[n, v, u]} at camera {n}, pixel ({u}, {v})", pixel=(n, u, v))

    vs, us = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.stack([us.reshape(-1), vs.reshape(-1)], axis=1).astype(np.float64)
    means, sizes = [], []
    for n, cam in enumerate(rig):
        if (cam.width, cam.height) != (width, height):
            raise ShapeError(f"Camera {n} is {cam.width}x{cam.height}, maps are {width}x{height}")
        d = depth[n].reshape(-1)
        means.append(cam.unproject_pixels(grid, d))
        sizes.append(cam.pixel_size(d))
    return LiftInputs(
        features=feats.transpose(0, 2, 3, 1).reshape(n_views * height * width, -1),
        depth=depth.reshape(-1),
        pixel_size=np.concatenate(sizes),
        means=np.concatenate(means),
        cameras=np.repeat(np.arange(n_views), height * width),
        pixels=np.tile(grid.astype(np.int64), (n_views, 1)),
    )


def lift_pixels(depth: np.ndarray, feats: np.ndarray, rig, head: ParamHead) -> GaussianSet:
    """One primitive per pixel in (camera, row, column) raster order."""
    inputs = gather_lift_inputs(depth, feats, rig)
    params = activate_params(head(inputs.features, inputs.depth, inputs.pixel_size))
    logger.debug(f"Lifted {len(inputs.depth)} primitives from {len(rig)} views")
    return GaussianSet(
        inputs.means,
        params.scales,
        params.rotations,
        params.opacities,
        params.sh,
        inputs.cameras,
        inputs.pixels,
    )
