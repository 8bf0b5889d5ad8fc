"""Differentiable splat renderer.

Two forward paths share one projection step:

* ``rasterize`` bins splats into 16x16 tiles and composites each tile in a numba
  kernel with early termination once transmittance drops below the cutoff;
* ``rasterize_reference`` composites every in-front splat for every pixel with
  dense numpy arrays and no termination. It is the oracle for the tile path.

Splats composite front to back in ascending (depth, index) order. A splat is
included at a pixel while the transmittance in front of it is at least the
cutoff, so an opaque splat still lands before compositing stops.

A splat's support is the ellipse ``q <= extent_sigma**2`` (3 sigma by default),
shrunk further where ``opacity * exp(-q / 2)`` would fall below the opacity
epsilon. Both paths apply the same support, so they agree pixel for pixel.
With ``extent_sigma=None`` the support is unbounded and the reference image is
a smooth function of every parameter, which is what the gradient checks use.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
from numba import njit
from PIL import Image

from src.errors import FormatError, ShapeError, UsageError
from src.gaussians import GaussianPrimitive, GaussianSet, quaternion_to_matrix, sh_basis, sh_basis_grad
from src.geometry import NEAR_PLANE, Camera

logger = logging.getLogger(__name__)

OPACITY_EPSILON = 1e-8
RAW_MAGIC = b"RIMG"
RAW_HEADER = struct.Struct("<4sIII")
REFERENCE_CHUNK = 1 << 20  # pixel x splat entries per dense block


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    cov_floor: float = 0.3
    transmittance_cutoff: float = 1e-6
    far_depth: float = 100.0
    background: Tuple[float, float, float] = (0.6, 0.75, 0.9)
    # Support radius in standard deviations; None keeps every in-front splat
    extent_sigma: Optional[float] = 3.0
    # Jacobian view-ray limit as a multiple of the half field of view; None is exact
    jacobian_clamp: Optional[float] = 1.3

    @classmethod
    def from_config(cls, cfg) -> "RenderSettings":
        return cls(
            cfg.tile_size,
            cfg.cov_floor,
            cfg.transmittance_cutoff,
            cfg.far_depth,
            tuple(cfg.background),
            cfg.extent_sigma if cfg.extent_sigma > 0 else None,
            cfg.jacobian_clamp if cfg.jacobian_clamp > 0 else None,
        )


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    rgb: np.ndarray


@dataclass
class RenderTarget:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.alpha.shape

    def to_uint8(self) -> np.ndarray:
        return (np.clip(self.color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    def save_png(self, path: str):
        Image.fromarray(self.to_uint8()).save(path)

    def save_raw(self, path: str):
        """float32 dump of [r, g, b, alpha, depth] per pixel."""
        stacked = np.concatenate([self.color, self.alpha[..., None], self.depth[..., None]], axis=-1)
        write_raw(stacked, path)


def write_raw(array: np.ndarray, path: str):
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise ShapeError(f"Raw images are (H, W) or (H, W, C), got {array.shape}")
    height, width, channels = array.shape
    with open(path, "wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, height, width, channels))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raw(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < RAW_HEADER.size:
        raise FormatError(f"{path}: truncated raw image header")
    magic, height, width, channels = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad raw image magic {magic!r}")
    body = np.frombuffer(data, dtype="<f4", offset=RAW_HEADER.size)
    if body.size != height * width * channels:
        raise FormatError(f"{path}: expected {height * width * channels} floats, found {body.size}")
    return body.reshape(height, width, channels).astype(np.float64)



# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


class ProjectedSplats(NamedTuple):
    """Valid splats in compositing order plus the intermediates the backward pass needs."""

    index: np.ndarray  # (K,) primitive index
    cam_points: np.ndarray  # (K, 3)
    jacobian: np.ndarray  # (K, 2, 3)
    rotation: np.ndarray  # (K, 3, 3) from normalised quaternions
    cov3d: np.ndarray  # (K, 3, 3)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3) as (a, b, c) of the inverse
    mean2d: np.ndarray  # (K, 2)
    depth: np.ndarray  # (K,)
    opacity: np.ndarray  # (K,)
    rgb: np.ndarray  # (K, 3) clamped
    rgb_raw: np.ndarray  # (K, 3) before clamping
    dirs: np.ndarray  # (K, 3) unit view directions
    dist: np.ndarray  # (K,) camera-centre distance
    basis: np.ndarray  # (K, n_basis)
    ratio: np.ndarray  # (K, 2) x/z and y/z after the Jacobian clamp
    free: np.ndarray  # (K, 2) 1.0 where the ratio was not clamped
    q_limit: np.ndarray  # (K,) support bound on the Mahalanobis term, inf when unbounded
    bbox: np.ndarray  # (K, 4) inclusive pixel bounds x0, x1, y0, y1 of the support


@njit(cache=False)
def _project_kernel(
    t, rot, scales, opacity, rotation_w, fx, fy, cx, cy, lim_x, lim_y, cov_floor, sigma_sq, bounded,
    jac, cov3d, cov2d, conic, mean2d, ratio, free, q_limit, bbox,
):
    n = t.shape[0]
    log_eps = math.log(1e-8)
    tw = np.empty((2, 3))
    m = np.empty((3, 3))
    for k in range(n):
        x = t[k, 0]
        y = t[k, 1]
        z = t[k, 2]
        rx = x / z
        ry = y / z
        free[k, 0] = 1.0
        free[k, 1] = 1.0
        if rx > lim_x:
            rx = lim_x
            free[k, 0] = 0.0
        elif rx < -lim_x:
            rx = -lim_x
            free[k, 0] = 0.0
        if ry > lim_y:
            ry = lim_y
            free[k, 1] = 0.0
        elif ry < -lim_y:
            ry = -lim_y
            free[k, 1] = 0.0
        ratio[k, 0] = rx
        ratio[k, 1] = ry
        jac[k, 0, 0] = fx / z
        jac[k, 0, 1] = 0.0
        jac[k, 0, 2] = -fx * rx / z
        jac[k, 1, 0] = 0.0
        jac[k, 1, 1] = fy / z
        jac[k, 1, 2] = -fy * ry / z

        for i in range(3):
            for j in range(3):
                m[i, j] = rot[k, i, j] * scales[k, j]
        for i in range(3):
            for j in range(3):
                cov3d[k, i, j] = m[i, 0] * m[j, 0] + m[i, 1] * m[j, 1] + m[i, 2] * m[j, 2]
        for i in range(2):
            for j in range(3):
                tw[i, j] = jac[k, i, 0] * rotation_w[0, j] + jac[k, i, 1] * rotation_w[1, j] + jac[k, i, 2] * rotation_w[2, j]
        # tw cov3d tw^T, symmetric by construction
        c00 = 0.0
        c01 = 0.0
        c11 = 0.0
        for i in range(3):
            for j in range(3):
                s = cov3d[k, i, j]
                c00 += tw[0, i] * s * tw[0, j]
                c01 += tw[0, i] * s * tw[1, j]
                c11 += tw[1, i] * s * tw[1, j]
        c00 += cov_floor
        c11 += cov_floor
        cov2d[k, 0, 0] = c00
        cov2d[k, 0, 1] = c01
        cov2d[k, 1, 0] = c01
        cov2d[k, 1, 1] = c11
        det = c00 * c11 - c01 * c01
        conic[k, 0] = c11 / det
        conic[k, 1] = -c01 / det
        conic[k, 2] = c00 / det
        mx = fx * x / z + cx
        my = fy * y / z + cy
        mean2d[k, 0] = mx
        mean2d[k, 1] = my

        a = opacity[k]
        fade = 2.0 * (math.log(a) - log_eps) if a > 0.0 else -1.0
        if a <= 1e-8:
            q_limit[k] = -1.0
            q_box = 0.0
        elif bounded:
            q_limit[k] = min(sigma_sq, fade)
            q_box = q_limit[k]
        else:
            q_limit[k] = np.inf
            q_box = fade
        ex = math.sqrt(q_box * c00)
        ey = math.sqrt(q_box * c11)
        bbox[k, 0] = int(math.ceil(mx - ex))
        bbox[k, 1] = int(math.floor(mx + ex))
        bbox[k, 2] = int(math.ceil(my - ey))
        bbox[k, 3] = int(math.floor(my + ey))


def project_splats(
    gaussians: GaussianSet, cam: Camera, settings: Optional[RenderSettings] = None, cull: bool = True
) -> ProjectedSplats:
    """EWA projection of every primitive, sorted by (depth, index).

    Primitives inside the near plane are always dropped. With ``cull`` set, splats
    whose opacity is at most the epsilon or whose support misses the image are
    dropped as well.
    """
    settings = settings or RenderSettings()
    rotation_w = np.ascontiguousarray(cam.extrinsics.rotation, dtype=np.float64)
    t = gaussians.means @ rotation_w.T + cam.extrinsics.translation
    keep = t[:, 2] > NEAR_PLANE
    if cull:
        keep &= gaussians.opacities > OPACITY_EPSILON
    idx = np.nonzero(keep)[0]
    t = np.ascontiguousarray(t[idx])
    n = len(idx)
    k = cam.intrinsics
    if settings.jacobian_clamp is None:
        lim_x = lim_y = np.inf
    else:
        lim_x = settings.jacobian_clamp * 0.5 * cam.width / k.fx
        lim_y = settings.jacobian_clamp * 0.5 * cam.height / k.fy
    bounded = settings.extent_sigma is not None
    sigma_sq = float(settings.extent_sigma) ** 2 if bounded else 0.0

    rot = np.ascontiguousarray(quaternion_to_matrix(gaussians.rotations[idx]))
    opacity = np.ascontiguousarray(gaussians.opacities[idx])
    jac = np.empty((n, 2, 3))
    cov3d = np.empty((n, 3, 3))
    cov2d = np.empty((n, 2, 2))
    conic = np.empty((n, 3))
    mean2d = np.empty((n, 2))
    ratio = np.empty((n, 2))
    free = np.empty((n, 2))
    q_limit = np.empty(n)
    bbox = np.empty((n, 4), dtype=np.int64)
    if n:
        _project_kernel(
            t, rot, np.ascontiguousarray(gaussians.scales[idx]), opacity, rotation_w,
            float(k.fx), float(k.fy), float(k.cx), float(k.cy), float(lim_x), float(lim_y),
            float(settings.cov_floor), sigma_sq, bounded,
            jac, cov3d, cov2d, conic, mean2d, ratio, free, q_limit, bbox,
        )
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    assert np.all(det > 0), "2D covariance singular after the low-pass floor"

    if cull:
        on_image = (
            (q_limit >= 0.0)
            & (bbox[:, 1] >= 0)
            & (bbox[:, 0] <= cam.width - 1)
            & (bbox[:, 3] >= 0)
            & (bbox[:, 2] <= cam.height - 1)
        )
        if not np.all(on_image):
            idx, t, rot, opacity = idx[on_image], t[on_image], rot[on_image], opacity[on_image]
            jac, cov3d, cov2d, conic, mean2d = jac[on_image], cov3d[on_image], cov2d[on_image], conic[on_image], mean2d[on_image]
            ratio, free, q_limit, bbox = ratio[on_image], free[on_image], q_limit[on_image], bbox[on_image]

    offset = gaussians.means[idx] - cam.center
    dist = np.linalg.norm(offset, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    dirs = np.where((dist > 0)[:, None], offset / safe[:, None], np.array([0.0, 0.0, 1.0]))
    basis = sh_basis(dirs, gaussians.sh_degree)
    rgb_raw = np.einsum("gb,gbc->gc", basis, gaussians.sh[idx])

    splats = ProjectedSplats(
        idx, t, jac, rot, cov3d, cov2d, conic, mean2d, t[:, 2], opacity, np.clip(rgb_raw, 0.0, 1.0), rgb_raw,
        dirs, dist, basis, ratio, free, q_limit, bbox,
    )
    # primitives arrive in index order, so a stable sort on depth breaks ties by index
    order = np.argsort(splats.depth, kind="stable")
    return ProjectedSplats(*(np.ascontiguousarray(a[order]) for a in splats))


def project_gaussian(g: GaussianPrimitive, cam: Camera, settings: Optional[RenderSettings] = None) -> Optional[Splat2D]:
    """Projects one primitive; ``None`` when it is culled."""
    single = GaussianSet(g.mu[None], g.scale[None], g.rot[None], [g.opacity], np.asarray(g.sh_coeffs)[None])
    splats = project_splats(single, cam, settings, cull=True)
    if len(splats.index) == 0:
        return None
    return Splat2D(splats.mean2d[0], splats.cov2d[0], float(splats.depth[0]), float(splats.opacity[0]), splats.rgb[0])


# ---------------------------------------------------------------------------
# Tile kernels
# ---------------------------------------------------------------------------


@njit(cache=False)
def _bin_splats(bbox, width, height, tile_size, n_tiles_x, n_tiles_y):
    n = bbox.shape[0]
    bounds = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(n_tiles_x * n_tiles_y + 1, dtype=np.int64)
    for k in range(n):
        x0 = max(bbox[k, 0], 0)
        x1 = min(bbox[k, 1], width - 1)
        y0 = max(bbox[k, 2], 0)
        y1 = min(bbox[k, 3], height - 1)
        if x0 > x1 or y0 > y1:
            bounds[k, 0] = 1
            bounds[k, 1] = 0
            bounds[k, 2] = 1
            bounds[k, 3] = 0
            continue
        bounds[k, 0] = x0 // tile_size
        bounds[k, 1] = x1 // tile_size
        bounds[k, 2] = y0 // tile_size
        bounds[k, 3] = y1 // tile_size
        for ty in range(bounds[k, 2], bounds[k, 3] + 1):
            for tx in range(bounds[k, 0], bounds[k, 1] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    tile_splats = np.empty(offsets[-1], dtype=np.int64)
    # splats arrive in compositing order, so every tile list stays sorted
    for k in range(n):
        for ty in range(bounds[k, 2], bounds[k, 3] + 1):
            for tx in range(bounds[k, 0], bounds[k, 1] + 1):
                tile = ty * n_tiles_x + tx
                tile_splats[fill[tile]] = k
                fill[tile] += 1
    return offsets, tile_splats


@njit(cache=False)
def _render_tiles(
    width, height, tile_size, n_tiles_x, offsets, tile_splats,
    mean2d, conic, opacity, rgb, depth, q_limit, bbox, background, cutoff, far_depth,
    color_out, alpha_out, depth_out,
):
    n_tiles = offsets.shape[0] - 1
    area = tile_size * tile_size
    trans = np.empty(area)
    acc = np.empty((area, 5))  # r, g, b, alpha, depth
    done = np.empty(area, dtype=np.bool_)
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width) - 1
        py1 = min(py0 + tile_size, height) - 1
        tile_w = px1 - px0 + 1
        n_pixels = tile_w * (py1 - py0 + 1)
        for i in range(n_pixels):
            trans[i] = 1.0
            done[i] = False
            for c in range(5):
                acc[i, c] = 0.0
        n_done = 0
        for idx in range(offsets[tile], offsets[tile + 1]):
            k = tile_splats[idx]
            x0 = max(bbox[k, 0], px0)
            x1 = min(bbox[k, 1], px1)
            y0 = max(bbox[k, 2], py0)
            y1 = min(bbox[k, 3], py1)
            ca = conic[k, 0]
            cb = conic[k, 1]
            cc = conic[k, 2]
            mx = mean2d[k, 0]
            my = mean2d[k, 1]
            limit = q_limit[k]
            for py in range(y0, y1 + 1):
                dy = my - py
                row = (py - py0) * tile_w
                for px in range(x0, x1 + 1):
                    i = row + px - px0
                    if done[i]:
                        continue
                    dx = mx - px
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > limit:
                        continue
                    a = opacity[k] * math.exp(-0.5 * q)
                    w = a * trans[i]
                    acc[i, 0] += w * rgb[k, 0]
                    acc[i, 1] += w * rgb[k, 1]
                    acc[i, 2] += w * rgb[k, 2]
                    acc[i, 3] += w
                    acc[i, 4] += w * depth[k]
                    trans[i] *= 1.0 - a
                    if trans[i] < cutoff:
                        done[i] = True
                        n_done += 1
            if n_done == n_pixels:
                break
        for py in range(py0, py1 + 1):
            for px in range(px0, px1 + 1):
                i = (py - py0) * tile_w + px - px0
                t = trans[i]
                color_out[py, px, 0] = acc[i, 0] + t * background[0]
                color_out[py, px, 1] = acc[i, 1] + t * background[1]
                color_out[py, px, 2] = acc[i, 2] + t * background[2]
                alpha_out[py, px] = acc[i, 3]
                depth_out[py, px] = acc[i, 4] + t * far_depth


@njit(cache=False)
def _backward_tiles(
    width, height, tile_size, n_tiles_x, offsets, tile_splats,
    mean2d, conic, opacity, rgb, q_limit, bbox, use_bbox, background, cutoff, grad_color,
    g_mean2d, g_conic, g_opacity, g_rgb,
):
    n_tiles = offsets.shape[0] - 1
    longest = 0
    for tile in range(n_tiles):
        longest = max(longest, offsets[tile + 1] - offsets[tile])
    alphas = np.empty(longest)
    gauss = np.empty(longest)
    trans_before = np.empty(longest)
    used = np.empty(longest, dtype=np.int64)
    suffix = np.empty(3)
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                gr = grad_color[py, px, 0]
                gg = grad_color[py, px, 1]
                gb = grad_color[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                trans = 1.0
                n = 0
                for idx in range(start, end):
                    k = tile_splats[idx]
                    if use_bbox and (px < bbox[k, 0] or px > bbox[k, 1] or py < bbox[k, 2] or py > bbox[k, 3]):
                        continue
                    dx = mean2d[k, 0] - px
                    dy = mean2d[k, 1] - py
                    q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                    if q > q_limit[k]:
                        continue
                    e = math.exp(-0.5 * q)
                    used[n] = k
                    gauss[n] = e
                    alphas[n] = opacity[k] * e
                    trans_before[n] = trans
                    trans *= 1.0 - alphas[n]
                    n += 1
                    if trans < cutoff:
                        break
                # suffix colour seen behind splat i, normalised by its transmittance
                suffix[0] = background[0]
                suffix[1] = background[1]
                suffix[2] = background[2]
                for i in range(n - 1, -1, -1):
                    k = used[i]
                    a = alphas[i]
                    t_i = trans_before[i]
                    w = a * t_i
                    g_rgb[k, 0] += w * gr
                    g_rgb[k, 1] += w * gg
                    g_rgb[k, 2] += w * gb
                    d_alpha = t_i * (
                        gr * (rgb[k, 0] - suffix[0]) + gg * (rgb[k, 1] - suffix[1]) + gb * (rgb[k, 2] - suffix[2])
                    )
                    suffix[0] = a * rgb[k, 0] + (1.0 - a) * suffix[0]
                    suffix[1] = a * rgb[k, 1] + (1.0 - a) * suffix[1]
                    suffix[2] = a * rgb[k, 2] + (1.0 - a) * suffix[2]

                    g_opacity[k] += d_alpha * gauss[i]
                    d_q = -0.5 * d_alpha * a
                    dx = mean2d[k, 0] - px
                    dy = mean2d[k, 1] - py
                    g_conic[k, 0] += d_q * dx * dx
                    g_conic[k, 1] += d_q * 2.0 * dx * dy
                    g_conic[k, 2] += d_q * dy * dy
                    g_mean2d[k, 0] += d_q * 2.0 * (conic[k, 0] * dx + conic[k, 1] * dy)
                    g_mean2d[k, 1] += d_q * 2.0 * (conic[k, 1] * dx + conic[k, 2] * dy)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """State of one forward pass; consumed by a single ``rasterize_backward`` call."""

    gaussians: GaussianSet
    camera: Camera
    splats: ProjectedSplats
    background: np.ndarray
    cutoff: float
    tile_size: int
    n_tiles_x: int
    offsets: np.ndarray
    tile_splats: np.ndarray
    reference: bool
    consumed: bool = False


def _background(background, settings: RenderSettings) -> np.ndarray:
    bg = np.asarray(settings.background if background is None else background, dtype=np.float64)
    if bg.shape != (3,):
        raise ShapeError(f"Background must be an rgb triple, got shape {bg.shape}")
    return bg


def _empty_target(cam: Camera, bg: np.ndarray, far_depth: float) -> RenderTarget:
    return RenderTarget(
        np.broadcast_to(bg, (cam.height, cam.width, 3)).copy(),
        np.zeros((cam.height, cam.width)),
        np.full((cam.height, cam.width), float(far_depth)),
        bg,
    )


def rasterize_with_cache(
    gaussians: GaussianSet, cam: Camera, background=None, settings: Optional[RenderSettings] = None
) -> Tuple[RenderTarget, ForwardCache]:
    settings = settings or RenderSettings()
    bg = _background(background, settings)
    if cam.width <= 0 or cam.height <= 0:
        raise ShapeError("Image dimensions must be positive")
    splats = project_splats(gaussians, cam, settings, cull=True)
    tile = settings.tile_size
    n_tiles_x = -(-cam.width // tile)
    n_tiles_y = -(-cam.height // tile)
    offsets, tile_splats = _bin_splats(splats.bbox, cam.width, cam.height, tile, n_tiles_x, n_tiles_y)
    target = _empty_target(cam, bg, settings.far_depth)
    if len(splats.index):
        _render_tiles(
            cam.width, cam.height, tile, n_tiles_x, offsets, tile_splats,
            splats.mean2d, splats.conic, splats.opacity, splats.rgb, splats.depth, splats.q_limit, splats.bbox, bg,
            float(settings.transmittance_cutoff), float(settings.far_depth),
            target.color, target.alpha, target.depth,
        )
    else:
        logger.debug("No splat reaches the image; rendering background only")
    cache = ForwardCache(
        gaussians, cam, splats, bg, float(settings.transmittance_cutoff), tile, n_tiles_x, offsets, tile_splats, False
    )
    return target, cache


def rasterize(gaussians: GaussianSet, cam: Camera, background=None, settings: Optional[RenderSettings] = None) -> RenderTarget:
    return rasterize_with_cache(gaussians, cam, background, settings)[0]


def blend_weights(splats: ProjectedSplats, pixels: np.ndarray, cutoff: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel compositing weights of every splat and the transmittance left over.

    ``pixels`` is (P, 2) in (u, v). Returns weights (P, K) in compositing order and
    the final transmittance (P,).
    """
    a, b, c = splats.conic[:, 0], splats.conic[:, 1], splats.conic[:, 2]
    dx = splats.mean2d[None, :, 0] - pixels[:, 0:1]
    dy = splats.mean2d[None, :, 1] - pixels[:, 1:2]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    alphas = np.where(q <= splats.q_limit, splats.opacity * np.exp(-0.5 * q), 0.0)
    trans_after = np.cumprod(1.0 - alphas, axis=1)
    trans_before = np.concatenate([np.ones((len(pixels), 1)), trans_after[:, :-1]], axis=1)
    included = trans_before >= cutoff
    weights = np.where(included, alphas * trans_before, 0.0)
    trans_final = np.where(included, trans_after, np.inf).min(axis=1)
    return weights, trans_final


def _composite_dense(splats: ProjectedSplats, cam: Camera, bg: np.ndarray, cutoff: float, far_depth: float) -> RenderTarget:
    height, width = cam.height, cam.width
    n_pixels = height * width
    n_splats = len(splats.index)
    vs, us = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    pix = np.stack([us.reshape(-1), vs.reshape(-1)], axis=1)
    color = np.empty((n_pixels, 3))
    alpha = np.empty(n_pixels)
    depth = np.empty(n_pixels)
    chunk = max(1, REFERENCE_CHUNK // n_splats)
    for start in range(0, n_pixels, chunk):
        weights, trans_final = blend_weights(splats, pix[start : start + chunk], cutoff)
        color[start : start + chunk] = weights @ splats.rgb + trans_final[:, None] * bg
        alpha[start : start + chunk] = weights.sum(axis=1)
        depth[start : start + chunk] = weights @ splats.depth + trans_final * far_depth
    return RenderTarget(color.reshape(height, width, 3), alpha.reshape(height, width), depth.reshape(height, width), bg)


def rasterize_reference_with_cache(
    gaussians: GaussianSet,
    cam: Camera,
    background=None,
    settings: Optional[RenderSettings] = None,
    cutoff: float = 0.0,
) -> Tuple[RenderTarget, ForwardCache]:
    settings = settings or RenderSettings()
    bg = _background(background, settings)
    if cam.width <= 0 or cam.height <= 0:
        raise ShapeError("Image dimensions must be positive")
    splats = project_splats(gaussians, cam, settings, cull=False)
    if len(splats.index):
        target = _composite_dense(splats, cam, bg, cutoff, settings.far_depth)
    else:
        target = _empty_target(cam, bg, settings.far_depth)
    n = len(splats.index)
    cache = ForwardCache(
        gaussians, cam, splats, bg, float(cutoff), max(cam.width, cam.height), 1,
        np.array([0, n], dtype=np.int64), np.arange(n, dtype=np.int64), True,
    )
    return target, cache


def rasterize_reference(
    gaussians: GaussianSet, cam: Camera, background=None, settings: Optional[RenderSettings] = None
) -> RenderTarget:
    return rasterize_reference_with_cache(gaussians, cam, background, settings)[0]


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


@dataclass
class GaussianGrads:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, gaussians: GaussianSet) -> "GaussianGrads":
        return cls(
            np.zeros_like(gaussians.means),
            np.zeros_like(gaussians.scales),
            np.zeros_like(gaussians.rotations),
            np.zeros_like(gaussians.opacities),
            np.zeros_like(gaussians.sh),
        )

    def groups(self):
        return {"mu": self.means, "s": self.scales, "r": self.rotations, "alpha": self.opacities, "sh": self.sh}

    def __iadd__(self, other: "GaussianGrads") -> "GaussianGrads":
        self.means += other.means
        self.scales += other.scales
        self.rotations += other.rotations
        self.opacities += other.opacities
        self.sh += other.sh
        return self


def _quaternion_backward(quats: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw (possibly unnormalised) quaternions from dL/dR."""
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    g_unit = np.stack([gw, gx, gy, gz], axis=1)
    radial = np.sum(g_unit * q, axis=1, keepdims=True)
    return (g_unit - radial * q) / norms


def rasterize_backward(
    gaussians: GaussianSet, cam: Camera, upstream_grad: np.ndarray, cache: Optional[ForwardCache] = None
) -> GaussianGrads:
    """Gradients of sum(upstream * color) w.r.t. every primitive parameter.

    Needs the cache of the forward pass that produced ``color``; the sort order and
    tile assignment are held fixed.
    """
    if cache is None:
        raise UsageError("rasterize_backward needs the forward cache of the same render")
    if cache.consumed:
        raise UsageError("Forward cache already consumed by a backward pass")
    if cache.gaussians is not gaussians or cache.camera is not cam:
        raise UsageError("Forward cache belongs to a different GaussianSet or camera")
    upstream = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"Upstream gradient must be ({cam.height}, {cam.width}, 3), got {upstream.shape}")
    cache.consumed = True

    grads = GaussianGrads.zeros_like(gaussians)
    splats = cache.splats
    n = len(splats.index)
    if n == 0 or not np.any(upstream):
        return grads

    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_rgb = np.zeros((n, 3))
    _backward_tiles(
        cam.width, cam.height, cache.tile_size, cache.n_tiles_x, cache.offsets, cache.tile_splats,
        splats.mean2d, splats.conic, splats.opacity, splats.rgb, splats.q_limit, splats.bbox, not cache.reference,
        cache.background, cache.cutoff,
        upstream, g_mean2d, g_conic, g_opacity, g_rgb,
    )

    k = cam.intrinsics
    idx = splats.index
    x, y, z = splats.cam_points[:, 0], splats.cam_points[:, 1], splats.cam_points[:, 2]
    g_t = np.zeros((n, 3))

    # colour: clamp, then SH coefficients and the view direction
    g_raw = np.where((splats.rgb_raw >= 0.0) & (splats.rgb_raw <= 1.0), g_rgb, 0.0)
    g_sh = splats.basis[:, :, None] * g_raw[:, None, :]
    dbasis = sh_basis_grad(splats.dirs, gaussians.sh_degree)
    g_dir = np.einsum("gc,gbc,gbd->gd", g_raw, gaussians.sh[idx], dbasis)
    g_dir -= np.sum(g_dir * splats.dirs, axis=1, keepdims=True) * splats.dirs
    safe_dist = np.where(splats.dist > 0, splats.dist, 1.0)
    g_mu = np.where((splats.dist > 0)[:, None], g_dir / safe_dist[:, None], 0.0)

    # conic -> 2D covariance
    g_q = np.empty((n, 2, 2))
    g_q[:, 0, 0] = g_conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_q[:, 1, 1] = g_conic[:, 2]
    conic_m = np.linalg.inv(splats.cov2d)
    g_cov2d = -conic_m @ g_q @ conic_m

    # cov2d = T cov3d T^T with T = J W
    rotation_w = cam.extrinsics.rotation
    tw = splats.jacobian @ rotation_w
    g_cov3d = np.swapaxes(tw, 1, 2) @ g_cov2d @ tw
    g_tw = 2.0 * g_cov2d @ tw @ splats.cov3d
    g_jac = g_tw @ rotation_w.T
    # J[0, 2] = -fx * rx / z with rx = clamp(x / z); a clamped ratio no longer follows x
    rx, ry = splats.ratio[:, 0], splats.ratio[:, 1]
    free_x, free_y = splats.free[:, 0], splats.free[:, 1]
    g_t[:, 0] += g_jac[:, 0, 2] * (-k.fx / z**2) * free_x
    g_t[:, 1] += g_jac[:, 1, 2] * (-k.fy / z**2) * free_y
    g_t[:, 2] += (
        g_jac[:, 0, 0] * (-k.fx / z**2)
        + g_jac[:, 0, 2] * (k.fx * rx / z**2 + free_x * k.fx * x / z**3)
        + g_jac[:, 1, 1] * (-k.fy / z**2)
        + g_jac[:, 1, 2] * (k.fy * ry / z**2 + free_y * k.fy * y / z**3)
    )

    # projected mean
    g_t[:, 0] += g_mean2d[:, 0] * k.fx / z
    g_t[:, 1] += g_mean2d[:, 1] * k.fy / z
    g_t[:, 2] += -g_mean2d[:, 0] * k.fx * x / z**2 - g_mean2d[:, 1] * k.fy * y / z**2
    g_mu += g_t @ rotation_w

    # cov3d = M M^T with M = R diag(s)
    scales = gaussians.scales[idx]
    m = splats.rotation * scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_scale = np.sum(g_m * splats.rotation, axis=1)
    g_rot = g_m * scales[:, None, :]

    grads.means[idx] = g_mu
    grads.scales[idx] = g_scale
    grads.rotations[idx] = _quaternion_backward(gaussians.rotations[idx], g_rot)
    grads.opacities[idx] = g_opacity
    grads.sh[idx] = g_sh
    return grads
