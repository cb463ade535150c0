"""Ray generation, stratified depth sampling, visibility weights, and
volume-rendered color and silhouette values.

Per-ray evaluation is independent and thread-safe; rays may be sharded
across workers with one tape per shard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import spherical_angles


class BehindCamera(ValueError):
    """A point to project has non-positive depth in front of the camera."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera as a 3x4 projection matrix plus raster size."""

    projection: np.ndarray  # 3x4
    width: int
    height: int

    def __post_init__(self):
        p = np.asarray(self.projection, dtype=float)
        if p.shape != (3, 4):
            raise ValueError("projection must be 3x4")
        if not np.all(np.isfinite(p)):
            raise ValueError("projection must be finite")
        object.__setattr__(self, "projection", p)

    def center(self) -> np.ndarray:
        """Camera center: the projective null point of the 3x4 matrix."""
        m = self.projection[:, :3]
        return -np.linalg.solve(m, self.projection[:, 3])

    def ray(self, pixel):
        """Origin and unit direction of the ray through a pixel center."""
        pix = np.asarray(pixel, dtype=float).reshape(-1, 2)
        m = self.projection[:, :3]
        hom = np.concatenate([pix, np.ones((pix.shape[0], 1))], axis=1)
        d = np.linalg.solve(m, hom.T).T
        # Orient rays toward positive projective depth.
        test = self.center() + d
        w = (self.projection @ np.append(test[0], 1.0))[2]
        if w < 0:
            d = -d
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return self.center(), d

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and projective depths of world points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        hom = self.projection @ np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1).T
        depth = hom[2]
        return (hom[:2] / depth).T, depth


@dataclass
class RaySamples:
    """Stratified samples along one or more rays.

    depths are ascending per ray; intervals pair each sample with the gap
    to the next one (the final interval closes the segment to `far`).
    """

    pixels: np.ndarray     # (R, 2)
    origins: np.ndarray    # (3,)
    directions: np.ndarray  # (R, 3)
    depths: np.ndarray     # (R, N)
    points: np.ndarray     # (R, N, 3)
    intervals: np.ndarray  # (R, N)


def sample_ray(camera: Camera, pixels, near: float, far: float, count: int, rng=None) -> RaySamples:
    """Stratified depth sampling: one sample per bin, jittered when rng given."""
    if not near < far:
        raise ValueError("near must be smaller than far")
    if count < 2:
        raise ValueError("at least two samples per ray required")
    origin, dirs = camera.ray(pixels)
    r = dirs.shape[0]
    edges = np.linspace(near, far, count + 1)
    if rng is None:
        offsets = np.full((r, count), 0.5)
    else:
        offsets = rng.uniform(0.0, 1.0, size=(r, count))
    width = (far - near) / count
    depths = edges[:-1][None, :] + offsets * width
    points = origin[None, None, :] + depths[..., None] * dirs[:, None, :]
    intervals = np.empty_like(depths)
    intervals[:, :-1] = np.diff(depths, axis=1)
    intervals[:, -1] = far - depths[:, -1]
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return RaySamples(pix, origin, dirs, depths, points, intervals)


def visibility_weights(sigma, delta):
    """Visibility weights tau_n = prod_{m<n} exp(-s_m d_m) (1 - exp(-s_n d_n)).

    Accepts tensors or arrays shaped (..., N); differentiable when fed
    tensors.  The weights satisfy sum_n tau_n = 1 - exp(-sum_n s_n d_n).
    """
    sigma = ad.as_tensor(sigma)
    delta = ad.as_tensor(delta)
    if sigma.values.shape != delta.values.shape:
        raise ad.ShapeMismatch("sigma and delta must share a shape")
    if np.any(delta.values <= 0):
        raise ValueError("intervals must be positive")
    opt = ad.mul(sigma, delta)
    inclusive = ad.cumsum(opt, axis=-1)
    exclusive = ad.sub(inclusive, opt)
    transmittance = ad.exp(ad.neg(exclusive))
    absorb = ad.sub(1.0, ad.exp(ad.neg(opt)))
    return ad.mul(transmittance, absorb)


def ray_directions_angles(samples: RaySamples) -> np.ndarray:
    return spherical_angles(samples.directions)


def render_pixels(model, p, samples: RaySamples, t: int, with_color=True, detach_warp=False):
    """Volume-render opacity (and color) for a batch of rays, on tape.

    Returns (tau (R, N), opacity (R,), color (R, 3) or None).  When
    detach_warp is set the warped points enter the density as constants,
    which is how losses that must not touch the warp are built.
    """
    r, n = samples.depths.shape
    flat = samples.points.reshape(-1, 3)
    warped = model.warp_to_canonical_tensors(p, flat, t)
    if detach_warp:
        warped = warped.detach()
    sdf = model.sdf_tensors(p, warped)
    sigma = ad.reshape(model.density_tensors(p, sdf), (r, n))
    tau = visibility_weights(sigma, Tensor(samples.intervals))
    opacity = ad.tensor_sum(tau, axis=1)
    color = None
    if with_color:
        angles = ray_directions_angles(samples)
        angles = np.repeat(angles, n, axis=0)
        rgb = model.color_tensors(p, warped, angles, t)
        weighted = ad.mul(ad.reshape(tau, (r * n, 1)), rgb)
        color = ad.tensor_sum(ad.reshape(weighted, (r, n, 3)), axis=1)
    return tau, opacity, color


def project_surface_point(model, camera: Camera, canonical_points, t: int) -> np.ndarray:
    """Pixels of canonical surface points: Pi applied to G_t^{-1} M_{*->t}(x).

    Raises BehindCamera when any projective depth is non-positive.
    """
    cam_pts = model.warp_to_camera(canonical_points, t)
    pix, depth = camera.project(cam_pts)
    if np.any(depth <= 0.0):
        raise BehindCamera("surface point projects with non-positive depth")
    return pix


def project_points(camera: Camera, points: "Tensor | np.ndarray"):
    """Perspective projection on tape: world tensor points to pixel tensors."""
    pts = ad.as_tensor(points)
    m = Tensor(camera.projection[:, :3].T)
    b = Tensor(camera.projection[:, 3])
    hom = ad.add(ad.matmul(pts, m), b)
    depth = ad.take(hom, np.array([2]), axis=1)
    if np.any(depth.values <= 0.0):
        raise BehindCamera("point projects with non-positive depth")
    uv = ad.take(hom, np.array([0, 1]), axis=1)
    return ad.div(uv, depth), depth
