"""Training objectives: per-level chamfer registration, elastic
regularization on the aggregated local rotations, anti-occlusion
silhouette, color, optical-flow, and 3D cycle-consistency losses, plus
their weighted total.

Each loss is built on its own tape with only its permitted parameter
groups bound live, which makes the freezing contracts exact: a term can
never touch parameters it is documented to leave frozen.  All reductions
are batch means (the summand matches the per-element objective; the
constant factor is absorbed by the configured term weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .fields import _t2
from .rendering import project_points

BRUTE_FORCE_LIMIT = 4096


class EmptySet(ValueError):
    """A chamfer term received an empty point set."""


class NonPositiveSingularValue(ValueError):
    """Elastic loss needs strictly positive singular values."""


@dataclass
class LossReport:
    """Per-step loss values; total is the configured weighted sum."""

    cd_per_level: list
    elastic: float
    silhouette: float
    rgb: float
    flow: float
    cycle3d: float
    total: float
    extras: dict = field(default_factory=dict)

    def to_json_line(self, step=None, lr=None) -> str:
        parts = []
        if step is not None:
            parts.append(f'"step": {int(step)}')
        parts.append('"cd": [' + ", ".join(repr(float(v)) for v in self.cd_per_level) + "]")
        for name in ("elastic", "silhouette", "rgb", "flow", "cycle3d", "total"):
            parts.append(f'"{name}": {float(getattr(self, name))!r}')
        if lr is not None:
            parts.append(f'"lr": {float(lr)!r}')
        for key in sorted(self.extras):
            parts.append(f'"{key}": {float(self.extras[key])!r}')
        return "{" + ", ".join(parts) + "}"


DEFAULT_WEIGHTS = {
    "cd": 1.0,
    "elastic": 1.0,
    "silhouette": 1.0,
    "rgb": 1.0,
    "flow": 1.0,
    "cycle3d": 1.0,
}


def nearest_neighbor_indices(query, points, p_norm=1):
    """Index into `points` of the nearest neighbor of each query point.

    Exact everywhere: chunked brute force up to the size limit, k-d tree
    above it (both are exact; the tree replaces a bespoke grid hash).
    """
    q = np.asarray(query, dtype=float)
    pts = np.asarray(points, dtype=float)
    if max(q.shape[0], pts.shape[0]) > BRUTE_FORCE_LIMIT:
        _, idx = cKDTree(pts).query(q, p=p_norm)
        return idx
    out = np.empty(q.shape[0], dtype=np.intp)
    for start in range(0, q.shape[0], 512):
        chunk = q[start : start + 512]
        diff = chunk[:, None, :] - pts[None, :, :]
        dist = np.abs(diff).sum(axis=2) if p_norm == 1 else (diff**2).sum(axis=2)
        out[start : start + 512] = np.argmin(dist, axis=1)
    return out


def chamfer_l1(warped: Tensor, target) -> Tensor:
    """Symmetric chamfer with l1 norms: mean-of-min in both directions.

    The target set enters as constants; gradients flow only through the
    warped set.  Value is the sum of the two mean terms.
    """
    tgt = np.asarray(target, dtype=float)
    if warped.values.shape[0] == 0 or tgt.shape[0] == 0:
        raise EmptySet("chamfer needs non-empty point sets")
    fwd_idx = nearest_neighbor_indices(warped.values, tgt, p_norm=1)
    bwd_idx = nearest_neighbor_indices(tgt, warped.values, p_norm=1)
    fwd = ad.mean(ad.tensor_sum(ad.absval(ad.sub(warped, tgt[fwd_idx])), axis=1))
    matched = ad.take(warped, bwd_idx, axis=0)
    bwd = ad.mean(ad.tensor_sum(ad.absval(ad.sub(matched, tgt)), axis=1))
    return ad.add(fwd, bwd)


def elastic_loss(sigma: Tensor) -> Tensor:
    """Squared Frobenius norm of log singular values."""
    if np.any(sigma.values <= 0.0):
        raise NonPositiveSingularValue("singular values must be positive")
    return ad.tensor_sum(ad.square(ad.log(sigma)))


def registration_losses(model, p, points, taus, t: int, canonical_points):
    """Per-level chamfer terms plus the elastic term, sharing one graph.

    points/taus come from the frame's buffer (constants; the stored
    visibility weights are frozen by construction).  Gradients reach the
    local rotation and scale increments of levels <= k for the k-th term;
    the shared translation and the skinning map apply with frozen
    parameters.
    """
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    tau = np.asarray(taus, dtype=float).reshape(-1)
    if x.shape[0] == 0:
        raise EmptySet("registration batch is empty")
    rot, trans = model.root_pose_tensors(p, t)
    x0 = ad.matmul(Tensor(x), _t2(rot))
    levels = model.pyramid_levels(p, x, t)
    prefix = model.pyramid_prefix(p, x, t, levels=levels)
    n = x.shape[0]
    x0_col = ad.reshape(x0, (n, 3, 1))
    cd_terms = []
    for prod_r, prod_s in prefix:
        rotated = ad.reshape(ad.bmm(prod_r, x0_col), (n, 3))
        warped = ad.add(ad.mul(prod_s, rotated), ad.reshape(trans, (1, 3)))
        in_canonical = model.forward_skinning(p, warped, t, detach_code=True)
        cd_terms.append(chamfer_l1(in_canonical, canonical_points))
    total_tau = float(tau.sum())
    if total_tau <= 0.0:
        tau = np.ones_like(tau)
        total_tau = float(tau.sum())
    weighted = ad.mul(prefix[-1][0], tau.reshape(n, 1, 1))
    m_t = ad.mul(ad.tensor_sum(weighted, axis=0), 1.0 / total_tau)
    sigma = ad.svd3_diff(m_t)
    return cd_terms, elastic_loss(sigma), sigma


def silhouette_loss(opacity: Tensor, mask_values, occlusion_mask, alpha: float) -> Tensor:
    """Anti-occlusion silhouette term: A * (opacity - indicator)^2.

    A is 1 away from occlusion pixels and `alpha` on them; alpha anneals
    from 1 toward its floor during training.  With alpha = 1 this is the
    plain silhouette loss.
    """
    ind = np.asarray(mask_values, dtype=float).reshape(-1)
    occ = np.asarray(occlusion_mask, dtype=bool).reshape(-1)
    weights = np.where(occ, float(alpha), 1.0)
    sq = ad.square(ad.sub(opacity, ind))
    return ad.mean(ad.mul(sq, weights))


def rgb_loss(rendered: Tensor, observed) -> Tensor:
    """Mean squared color error over a pixel batch."""
    obs = np.asarray(observed, dtype=float).reshape(-1, 3)
    return ad.mean(ad.tensor_sum(ad.square(ad.sub(rendered, obs)), axis=1))


def flow_loss(model, p, camera_t, camera_next, samples, tau_values, t: int, t_next: int, observed_flow) -> Tensor:
    """Optical-flow term between a frame pair sharing a projection setup.

    The predicted target pixel is the visibility-weighted mean of the
    per-sample projections of the warp chain t -> canonical -> t'; the
    visibility weights enter as constants.
    """
    r, n = samples.depths.shape
    flat = samples.points.reshape(-1, 3)
    canonical = model.warp_to_canonical_tensors(p, flat, t)
    back = model.warp_to_camera_tensors(p, canonical, t_next)
    pix, _ = project_points(camera_next, back)
    tau = np.asarray(tau_values, dtype=float).reshape(r, n)
    norm = np.maximum(tau.sum(axis=1, keepdims=True), 1e-12)
    tau = tau / norm
    weighted = ad.mul(ad.reshape(pix, (r, n, 2)), tau[:, :, None])
    target_pix = ad.tensor_sum(weighted, axis=1)
    flow = ad.sub(target_pix, samples.pixels)
    obs = np.asarray(observed_flow, dtype=float).reshape(r, 2)
    return ad.mean(ad.tensor_sum(ad.square(ad.sub(flow, obs)), axis=1))


def cycle3d_loss(model, p, points, tau_values, t: int) -> Tensor:
    """Visibility-weighted squared round-trip error through both warps."""
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    tau = np.asarray(tau_values, dtype=float).reshape(-1)
    canonical = model.warp_to_canonical_tensors(p, x, t)
    back = model.warp_to_camera_tensors(p, canonical, t)
    sq = ad.tensor_sum(ad.square(ad.sub(back, x)), axis=1)
    return ad.mean(ad.mul(sq, tau))


def total_from_parts(cd_values, elastic, silhouette, rgb, flow, cycle3d, weights=None, extras=None) -> LossReport:
    """Assemble the report; total follows the configured per-term weights."""
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        w.update(weights)
    cd_values = [float(v) for v in cd_values]
    total = (
        w["cd"] * sum(cd_values)
        + w["elastic"] * float(elastic)
        + w["silhouette"] * float(silhouette)
        + w["rgb"] * float(rgb)
        + w["flow"] * float(flow)
        + w["cycle3d"] * float(cycle3d)
    )
    return LossReport(
        cd_per_level=cd_values,
        elastic=float(elastic),
        silhouette=float(silhouette),
        rgb=float(rgb),
        flow=float(flow),
        cycle3d=float(cycle3d),
        total=float(total),
        extras=dict(extras or {}),
    )
