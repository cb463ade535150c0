"""Evaluation metrics: chamfer distance (cm), F-score at 2% of the
bounding-box edge, and 2D mean IoU over binary masks, plus the helpers
that render opacity maps and score a trained model against a scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import sample_canonical_surface
from .losses import EmptySet, nearest_neighbor_indices


class DimMismatch(ValueError):
    """Mask stacks with different raster dimensions cannot be compared."""


@dataclass
class EvalResult:
    chamfer_cm: float
    fscore_at_2pct: float
    miou: float

    def to_dict(self):
        return {
            "chamfer_cm": float(self.chamfer_cm),
            "fscore_at_2pct": float(self.fscore_at_2pct),
            "miou": float(self.miou),
        }


def chamfer_distance_metric(pred, gt, cm_per_unit=100.0) -> float:
    """Symmetric mean nearest-neighbor l2 distance, reported in scene cm.

    The two directional means are averaged (identical singleton offsets
    therefore report the plain offset).
    """
    a = np.asarray(pred, dtype=float).reshape(-1, 3)
    b = np.asarray(gt, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySet("chamfer metric needs non-empty point sets")
    ia = nearest_neighbor_indices(a, b, p_norm=2)
    ib = nearest_neighbor_indices(b, a, p_norm=2)
    fwd = np.linalg.norm(a - b[ia], axis=1).mean()
    bwd = np.linalg.norm(b - a[ib], axis=1).mean()
    return float(0.5 * (fwd + bwd) * cm_per_unit)


def fscore(pred, gt, threshold_fraction=0.02) -> float:
    """Harmonic mean of precision and recall at a distance threshold.

    The threshold is the given fraction (default 2%) of the longest edge
    of the ground truth's axis-aligned bounding box.  Returned in percent.
    """
    a = np.asarray(pred, dtype=float).reshape(-1, 3)
    b = np.asarray(gt, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySet("f-score needs non-empty point sets")
    extent = b.max(axis=0) - b.min(axis=0)
    threshold = threshold_fraction * float(extent.max())
    ia = nearest_neighbor_indices(a, b, p_norm=2)
    ib = nearest_neighbor_indices(b, a, p_norm=2)
    precision = float(np.mean(np.linalg.norm(a - b[ia], axis=1) <= threshold))
    recall = float(np.mean(np.linalg.norm(b - a[ib], axis=1) <= threshold))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def miou(pred_masks, gt_masks) -> float:
    """Mean over frames of the foreground IoU, in percent."""
    pred = np.asarray(pred_masks, dtype=bool)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.shape != gt.shape:
        raise DimMismatch(f"mask stacks differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    scores = []
    for pm, gm in zip(pred, gt):
        union = np.logical_or(pm, gm).sum()
        inter = np.logical_and(pm, gm).sum()
        scores.append(1.0 if union == 0 else inter / union)
    return float(100.0 * np.mean(scores))


def render_opacity_map(model, camera, t, near, far, samples_per_ray=24, chunk=2048):
    """Full-frame rendered opacity via the volume-rendering weights."""
    from .rendering import sample_ray, visibility_weights

    w, h = camera.width, camera.height
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    out = np.zeros(pixels.shape[0])
    p = model.bind()
    for start in range(0, pixels.shape[0], chunk):
        batch = pixels[start : start + chunk]
        s = sample_ray(camera, batch, near, far, samples_per_ray)
        flat = s.points.reshape(-1, 3)
        warped = model.warp_to_canonical_tensors(p, flat, t)
        sdf = model.sdf_tensors(p, warped)
        sigma = model.density_tensors(p, sdf).values.reshape(batch.shape[0], samples_per_ray)
        tau = visibility_weights(sigma, s.intervals).values
        out[start : start + chunk] = tau.sum(axis=1)
    return out.reshape(h, w)


def registration_residual_chamfer(model, scene, t, max_points=2000) -> float:
    """Chamfer (cm) between warped ground-truth camera points and the
    ground-truth canonical surface: the registration residual of frame t."""
    pts = scene.gt_points_camera(t)
    if pts.shape[0] > max_points:
        pts = pts[:: pts.shape[0] // max_points + 1]
    warped = model.warp_to_canonical(pts, t)
    target = scene.gt_points_canonical()
    return chamfer_distance_metric(warped, target, cm_per_unit=scene.cm_per_unit)


def evaluate_model(model, scene, samples=10_000, samples_per_ray=24, mask_threshold=0.5, seed=0) -> EvalResult:
    """Frame-averaged 3D metrics plus 2D mIoU for a trained model.

    Predicted surface points are canonical surface samples warped into
    each frame; masks are rendered opacity maps thresholded at 0.5 and
    compared against the full (unoccluded) target masks when available.
    """
    rng = np.random.default_rng(seed)
    canonical = sample_canonical_surface(model, samples, rng)
    cds, fss, ious = [], [], []
    for t in range(model.config.frames):
        gt_pts = scene.gt_points_camera(t)
        pred = model.warp_to_camera(canonical, t)
        cds.append(chamfer_distance_metric(pred, gt_pts, cm_per_unit=scene.cm_per_unit))
        fss.append(fscore(pred, gt_pts))
        camera = scene.camera(t)
        opacity = render_opacity_map(model, camera, t, scene.near, scene.far, samples_per_ray)
        gt_mask = scene.full_mask(t)
        ious.append(miou(opacity > mask_threshold, gt_mask))
    return EvalResult(
        chamfer_cm=float(np.mean(cds)),
        fscore_at_2pct=float(np.mean(fss)),
        miou=float(np.mean(ious)),
    )
