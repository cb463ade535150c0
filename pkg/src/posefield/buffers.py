"""Per-frame reservoir of high-visibility camera-space points feeding the
registration losses.

Buffer mutation requires exclusive access; reads for sampling may be
shared.  Each frame owns an independent buffer.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .fields import SURFACE_EPS, NoSurfaceFound

CAPACITY = 10_000
RAY_KEEP_THRESHOLD = 1e-3
SOFTMAX_TEMPERATURE = 0.01


class EmptyBuffer(RuntimeError):
    """Sampling was requested from a frame whose buffer holds no points."""


class PointBuffer:
    """FIFO reservoir of (point, visibility weight) pairs per frame.

    A whole ray is discarded when every one of its visibility weights sits
    below the keep threshold; otherwise all of its samples enter, evicting
    the oldest entries beyond capacity.
    """

    def __init__(self, frames: int, capacity: int = CAPACITY):
        self.capacity = int(capacity)
        self._points = [deque(maxlen=self.capacity) for _ in range(frames)]
        self._weights = [deque(maxlen=self.capacity) for _ in range(frames)]

    def size(self, t: int) -> int:
        return len(self._points[t])

    def insert_ray(self, t: int, points, weights, threshold: float = RAY_KEEP_THRESHOLD) -> int:
        """Insert one ray's samples; returns how many points were stored."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        tau = np.asarray(weights, dtype=float).reshape(-1)
        if pts.shape[0] != tau.shape[0]:
            raise ValueError("one weight per sample required")
        if tau.size == 0 or float(tau.max()) < threshold:
            return 0
        for xyz, w in zip(pts, tau):
            self._points[t].append(xyz)
            self._weights[t].append(float(w))
        return pts.shape[0]

    def insert_rays(self, t: int, points, weights, threshold: float = RAY_KEEP_THRESHOLD) -> int:
        """Vector form over a (R, N, 3) batch of rays."""
        pts = np.asarray(points, dtype=float)
        tau = np.asarray(weights, dtype=float)
        total = 0
        for r in range(pts.shape[0]):
            total += self.insert_ray(t, pts[r], tau[r], threshold=threshold)
        return total

    def contents(self, t: int):
        if not self._points[t]:
            raise EmptyBuffer(f"frame {t} buffer is empty")
        return np.stack(list(self._points[t])), np.array(self._weights[t])

    def sample_registration_set(self, t: int, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Draw `count` points (with replacement) by softmax(tau / T).

        The raw stored weights enter the softmax unrenormalized; with the
        default temperature of 0.01 the draw is nearly deterministic on
        the highest-visibility points.
        """
        pts, tau = self.contents(t)
        if count == 0:
            return np.zeros((0, 3)), np.zeros(0)
        z = tau / SOFTMAX_TEMPERATURE
        z = z - z.max()
        prob = np.exp(z)
        prob /= prob.sum()
        idx = rng.choice(pts.shape[0], size=count, replace=True, p=prob)
        return pts[idx], tau[idx]


def sample_canonical_surface(model, count: int, rng, eps: float = SURFACE_EPS, max_attempts: int = 20) -> np.ndarray:
    """Exactly `count` canonical surface points via projection sampling.

    Box probes are Newton-projected onto the zero level set and filtered
    to the surface band; raises NoSurfaceFound when repeated attempts
    produce nothing.
    """
    kept = []
    have = 0
    for _ in range(max_attempts):
        probes = rng.uniform(-1.6, 1.6, size=(max(2 * count, 64), 3))
        pts = model.project_to_surface(probes)
        good = pts[np.abs(model.sdf(pts)) < eps]
        if good.shape[0]:
            kept.append(good)
            have += good.shape[0]
        if have >= count:
            break
    if have == 0:
        raise NoSurfaceFound("projection sampling found no surface points")
    allpts = np.concatenate(kept, axis=0)
    if allpts.shape[0] < count:
        reps = int(np.ceil(count / allpts.shape[0]))
        allpts = np.tile(allpts, (reps, 1))
    return allpts[:count]
