"""Transform-group algebra: rotations, rigid and similarity transforms,
and Frobenius-norm rotation averaging via singular-value decomposition.

All functions here are pure and operate on immutable values; they are safe
to call from any number of threads concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHONORMALITY_TOL = 1e-9
_JACOBI_SWEEPS = 30
_JACOBI_TOL = 1e-15


class AllWeightsZero(ValueError):
    """Raised when a weighted rotation mean receives no positive weight."""


class DegenerateRotation(ValueError):
    """Raised when the closest-rotation problem has no unique minimizer.

    Happens when the two smallest singular values coincide while the
    orientation needs a sign correction; picking one solution silently
    would hide a genuinely ambiguous configuration.
    """


@dataclass(frozen=True)
class Rotation:
    """A proper rotation, stored as a 3x3 orthonormal matrix with det +1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-7:
            raise ValueError("matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-7:
            raise ValueError("matrix determinant is not +1")
        object.__setattr__(self, "matrix", m)

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=float)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion x -> R x + t (an SE(3) element)."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    def apply(self, x):
        return self.rotation.apply(x) + self.translation

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))


@dataclass(frozen=True)
class SimTransform:
    """Similarity motion x -> s R x + t with uniform positive scale s."""

    rotation: Rotation
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    def linear(self) -> np.ndarray:
        return self.scale * self.rotation.matrix

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear()
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SimTransform":
        rinv = self.rotation.inverse()
        sinv = 1.0 / self.scale
        return SimTransform(rinv, sinv, -sinv * rinv.apply(self.translation))


@dataclass(frozen=True)
class SvdFactors:
    """SVD of a 3x3 matrix: U diag(sigma) V^T with sigma sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.u @ np.diag(self.sigma) @ self.v.T


def compose_rigid(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition (a o b)(x) = a(b(x))."""
    rot = Rotation(a.rotation.matrix @ b.rotation.matrix)
    return RigidTransform(rot, a.rotation.apply(b.translation) + a.translation)


def apply_sim(g: SimTransform, x) -> np.ndarray:
    """Apply a similarity transform: scale * R @ x + t."""
    return g.scale * g.rotation.apply(x) + g.translation


def svd3(matrix) -> SvdFactors:
    """One-sided Jacobi SVD of a 3x3 matrix.

    Iteratively orthogonalizes column pairs of A by right rotations; the
    accumulated rotations form V, the column norms the singular values,
    and the normalized columns U.  Determinism and exactness at this size
    matter more than throughput, hence no LAPACK call.  Rank-deficient
    inputs get their missing U columns completed to an orthonormal basis.
    """
    a = np.array(matrix, dtype=float)
    if a.shape != (3, 3):
        raise ValueError("svd3 expects a 3x3 matrix")
    v = np.eye(3)
    scale = np.max(np.abs(a))
    if scale == 0.0:
        return SvdFactors(np.eye(3), np.zeros(3), np.eye(3))
    for _ in range(_JACOBI_SWEEPS):
        off = 0.0
        for p in range(2):
            for q in range(p + 1, 3):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                apq = a[:, p] @ a[:, q]
                off = max(off, abs(apq) / (scale * scale))
                if abs(apq) <= _JACOBI_TOL * math.sqrt(app * aqq) or apq == 0.0:
                    continue
                # Jacobi rotation zeroing the (p, q) Gram entry.
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                giv = np.eye(3)
                giv[p, p] = c
                giv[q, q] = c
                giv[p, q] = s
                giv[q, p] = -s
                a = a @ giv
                v = v @ giv
        if off < _JACOBI_TOL:
            break
    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma)
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((3, 3))
    for i in range(3):
        if sigma[i] > _JACOBI_TOL * sigma[0]:
            u[:, i] = a[:, i] / sigma[i]
        else:
            sigma[i] = np.linalg.norm(a[:, i])
            u[:, i] = 0.0
    # Complete U to an orthonormal basis for (near-)rank-deficient inputs.
    for i in range(3):
        if np.linalg.norm(u[:, i]) > 0.5:
            continue
        if i == 2 or np.linalg.norm(u[:, i + 1]) < 0.5:
            cand = np.cross(u[:, (i + 1) % 3], u[:, (i + 2) % 3])
            if np.linalg.norm(cand) < 0.5:
                prev = u[:, i - 1] if i > 0 else np.array([1.0, 0.0, 0.0])
                cand = np.array([1.0, 0.0, 0.0])
                if abs(prev[0]) > 0.9:
                    cand = np.array([0.0, 1.0, 0.0])
                cand = cand - (cand @ prev) * prev
            u[:, i] = cand / np.linalg.norm(cand)
        else:
            u[:, i] = np.cross(u[:, i + 1], u[:, (i + 2) % 3])
            u[:, i] /= np.linalg.norm(u[:, i])
    return SvdFactors(u, sigma, v)


def weighted_rotation_mean(rotations, weights) -> tuple[np.ndarray, SvdFactors]:
    """Weighted elementwise mean of rotation matrices plus its SVD.

    The mean M = sum_i w_i R_i / sum_i w_i is the unconstrained minimizer
    of sum_i w_i ||R_i - M||_F^2; projecting its SVD back to SO(3) gives
    the Frobenius-closest rotation.  Raises AllWeightsZero when the weight
    total is not positive.
    """
    w = np.asarray(weights, dtype=float)
    mats = np.stack([r.matrix if isinstance(r, Rotation) else np.asarray(r, float) for r in rotations])
    if w.shape != (mats.shape[0],):
        raise ValueError("one weight per rotation required")
    total = float(w.sum())
    if total <= 0.0:
        raise AllWeightsZero("sum of weights must be positive")
    mean = np.einsum("n,nij->ij", w, mats) / total
    return mean, svd3(mean)


def closest_rotation(factors: SvdFactors) -> Rotation:
    """Frobenius-closest rotation U V^T from SVD factors.

    When det(U V^T) is negative the last column of U is negated (the
    standard Kabsch sign correction, valid because singular values are
    sorted descending).  If the two smallest singular values coincide in
    that reflected case the minimizer is not unique and DegenerateRotation
    is raised instead of silently picking one.
    """
    u = factors.u.copy()
    r = u @ factors.v.T
    if np.linalg.det(r) < 0.0:
        smax = max(factors.sigma[0], 1.0e-300)
        if abs(factors.sigma[1] - factors.sigma[2]) <= 1e-9 * smax:
            raise DegenerateRotation(
                "reflected case with equal trailing singular values has no unique closest rotation"
            )
        u[:, 2] = -u[:, 2]
        r = u @ factors.v.T
    # Re-orthonormalize to wash out accumulated roundoff before validation.
    f = svd3(r)
    r = f.u @ f.v.T
    return Rotation(r)


def rotation_about_axis(axis, angle: float) -> Rotation:
    """Rotation by `angle` radians about `axis` (Rodrigues form)."""
    a = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("axis must be nonzero")
    a = a / n
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    m = np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)
    return Rotation(m)


def rot_x(angle: float) -> Rotation:
    return rotation_about_axis([1.0, 0.0, 0.0], angle)


def rot_y(angle: float) -> Rotation:
    return rotation_about_axis([0.0, 1.0, 0.0], angle)


def rot_z(angle: float) -> Rotation:
    return rotation_about_axis([0.0, 0.0, 1.0], angle)


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniform random rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(m)


def rotation_geodesic_deg(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = 0.5 * (np.trace(a.matrix.T @ b.matrix) - 1.0)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))
