import math

import numpy as np
import pytest

from posefield.geometry import (
    AllWeightsZero,
    DegenerateRotation,
    RigidTransform,
    Rotation,
    SimTransform,
    SvdFactors,
    apply_sim,
    closest_rotation,
    compose_rigid,
    random_rotation,
    rot_z,
    rotation_geodesic_deg,
    svd3,
    weighted_rotation_mean,
)


def homogeneous(rotation, translation, scale=1.0):
    """Independent 4x4 homogeneous-matrix oracle."""
    m = np.eye(4)
    m[:3, :3] = scale * rotation
    m[:3, 3] = translation
    return m


def test_compose_identity():
    ident = RigidTransform.identity()
    out = compose_rigid(ident, ident)
    assert np.allclose(out.as_matrix(), np.eye(4))


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = RigidTransform(random_rotation(rng), rng.normal(size=3))
        out = compose_rigid(g, g.inverse())
        assert np.max(np.abs(out.as_matrix() - np.eye(4))) < 1e-8


def test_compose_matches_homogeneous_oracle():
    a = RigidTransform(rot_z(math.pi / 2), np.array([1.0, 0.0, 0.0]))
    b = RigidTransform(Rotation.identity(), np.array([0.0, 1.0, 0.0]))
    x = np.zeros(3)
    assert np.allclose(b.apply(x), [0.0, 1.0, 0.0])
    expected = (homogeneous(a.rotation.matrix, a.translation) @ homogeneous(np.eye(3), b.translation))[:3, 3]
    got = compose_rigid(a, b).apply(x)
    assert np.allclose(got, expected)
    # Rz(90) maps (0,1,0) to (-1,0,0); adding t gives the origin back.
    assert np.allclose(got, [0.0, 0.0, 0.0], atol=1e-12)

    rng = np.random.default_rng(1)
    for _ in range(30):
        ra, rb = random_rotation(rng), random_rotation(rng)
        ta, tb = rng.normal(size=3), rng.normal(size=3)
        x = rng.normal(size=3)
        ga = RigidTransform(ra, ta)
        gb = RigidTransform(rb, tb)
        oracle = homogeneous(ra.matrix, ta) @ homogeneous(rb.matrix, tb) @ np.append(x, 1.0)
        assert np.allclose(compose_rigid(ga, gb).apply(x), oracle[:3], atol=1e-12)


def test_apply_sim_identity_and_axis_scaling():
    g = SimTransform(Rotation.identity(), 1.0, np.zeros(3))
    assert np.allclose(apply_sim(g, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    g = SimTransform(Rotation.identity(), 2.0, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(apply_sim(g, [1.0, 0.0, 0.0]), [3.0, 0.0, 0.0])


def test_apply_sim_matches_homogeneous_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        g = SimTransform(random_rotation(rng), float(rng.uniform(0.2, 3.0)), rng.normal(size=3))
        x = rng.normal(size=3)
        oracle = homogeneous(g.rotation.matrix, g.translation, g.scale) @ np.append(x, 1.0)
        assert np.max(np.abs(apply_sim(g, x) - oracle[:3])) < 1e-12


def test_sim_linear_determinant_is_scale_cubed():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = SimTransform(random_rotation(rng), float(rng.uniform(0.2, 3.0)), rng.normal(size=3))
        assert abs(abs(np.linalg.det(g.linear())) - g.scale**3) < 1e-8


def test_svd3_reconstructs_random_matrices():
    rng = np.random.default_rng(4)
    for _ in range(200):
        m = rng.normal(size=(3, 3))
        f = svd3(m)
        assert np.max(np.abs(f.reconstruct() - m)) < 1e-7
        assert np.all(np.diff(f.sigma) <= 1e-12)
        assert np.all(f.sigma >= 0.0)
        assert np.max(np.abs(f.u.T @ f.u - np.eye(3))) < 1e-9
        assert np.max(np.abs(f.v.T @ f.v - np.eye(3))) < 1e-9


def test_svd3_matches_lapack_singular_values():
    rng = np.random.default_rng(5)
    for _ in range(100):
        m = rng.normal(size=(3, 3))
        assert np.max(np.abs(svd3(m).sigma - np.linalg.svd(m, compute_uv=False))) < 1e-10


def test_svd3_rank_deficient():
    m = np.outer([1.0, 2.0, 3.0], [0.5, -1.0, 2.0])
    f = svd3(m)
    assert np.max(np.abs(f.reconstruct() - m)) < 1e-7
    assert f.sigma[1] < 1e-12 and f.sigma[2] < 1e-12
    assert np.max(np.abs(f.u.T @ f.u - np.eye(3))) < 1e-9
    assert np.max(np.abs(svd3(np.zeros((3, 3))).sigma)) == 0.0


def test_weighted_rotation_mean_identity():
    rots = [Rotation.identity()] * 5
    mean, f = weighted_rotation_mean(rots, [0.1, 2.0, 0.3, 1.0, 0.6])
    assert np.allclose(mean, np.eye(3))
    assert np.allclose(f.sigma, [1.0, 1.0, 1.0])


def test_weighted_rotation_mean_symmetric_pair():
    # Hand expansion: mean of Rz(+t) and Rz(-t) is diag(cos t, cos t, 1).
    theta = 0.7
    mean, _ = weighted_rotation_mean([rot_z(theta), rot_z(-theta)], [1.0, 1.0])
    expected = np.diag([math.cos(theta), math.cos(theta), 1.0])
    assert np.max(np.abs(mean - expected)) < 1e-12


def test_weighted_rotation_mean_matches_direct_summation():
    rng = np.random.default_rng(6)
    rots = [random_rotation(rng) for _ in range(100)]
    w = rng.uniform(0.0, 1.0, size=100)
    mean, _ = weighted_rotation_mean(rots, w)
    acc = np.zeros((3, 3))
    for r, wi in zip(rots, w):
        acc += wi * r.matrix
    assert np.max(np.abs(mean - acc / w.sum())) < 1e-12


def test_weighted_rotation_mean_scale_invariant_in_weights():
    rng = np.random.default_rng(7)
    rots = [random_rotation(rng) for _ in range(10)]
    w = rng.uniform(0.1, 1.0, size=10)
    m1, _ = weighted_rotation_mean(rots, w)
    m2, _ = weighted_rotation_mean(rots, 37.5 * w)
    assert np.max(np.abs(m1 - m2)) < 1e-12


def test_weighted_rotation_mean_rejects_zero_weights():
    with pytest.raises(AllWeightsZero):
        weighted_rotation_mean([Rotation.identity()], [0.0])


def test_closest_rotation_identity_and_scaling_invariance():
    assert np.allclose(closest_rotation(svd3(np.eye(3))).matrix, np.eye(3))
    r = rot_z(math.radians(30.0))
    got = closest_rotation(svd3(2.0 * r.matrix))
    assert np.max(np.abs(got.matrix - r.matrix)) < 1e-9
    rng = np.random.default_rng(8)
    for _ in range(20):
        m = rng.normal(size=(3, 3))
        a = closest_rotation(svd3(m)).matrix
        b = closest_rotation(svd3(float(rng.uniform(0.1, 10.0)) * m)).matrix
        assert np.max(np.abs(a - b)) < 1e-9


def test_closest_rotation_fixes_rotations():
    rng = np.random.default_rng(9)
    for _ in range(50):
        r = random_rotation(rng)
        assert np.max(np.abs(closest_rotation(svd3(r.matrix)).matrix - r.matrix)) < 1e-9


def test_closest_rotation_minimality_random_sampling():
    # Random-sampling oracle: UV^T beats 1e4 random SO(3) candidates.
    rng = np.random.default_rng(10)
    m = rng.normal(size=(3, 3))
    best = closest_rotation(svd3(m))
    cost_best = np.sum((m - best.matrix) ** 2)
    for _ in range(10_000):
        cand = random_rotation(rng)
        assert cost_best <= np.sum((m - cand.matrix) ** 2) + 1e-12


def test_closest_rotation_degenerate_reflection():
    # A reflection with equal trailing singular values: no unique minimizer.
    with pytest.raises(DegenerateRotation):
        closest_rotation(svd3(np.diag([1.0, 1.0, -1.0])))
    # Distinct singular values with negative det are fine (Kabsch flip).
    r = closest_rotation(svd3(np.diag([3.0, 2.0, -1.0])))
    assert abs(np.linalg.det(r.matrix) - 1.0) < 1e-9


def test_negative_det_means_are_projected_properly():
    rng = np.random.default_rng(11)
    count = 0
    for _ in range(200):
        m = rng.normal(size=(3, 3))
        if np.linalg.det(m) >= 0:
            continue
        count += 1
        f = svd3(m)
        r = closest_rotation(f)
        # Analytic optimum cost via trace identity.
        cost = np.sum((m - r.matrix) ** 2)
        best = np.sum(f.sigma**2) + 3.0 - 2.0 * (f.sigma[0] + f.sigma[1] - f.sigma[2])
        assert abs(cost - best) < 1e-8
    assert count > 10


def test_geodesic_angle():
    assert rotation_geodesic_deg(Rotation.identity(), rot_z(math.radians(40.0))) == pytest.approx(40.0, abs=1e-9)


def test_svd_factors_reconstruct_contract():
    f = SvdFactors(np.eye(3), np.array([2.0, 1.0, 0.5]), np.eye(3))
    assert np.allclose(f.reconstruct(), np.diag([2.0, 1.0, 0.5]))
