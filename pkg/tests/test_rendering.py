import numpy as np
import pytest

from posefield import autodiff as ad
from posefield.autodiff import Tape, Tensor, backward
from posefield.fields import ModelConfig, SceneModel
from posefield.geometry import RigidTransform, rot_y
from posefield.rendering import (
    BehindCamera,
    Camera,
    project_points,
    project_surface_point,
    render_pixels,
    sample_ray,
    visibility_weights,
)


def simple_camera(width=32, height=32, focal=40.0, distance=4.0):
    k = np.array([[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]])
    ext = np.concatenate([np.eye(3), np.array([[0.0], [0.0], [distance]])], axis=1)
    return Camera(k @ ext, width, height)


def tiny_model(frames=1, **kw):
    cfg = dict(
        frames=frames, levels=2, control_points=3, pose_layers=2, pose_width=8,
        pyramid_width=8, sdf_layers=2, sdf_width=8, color_layers=2, color_width=8,
        skin_decoder_width=8, seed=0,
    )
    cfg.update(kw)
    return SceneModel(ModelConfig(**cfg))


def test_sample_ray_bin_midpoints():
    cam = simple_camera()
    s = sample_ray(cam, [[15.5, 15.5]], 1.0, 3.0, 2)
    assert np.allclose(s.depths, [[1.5, 2.5]])
    assert np.all(s.intervals > 0)


def test_sample_ray_depths_within_bounds():
    cam = simple_camera()
    rng = np.random.default_rng(0)
    s = sample_ray(cam, rng.uniform(0, 31, size=(10, 2)), 2.0, 6.0, 16, rng=rng)
    assert np.all(s.depths >= 2.0) and np.all(s.depths <= 6.0)
    assert np.all(np.diff(s.depths, axis=1) > 0)


def test_ray_direction_back_projection_oracle():
    # Five hand-built cameras: points along the ray reproject onto the pixel.
    rng = np.random.default_rng(1)
    for i in range(5):
        focal = 20.0 + 10.0 * i
        cam = simple_camera(width=24 + 2 * i, height=20 + 3 * i, focal=focal, distance=3.0 + 0.5 * i)
        pixels = rng.uniform(2, 18, size=(4, 2))
        s = sample_ray(cam, pixels, 1.0, 5.0, 4)
        pts = s.points.reshape(-1, 3)
        uv, depth = cam.project(pts)
        assert np.all(depth > 0)
        assert np.max(np.abs(uv - np.repeat(pixels, 4, axis=0))) < 1e-9


def test_visibility_weights_zero_density():
    tau = visibility_weights(np.zeros(8), np.ones(8))
    assert np.allclose(tau.values, 0.0)


def test_visibility_weights_opaque_first_sample():
    sigma = np.array([1e6, 0.5, 0.5])
    tau = visibility_weights(sigma, np.ones(3)).values
    assert tau[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(tau[1:] < 1e-12)


def test_visibility_weights_closed_form_pair():
    tau = visibility_weights(np.array([0.5, 0.5]), np.array([1.0, 1.0])).values
    e = np.exp(-0.5)
    assert tau[0] == pytest.approx(1.0 - e, rel=1e-12)
    assert tau[1] == pytest.approx(e * (1.0 - e), rel=1e-12)
    assert tau[0] == pytest.approx(0.3935, abs=5e-5)
    assert tau[1] == pytest.approx(0.2387, abs=5e-5)


def test_visibility_telescoping_identity():
    rng = np.random.default_rng(2)
    sigma = rng.uniform(0.0, 1.0, size=(100, 16))
    delta = rng.uniform(0.05, 2.0, size=(100, 16))
    tau = visibility_weights(sigma, delta).values
    lhs = tau.sum(axis=1)
    rhs = 1.0 - np.exp(-(sigma * delta).sum(axis=1))
    assert np.max(np.abs(lhs - rhs)) < 1e-9
    assert np.all(lhs <= 1.0 + 1e-6) and np.all(tau >= 0.0)


def test_opacity_monotone_in_density():
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0.0, 0.6, size=12)
    delta = rng.uniform(0.1, 1.0, size=12)
    base = visibility_weights(sigma, delta).values.sum()
    for i in range(12):
        bumped = sigma.copy()
        bumped[i] += 0.2
        assert visibility_weights(bumped, delta).values.sum() >= base - 1e-12


def test_visibility_gradient_matches_fd():
    rng = np.random.default_rng(4)
    sigma0 = rng.uniform(0.1, 0.9, size=10)
    delta = rng.uniform(0.2, 1.0, size=10)

    def value(s):
        return float(visibility_weights(Tensor(s), Tensor(delta)).values @ np.arange(10.0))

    leaf = Tensor(sigma0, requires_grad=True)
    with Tape() as tape:
        tau = visibility_weights(leaf, Tensor(delta))
        loss = ad.tensor_sum(ad.mul(tau, np.arange(10.0)))
        backward(tape, loss)
    h = 1e-6
    for i in range(10):
        up, down = sigma0.copy(), sigma0.copy()
        up[i] += h
        down[i] -= h
        fd = (value(up) - value(down)) / (2 * h)
        rel = abs(leaf.grad[i] - fd) / max(abs(fd), 1e-9)
        assert rel < 1e-5


def test_render_zero_density_black():
    model = tiny_model()
    last = model.mlp_sdf.n_layers - 1
    model.params[f"sdf.b{last}"] = np.array([50.0])  # push density to zero
    cam = simple_camera()
    s = sample_ray(cam, [[15.5, 15.5]], 3.0, 5.0, 8)
    p = model.bind()
    tau, opacity, color = render_pixels(model, p, s, 0)
    assert opacity.values[0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(color.values, 0.0, atol=1e-12)


def test_render_opaque_first_sample_formula():
    # Saturated first sample: tau = (~1, ~0, ...); red surface renders red.
    tau = visibility_weights(np.array([1e6, 0.3, 0.3]), np.ones(3)).values
    red = np.array([[1.0, 0.0, 0.0], [0.2, 0.7, 0.1], [0.3, 0.3, 0.3]])
    color = tau @ red
    assert tau[0] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(color, [1.0, 0.0, 0.0], atol=1e-12)
    assert tau.sum() == pytest.approx(1.0, abs=1e-12)


def test_render_dense_sphere_is_red_dominant():
    model = tiny_model()
    # Saturate the red channel of the color head and densify the sphere.
    model.params["log_beta"] = np.array([np.log(1e-3)])
    last = model.mlp_color.n_layers - 1
    model.params[f"color.b{last}"] = np.array([30.0, -30.0, -30.0])
    cam = simple_camera(focal=40.0, distance=4.0)
    s = sample_ray(cam, [[15.5, 15.5]], 1.0, 7.0, 256)
    p = model.bind()
    tau, opacity, color = render_pixels(model, p, s, 0)
    # Density is capped at 1, so a diameter-2 body tops out near 1 - e^-2.
    assert opacity.values[0] == pytest.approx(1.0 - np.exp(-2.0), abs=0.01)
    assert color.values[0, 0] > 0.8 and color.values[0, 1] < 0.01


def test_project_principal_point():
    model = tiny_model()
    cam = simple_camera()
    # Canonical origin sits on the optical axis with identity pose.
    pix = project_surface_point(model, cam, np.zeros((1, 3)), 0)
    assert np.allclose(pix, [[15.5, 15.5]], atol=1e-9)


def test_project_matches_homogeneous_oracle():
    model = tiny_model()
    cam = simple_camera()
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.5, 0.5, size=(6, 3))
    pix = project_surface_point(model, cam, pts, 0)
    for i in range(6):
        hom = cam.projection @ np.append(pts[i], 1.0)
        assert np.allclose(pix[i], hom[:2] / hom[2], atol=1e-9)


def test_project_translation_parallax():
    cam = simple_camera()
    base, _ = cam.project(np.array([[0.0, 0.0, 0.0]]))
    for shift, axis in [(0.5, 0), (-0.3, 1), (0.2, 0)]:
        model = tiny_model()
        g = RigidTransform(rot_y(0.0), np.zeros(3))
        # Pose translates canonical content; the projection shifts opposite.
        model.init_poses[0] = RigidTransform(g.rotation, np.array([shift if axis == 0 else 0.0,
                                                                   shift if axis == 1 else 0.0, 0.0]))
        pix = project_surface_point(model, cam, np.zeros((1, 3)), 0)
        moved = pix[0, axis] - base[0, axis]
        expected = -shift * cam.projection[axis, axis] / 4.0
        assert moved == pytest.approx(expected, rel=1e-9)


def test_project_behind_camera():
    model = tiny_model()
    cam = simple_camera(distance=4.0)
    with pytest.raises(BehindCamera):
        project_surface_point(model, cam, np.array([[0.0, 0.0, -10.0]]), 0)


def test_project_points_gradient_flows():
    cam = simple_camera()
    pts = Tensor(np.array([[0.2, -0.1, 0.4]]), requires_grad=True)
    with Tape() as tape:
        uv, depth = project_points(cam, pts)
        backward(tape, ad.norm_l2_sq(uv))
    assert pts.grad is not None and np.all(np.isfinite(pts.grad))
