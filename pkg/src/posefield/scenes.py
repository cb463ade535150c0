"""Synthetic deforming scenes with analytic ground truth: masks, optical
flow, per-frame poses and surface point sets, written to a plain-file
directory layout (text manifest, PGM masks, raw float32 flow, text
points) that parses with no dependencies.

Scene kinds
-----------
rigid        one asymmetric body under a smooth rigid trajectory
two_bone     two capsules hinged at the origin, the second sweeping a joint angle
occlusion    the rigid body partially hidden by a moving foreground sphere
multi_scale  two individuals of the same shape at different uniform scales

Frames are tracked per individual: track index t = individual * frames + step.
Generation and evaluation are embarrassingly parallel over frames; here
they run sequentially for determinism.
"""

from __future__ import annotations

import os

import numpy as np

from .geometry import RigidTransform, Rotation, rotation_about_axis
from .rendering import Camera

CAMERA_DISTANCE = 4.2
NEAR, FAR = 2.4, 6.0
CM_PER_UNIT = 100.0
MARCH_STEPS = 192
SELF_CHECK_PX = 0.5


class InvalidSpec(ValueError):
    """The scene description is malformed or of an unknown kind."""


DEFAULT_SPEC = {
    "kind": "rigid",
    "shape": "blob",
    "frames": 12,
    "width": 64,
    "height": 64,
    "textured": False,
    "gt_points": 10_000,
    "motion_deg": 25.0,
    "translation_amp": 0.22,
    "joint_deg": 60.0,
    "scales": None,  # multi_scale default set below
    "focal_scale": None,
}

BLOB_SPHERES = np.array(
    [
        [0.0, 0.0, 0.0, 0.62],
        [0.55, 0.05, 0.1, 0.36],
        [-0.18, 0.5, 0.12, 0.27],
    ]
)

TWO_BONE_CAPSULES = np.array(
    [
        [-0.85, 0.0, 0.0, 0.0, 0.0, 0.0, 0.30],  # bone A: a, b, radius
        [0.0, 0.0, 0.0, 0.80, 0.0, 0.0, 0.24],  # bone B (sweeps the joint)
    ]
)

TEXTURE_FREQS = np.array([[3.1, 0.7, 1.3], [0.9, 4.3, 1.1], [1.5, 0.8, 5.7]])
TEXTURE_PHASES = np.array([0.0, 1.3, 2.1])


def albedo(points) -> np.ndarray:
    """Smooth position-dependent surface color in [0.05, 0.95]."""
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    return 0.5 + 0.45 * np.sin(x @ TEXTURE_FREQS.T + TEXTURE_PHASES)


# ---------------------------------------------------------------------------
# analytic shapes


def sphere_union_sdf(points, spheres) -> np.ndarray:
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    dists = [np.linalg.norm(x - s[:3], axis=1) - s[3] for s in spheres]
    return np.min(np.stack(dists, axis=0), axis=0)


def capsule_sdf(points, a, b, radius) -> np.ndarray:
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    ab = np.asarray(b) - np.asarray(a)
    denom = float(ab @ ab)
    t = np.clip(((x - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(x.shape[0])
    closest = np.asarray(a) + t[:, None] * ab
    return np.linalg.norm(x - closest, axis=1) - radius


def sample_sphere_union(spheres, count, rng) -> np.ndarray:
    """Uniform-ish surface samples of a union of spheres (area weighted,
    points swallowed by another sphere rejected)."""
    weights = spheres[:, 3] ** 2
    weights = weights / weights.sum()
    out = []
    have = 0
    while have < count:
        idx = rng.choice(len(spheres), size=2 * count, p=weights)
        dirs = rng.normal(size=(2 * count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = spheres[idx, :3] + spheres[idx, 3:4] * dirs
        keep = np.ones(pts.shape[0], dtype=bool)
        for j, s in enumerate(spheres):
            inside = np.linalg.norm(pts - s[:3], axis=1) - s[3] < -1e-9
            keep &= ~(inside & (idx != j))
        pts = pts[keep]
        out.append(pts)
        have += pts.shape[0]
    return np.concatenate(out, axis=0)[:count]


def sample_capsule(a, b, radius, count, rng) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    axis_n = axis / length if length > 0 else np.array([1.0, 0.0, 0.0])
    n1 = np.cross(axis_n, [0.0, 0.0, 1.0])
    if np.linalg.norm(n1) < 1e-6:
        n1 = np.cross(axis_n, [0.0, 1.0, 0.0])
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(axis_n, n1)
    area_cyl = 2 * np.pi * radius * length
    area_caps = 4 * np.pi * radius**2
    p_cyl = area_cyl / (area_cyl + area_caps)
    pts = np.empty((count, 3))
    on_cyl = rng.uniform(size=count) < p_cyl
    n_cyl = int(on_cyl.sum())
    z = rng.uniform(0.0, length, size=n_cyl)
    phi = rng.uniform(0.0, 2 * np.pi, size=n_cyl)
    pts[on_cyl] = a + z[:, None] * axis_n + radius * (
        np.cos(phi)[:, None] * n1 + np.sin(phi)[:, None] * n2
    )
    n_cap = count - n_cyl
    dirs = rng.normal(size=(n_cap, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    towards_b = dirs @ axis_n > 0
    centers = np.where(towards_b[:, None], b, a)
    pts[~on_cyl] = centers + radius * dirs
    return pts


def sample_two_bone_rest(capsules, count, rng):
    """Rest-shape surface points with per-point bone ownership labels."""
    pts_a = sample_capsule(capsules[0, :3], capsules[0, 3:6], capsules[0, 6], count, rng)
    pts_b = sample_capsule(capsules[1, :3], capsules[1, 3:6], capsules[1, 6], count, rng)
    keep_a = capsule_sdf(pts_a, capsules[1, :3], capsules[1, 3:6], capsules[1, 6]) > 1e-9
    keep_b = capsule_sdf(pts_b, capsules[0, :3], capsules[0, 3:6], capsules[0, 6]) > 1e-9
    pts = np.concatenate([pts_a[keep_a], pts_b[keep_b]], axis=0)
    owner = np.concatenate([np.zeros(keep_a.sum(), int), np.ones(keep_b.sum(), int)])
    order = rng.permutation(pts.shape[0])[:count]
    return pts[order], owner[order]


# ---------------------------------------------------------------------------
# spec handling and trajectories


def validate_spec(spec: dict) -> dict:
    merged = dict(DEFAULT_SPEC)
    unknown = set(spec) - set(DEFAULT_SPEC) - {"seed"}
    if unknown:
        raise InvalidSpec(f"unknown scene keys: {sorted(unknown)}")
    merged.update(spec)
    if merged["kind"] not in ("rigid", "two_bone", "occlusion", "multi_scale"):
        raise InvalidSpec(f"unknown scene kind {merged['kind']!r}")
    if merged["shape"] not in ("blob", "sphere"):
        raise InvalidSpec(f"unknown shape {merged['shape']!r}")
    if int(merged["frames"]) < 2:
        raise InvalidSpec("a scene needs at least two frames")
    if merged["scales"] is None:
        merged["scales"] = [0.8, 1.25] if merged["kind"] == "multi_scale" else [1.0]
    if merged["focal_scale"] is None:
        merged["focal_scale"] = 0.72 if merged["kind"] == "multi_scale" else 1.15
    return merged


def scene_camera(width, height, focal_scale) -> Camera:
    focal = focal_scale * width
    k = np.array([[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]])
    ext = np.concatenate([np.eye(3), np.array([[0.0], [0.0], [CAMERA_DISTANCE]])], axis=1)
    return Camera(k @ ext, width, height)


def _placements(spec, individual, rng):
    """Smooth per-step world placements (rotation, translation) of one body."""
    frames = int(spec["frames"])
    amp = np.radians(float(spec["motion_deg"]))
    tamp = float(spec["translation_amp"])
    axis1 = np.array([0.3, 1.0, 0.2])
    axis2 = np.array([1.0, 0.1, 0.4])
    base_offset = np.zeros(3)
    if spec["kind"] == "multi_scale":
        base_offset = np.array([-1.05 + 2.1 * individual, 0.0, 0.0])
        amp, tamp = np.radians(8.0), 0.1
    if spec["kind"] == "occlusion":
        amp, tamp = np.radians(10.0), 0.08
    phase = 0.8 * individual
    out = []
    for s in range(frames):
        u = 2 * np.pi * s / frames
        r1 = rotation_about_axis(axis1, amp * np.sin(u + phase))
        r2 = rotation_about_axis(axis2, 0.6 * amp * np.cos(1.7 * u + phase))
        rot = Rotation(r1.matrix @ r2.matrix)
        trans = base_offset + tamp * np.array(
            [np.sin(u + 0.3 + phase), np.cos(2 * u + phase), 0.5 * np.sin(1.3 * u)]
        )
        out.append(RigidTransform(rot, trans))
    return out


def _joint_angles(spec):
    frames = int(spec["frames"])
    amp = np.radians(float(spec["joint_deg"]))
    return amp * np.sin(2 * np.pi * np.arange(frames) / frames + 0.4)


def _occluder_centers(spec):
    frames = int(spec["frames"])
    u = 2 * np.pi * np.arange(frames) / frames
    return np.stack([0.85 * np.sin(u + 0.9), 0.15 * np.cos(u), -1.9 * np.ones(frames)], axis=1)


OCCLUDER_RADIUS = 0.62


# ---------------------------------------------------------------------------
# generation


class _TrackGeometry:
    """Closures tying one track's camera-space geometry to the canonical shape."""

    def __init__(self, spec, placement, scale, joint_angle, spheres, capsules):
        self.spec = spec
        self.placement = placement  # canonical (scaled) -> camera
        self.scale = scale
        self.joint = joint_angle
        self.spheres = spheres
        self.capsules = capsules

    def canonical_sdf(self, pts):
        if self.spec["kind"] == "two_bone":
            a = capsule_sdf(pts, self.capsules[0, :3], self.capsules[0, 3:6], self.capsules[0, 6])
            b = capsule_sdf(pts, self.capsules[1, :3], self.capsules[1, 3:6], self.capsules[1, 6])
            return np.minimum(a, b)
        return sphere_union_sdf(pts, self.spheres)

    def camera_sdf(self, pts):
        local = (np.asarray(pts) - self.placement.translation) @ self.placement.rotation.matrix
        if self.spec["kind"] == "two_bone":
            a = capsule_sdf(local, self.capsules[0, :3], self.capsules[0, 3:6], self.capsules[0, 6])
            rot = rotation_about_axis([0, 0, 1.0], -self.joint).matrix
            b = capsule_sdf(local @ rot.T, self.capsules[1, :3], self.capsules[1, 3:6], self.capsules[1, 6])
            return np.minimum(a, b)
        return self.scale * sphere_union_sdf(local / self.scale, self.spheres)

    def canonical_to_camera(self, pts, owner=None):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if self.spec["kind"] == "two_bone":
            rot = rotation_about_axis([0, 0, 1.0], self.joint).matrix
            moved = np.where((owner == 1)[:, None], pts @ rot.T, pts)
        else:
            moved = self.scale * pts
        return moved @ self.placement.rotation.matrix.T + self.placement.translation

    def camera_to_canonical(self, pts):
        """Material inverse; returns (canonical points, owner labels)."""
        local = (np.asarray(pts) - self.placement.translation) @ self.placement.rotation.matrix
        if self.spec["kind"] == "two_bone":
            rot = rotation_about_axis([0, 0, 1.0], -self.joint).matrix
            unrotated = local @ rot.T
            a = capsule_sdf(local, self.capsules[0, :3], self.capsules[0, 3:6], self.capsules[0, 6])
            b = capsule_sdf(unrotated, self.capsules[1, :3], self.capsules[1, 3:6], self.capsules[1, 6])
            owner = (b < a).astype(int)
            canon = np.where((owner == 1)[:, None], unrotated, local)
            return canon, owner
        return local / self.scale, np.zeros(local.shape[0], int)

    def true_pose(self) -> RigidTransform:
        """Root pose camera -> canonical (the rigid part; scale is separate)."""
        return self.placement.inverse()


def _march_hits(camera, sdf_fn, pixels):
    origin, dirs = camera.ray(pixels)
    tvals = np.linspace(NEAR, FAR, MARCH_STEPS)
    pts = origin[None, None, :] + tvals[None, :, None] * dirs[:, None, :]
    vals = sdf_fn(pts.reshape(-1, 3)).reshape(pixels.shape[0], MARCH_STEPS)
    inside = vals < 0.0
    hit = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    lo = tvals[np.maximum(first - 1, 0)]
    hi = tvals[first]
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        mv = sdf_fn(origin[None, :] + mid[:, None] * dirs)
        neg = mv < 0
        hi = np.where(neg, mid, hi)
        lo = np.where(neg, lo, mid)
    depth = 0.5 * (lo + hi)
    return hit, origin[None, :] + depth[:, None] * dirs, dirs


def generate_scene(spec: dict, seed: int, out_dir: str):
    """Write a deterministic scene directory and return the loaded scene."""
    spec = validate_spec(spec)
    rng = np.random.default_rng(seed)
    frames = int(spec["frames"])
    width, height = int(spec["width"]), int(spec["height"])
    individuals = len(spec["scales"])
    camera = scene_camera(width, height, spec["focal_scale"])
    spheres = BLOB_SPHERES if spec["shape"] == "blob" else np.array([[0.0, 0.0, 0.0, 1.0]])
    capsules = TWO_BONE_CAPSULES
    joints = _joint_angles(spec) if spec["kind"] == "two_bone" else np.zeros(frames)
    occluders = _occluder_centers(spec) if spec["kind"] == "occlusion" else None

    if spec["kind"] == "two_bone":
        canon_pts, canon_owner = sample_two_bone_rest(capsules, int(spec["gt_points"]), rng)
    else:
        canon_pts = sample_sphere_union(spheres, int(spec["gt_points"]), rng)
        canon_owner = np.zeros(canon_pts.shape[0], int)

    os.makedirs(out_dir, exist_ok=True)
    uu, vv = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    all_pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)

    tracks = []
    for i in range(individuals):
        placements = _placements(spec, i, rng)
        for s in range(frames):
            tracks.append(
                _TrackGeometry(spec, placements[s], float(spec["scales"][i]), joints[s], spheres, capsules)
            )

    pose_lines = []
    for i in range(individuals):
        for s in range(frames):
            geo = tracks[i * frames + s]
            g = geo.true_pose()
            r = g.rotation.matrix.reshape(-1)
            pose_lines.append(
                f"{i} {s} " + " ".join(f"{v:.12g}" for v in r) + " "
                + " ".join(f"{v:.12g}" for v in g.translation) + f" {geo.scale:.12g}"
            )
    _write_text(os.path.join(out_dir, "poses.txt"), "\n".join(pose_lines) + "\n")
    _write_text(
        os.path.join(out_dir, "points_canonical.txt"),
        "\n".join(" ".join(f"{v:.8f}" for v in p) for p in canon_pts) + "\n",
    )

    masks_cache = {}
    hits_cache = {}
    for i in range(individuals):
        for s in range(frames):
            track = i * frames + s
            geo = tracks[track]
            hit, hit_pts, dirs = _march_hits(camera, geo.camera_sdf, all_pixels)
            full_mask = hit.reshape(height, width)
            visible = full_mask.copy()
            if occluders is not None:
                occ_sdf = lambda p, c=occluders[s]: np.linalg.norm(
                    np.asarray(p).reshape(-1, 3) - c, axis=1
                ) - OCCLUDER_RADIUS
                occ_hit, _, _ = _march_hits(camera, occ_sdf, all_pixels)
                visible &= ~occ_hit.reshape(height, width)
            masks_cache[track] = (visible, full_mask)
            hits_cache[track] = (hit, hit_pts)
            _write_pgm(os.path.join(out_dir, f"mask_i{i}_f{s:04d}.pgm"), visible)
            if occluders is not None:
                _write_pgm(os.path.join(out_dir, f"fullmask_i{i}_f{s:04d}.pgm"), full_mask)

            cam_pts = geo.canonical_to_camera(canon_pts, canon_owner)
            _write_text(
                os.path.join(out_dir, f"points_i{i}_f{s:04d}.txt"),
                "\n".join(" ".join(f"{v:.8f}" for v in p) for p in cam_pts) + "\n",
            )
            if spec["textured"]:
                img = np.zeros((height, width, 3))
                if hit.any():
                    canon, _ = geo.camera_to_canonical(hit_pts[hit])
                    img.reshape(-1, 3)[hit] = albedo(canon)
                _write_ppm(os.path.join(out_dir, f"color_i{i}_f{s:04d}.ppm"), img)

    # Flow rasters: forward flow step s -> s+1 per individual.
    for i in range(individuals):
        for s in range(frames - 1):
            track = i * frames + s
            geo, geo_next = tracks[track], tracks[track + 1]
            hit, hit_pts = hits_cache[track]
            flow = np.zeros((height, width, 2), dtype=np.float32)
            if hit.any():
                canon, owner = geo.camera_to_canonical(hit_pts[hit])
                nxt = geo_next.canonical_to_camera(canon, owner)
                pix_now = all_pixels[hit]
                pix_next, depth = camera.project(nxt)
                flow.reshape(-1, 2)[hit] = (pix_next - pix_now).astype(np.float32)
                # Generation-time self check: reprojection consistency.
                err = np.max(np.abs(pix_now + flow.reshape(-1, 2)[hit] - pix_next))
                if err > SELF_CHECK_PX:
                    raise RuntimeError(f"flow self-check failed: {err:.3f} px")
            with open(os.path.join(out_dir, f"flow_i{i}_f{s:04d}.bin"), "wb") as fh:
                fh.write(flow.astype("<f4").tobytes())

    manifest = {
        "kind": spec["kind"],
        "shape": spec["shape"],
        "frames": frames,
        "individuals": individuals,
        "width": width,
        "height": height,
        "near": NEAR,
        "far": FAR,
        "cm_per_unit": CM_PER_UNIT,
        "seed": seed,
        "textured": int(bool(spec["textured"])),
        "camera": " ".join(f"{v:.12g}" for v in camera.projection.reshape(-1)),
        "scales": " ".join(f"{v:.12g}" for v in spec["scales"]),
        "spheres": " ; ".join(" ".join(f"{v:.12g}" for v in s) for s in spheres),
        "capsules": " ; ".join(" ".join(f"{v:.12g}" for v in c) for c in capsules),
        "joint_angles": " ".join(f"{v:.12g}" for v in joints),
    }
    if occluders is not None:
        manifest["occluder_radius"] = OCCLUDER_RADIUS
        manifest["occluder_centers"] = " ; ".join(
            " ".join(f"{v:.12g}" for v in c) for c in occluders
        )
    _write_text(
        os.path.join(out_dir, "manifest.txt"),
        "\n".join(f"{k} = {v}" for k, v in manifest.items()) + "\n",
    )
    return LoadedScene(out_dir)


# ---------------------------------------------------------------------------
# plain-file io


def _write_text(path, content):
    with open(path, "w", newline="\n") as fh:
        fh.write(content)


def _write_pgm(path, mask):
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("expected a binary PGM (P5) raster")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    raster = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return raster > 127


def _write_ppm(path, image):
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError("expected a binary PPM (P6) raster")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    raster = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return raster.astype(float) / 255.0


class LoadedScene:
    """Scene directory parsed back into arrays and analytic closures."""

    def __init__(self, path):
        self.path = path
        manifest = {}
        with open(os.path.join(path, "manifest.txt")) as fh:
            for line in fh:
                if "=" in line:
                    key, val = line.split("=", 1)
                    manifest[key.strip()] = val.strip()
        self.kind = manifest["kind"]
        self.shape = manifest.get("shape", "blob")
        self.frames_per_individual = int(manifest["frames"])
        self.individuals = int(manifest["individuals"])
        self.width = int(manifest["width"])
        self.height = int(manifest["height"])
        self.near = float(manifest["near"])
        self.far = float(manifest["far"])
        self.cm_per_unit = float(manifest["cm_per_unit"])
        self.textured = bool(int(manifest.get("textured", "0")))
        proj = np.array([float(v) for v in manifest["camera"].split()]).reshape(3, 4)
        self._camera = Camera(proj, self.width, self.height)
        self.scales = np.array([float(v) for v in manifest["scales"].split()])
        self.spheres = np.array(
            [[float(v) for v in s.split()] for s in manifest["spheres"].split(";")]
        )
        self.capsules = np.array(
            [[float(v) for v in s.split()] for s in manifest["capsules"].split(";")]
        )
        self.joint_angles = np.array([float(v) for v in manifest["joint_angles"].split()])
        self.occluder_centers = None
        if "occluder_centers" in manifest:
            self.occluder_centers = np.array(
                [[float(v) for v in s.split()] for s in manifest["occluder_centers"].split(";")]
            )
            self.occluder_radius = float(manifest["occluder_radius"])

        self._poses = {}
        self._track_scale = {}
        with open(os.path.join(path, "poses.txt")) as fh:
            for line in fh:
                vals = line.split()
                if len(vals) != 15:
                    continue
                i, s = int(vals[0]), int(vals[1])
                nums = [float(v) for v in vals[2:]]
                rot = Rotation(np.array(nums[:9]).reshape(3, 3))
                track = i * self.frames_per_individual + s
                self._poses[track] = RigidTransform(rot, np.array(nums[9:12]))
                self._track_scale[track] = nums[12]
        self._canonical_points = np.loadtxt(os.path.join(path, "points_canonical.txt"))
        self._mask_cache = {}
        self._points_cache = {}
        self._flow_cache = {}
        self._color_cache = {}

    # -- indexing ------------------------------------------------------------

    @property
    def num_tracks(self) -> int:
        return self.individuals * self.frames_per_individual

    def track_of(self, individual, step) -> int:
        return individual * self.frames_per_individual + step

    def individual_of(self, track) -> int:
        return track // self.frames_per_individual

    def step_of(self, track) -> int:
        return track % self.frames_per_individual

    def next_frame(self, track):
        if self.step_of(track) + 1 < self.frames_per_individual:
            return track + 1
        return None

    # -- per-track data ---------------------------------------------------------

    def camera(self, track) -> Camera:
        return self._camera

    def visible_mask(self, track) -> np.ndarray:
        if track not in self._mask_cache:
            i, s = self.individual_of(track), self.step_of(track)
            self._mask_cache[track] = read_pgm(os.path.join(self.path, f"mask_i{i}_f{s:04d}.pgm"))
        return self._mask_cache[track]

    def full_mask(self, track) -> np.ndarray:
        i, s = self.individual_of(track), self.step_of(track)
        full = os.path.join(self.path, f"fullmask_i{i}_f{s:04d}.pgm")
        if os.path.exists(full):
            return read_pgm(full)
        return self.visible_mask(track)

    def flow_map(self, track):
        if self.next_frame(track) is None:
            return None
        if track not in self._flow_cache:
            i, s = self.individual_of(track), self.step_of(track)
            fname = os.path.join(self.path, f"flow_i{i}_f{s:04d}.bin")
            raw = np.fromfile(fname, dtype="<f4")
            self._flow_cache[track] = raw.reshape(self.height, self.width, 2).astype(float)
        return self._flow_cache[track]

    def color_image(self, track):
        if not self.textured:
            return None
        if track not in self._color_cache:
            i, s = self.individual_of(track), self.step_of(track)
            self._color_cache[track] = read_ppm(os.path.join(self.path, f"color_i{i}_f{s:04d}.ppm"))
        return self._color_cache[track]

    def gt_pose(self, track) -> RigidTransform:
        return self._poses[track]

    def gt_scale(self, track) -> float:
        return self._track_scale[track]

    def gt_registration_scale(self, track) -> float:
        """Camera-to-canonical scale factor the field should recover."""
        return 1.0 / self._track_scale[track]

    def gt_points_camera(self, track) -> np.ndarray:
        if track not in self._points_cache:
            i, s = self.individual_of(track), self.step_of(track)
            self._points_cache[track] = np.loadtxt(
                os.path.join(self.path, f"points_i{i}_f{s:04d}.txt")
            )
        return self._points_cache[track]

    def gt_points_canonical(self) -> np.ndarray:
        return self._canonical_points

    def canonical_sdf(self, pts) -> np.ndarray:
        if self.kind == "two_bone":
            a = capsule_sdf(pts, self.capsules[0, :3], self.capsules[0, 3:6], self.capsules[0, 6])
            b = capsule_sdf(pts, self.capsules[1, :3], self.capsules[1, 3:6], self.capsules[1, 6])
            return np.minimum(a, b)
        return sphere_union_sdf(pts, self.spheres)

    def diameter(self) -> float:
        ext = self._canonical_points.max(axis=0) - self._canonical_points.min(axis=0)
        return float(np.linalg.norm(ext))
