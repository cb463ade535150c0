"""Binary little-endian PLY reading and writing, plus mesh extraction
from the canonical signed-distance field via marching cubes.
"""

from __future__ import annotations

import numpy as np


class EmptyMesh(RuntimeError):
    """The signed-distance field has no zero crossing inside the export box."""


def write_ply_points(path, points):
    """Point cloud as binary_little_endian PLY with float32 coordinates."""
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def write_ply_mesh(path, vertices, faces):
    """Triangle mesh as binary_little_endian PLY (float32 / int32)."""
    verts = np.ascontiguousarray(np.asarray(vertices, dtype="<f4").reshape(-1, 3))
    tris = np.ascontiguousarray(np.asarray(faces, dtype="<i4").reshape(-1, 3))
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {verts.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {tris.shape[0]}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    counts = np.full((tris.shape[0], 1), 3, dtype=np.uint8)
    body = b"".join(
        counts[i].tobytes() + tris[i].tobytes() for i in range(tris.shape[0])
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(body)


def read_ply(path):
    """Read the PLY files written here; returns (vertices, faces or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
        raise ValueError("unsupported PLY header")
    n_vertex = n_face = 0
    for line in header:
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
    offset = end
    verts = np.frombuffer(data, dtype="<f4", count=3 * n_vertex, offset=offset).reshape(n_vertex, 3)
    offset += 12 * n_vertex
    faces = None
    if n_face:
        faces = np.empty((n_face, 3), dtype=np.int32)
        for i in range(n_face):
            count = data[offset]
            if count != 3:
                raise ValueError("only triangle faces supported")
            faces[i] = np.frombuffer(data, dtype="<i4", count=3, offset=offset + 1)
            offset += 1 + 12
    return verts.copy(), faces


def sdf_grid(model, resolution=128, box=1.6, chunk=65536):
    """Dense signed-distance samples on a cubic lattice."""
    axis = np.linspace(-box, box, resolution)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    vals = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        vals[start : start + chunk] = model.sdf(pts[start : start + chunk])
    return vals.reshape(resolution, resolution, resolution), axis


def extract_mesh(model, resolution=128, box=1.6):
    """Marching-cubes triangulation of the canonical zero level set."""
    from skimage import measure

    volume, axis = sdf_grid(model, resolution=resolution, box=box)
    if volume.min() > 0.0 or volume.max() < 0.0:
        raise EmptyMesh("signed distance field has no zero crossing in the box")
    spacing = (axis[1] - axis[0],) * 3
    verts, faces, _, _ = measure.marching_cubes(volume, level=0.0, spacing=spacing)
    verts = verts + np.array([axis[0]] * 3)
    return verts, faces


def export_mesh(model, path, resolution=128, box=1.6):
    verts, faces = extract_mesh(model, resolution=resolution, box=box)
    write_ply_mesh(path, verts, faces)
    return verts, faces


def export_pointcloud(model, path, count=10_000, seed=0):
    from .buffers import sample_canonical_surface

    pts = sample_canonical_surface(model, count, np.random.default_rng(seed))
    write_ply_points(path, pts)
    return pts
