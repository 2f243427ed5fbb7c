"""Procedural meshes used as test fixtures and verification targets."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def unit_triangle() -> Mesh:
    """Right triangle (0,0,0), (1,0,0), (0,1,0)."""
    return Mesh(
        np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        np.array([[0, 1, 2]]),
    )


def square_pair() -> Mesh:
    """Unit square split by its diagonal into two right triangles."""
    return Mesh(
        np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]),
        np.array([[0, 1, 2], [0, 2, 3]]),
    )


def tetrahedron() -> Mesh:
    """Regular tetrahedron, outward CCW orientation."""
    v = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected to a sphere, outward CCW faces.

    Vertex count is 10 * 4**subdivisions + 2 (162 at 2, 642 at 3, 2562 at 4).
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        vlist = list(verts)
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = vlist[a] + vlist[b]
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return Mesh(verts * radius, faces)


def torus(n_major: int = 24, n_minor: int = 12, major_radius: float = 1.0,
          minor_radius: float = 0.35) -> Mesh:
    """Parametric torus with a regular triangulated grid (closed surface)."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major_radius + minor_radius * np.cos(vv)
    verts = np.stack([r * np.cos(uu), r * np.sin(uu),
                      minor_radius * np.sin(vv)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [[a, b, c], [a, c, d]]
    return Mesh(verts, np.array(faces, dtype=np.int64))


def grid_patch(nx: int = 8, ny: int = 8, scale: float = 1.0,
               slant: float = 0.0) -> Mesh:
    """Planar triangulated grid on [0, scale]^2, optionally lifted by a slope.

    ``slant`` adds z = slant * x so the patch stays a height field but is not
    flat; useful to break planar symmetries in tests.
    """
    xs = np.linspace(0.0, scale, nx)
    ys = np.linspace(0.0, scale, ny)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xx, yy, slant * xx], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            c = (i + 1) * ny + j + 1
            d = i * ny + j + 1
            faces += [[a, b, c], [a, c, d]]
    return Mesh(verts, np.array(faces, dtype=np.int64))


def sliver_patch(aspect: float = 50.0) -> Mesh:
    """Fan of thin triangles; min angle shrinks as ``aspect`` grows."""
    n = 6
    verts = [[0.0, 0.0, 0.0]]
    for k in range(n + 1):
        x = 1.0 + k / n
        verts.append([x, 1.0 / aspect * (1 + 0.3 * (k % 2)), 0.0])
    faces = [[0, k + 1, k + 2] for k in range(n)]
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def jittered_icosphere(subdivisions: int, radius: float, seed: int,
                       jitter: float = 0.25) -> Mesh:
    """Icosphere with tangential vertex jitter re-projected to the sphere.

    ``jitter`` is the displacement as a fraction of the local mean edge
    length, so meshings at different resolutions stay comparably shaped.
    Two seeds give two independent meshings of the same surface.
    """
    base = icosphere(subdivisions, radius)
    rng = np.random.default_rng(seed)
    v = base.vertices.copy()
    edge = np.linalg.norm(
        base.vertices[base.faces[:, 0]] - base.vertices[base.faces[:, 1]], axis=1
    ).mean()
    normals = v / np.linalg.norm(v, axis=1, keepdims=True)
    d = rng.normal(size=v.shape)
    d -= normals * np.sum(d * normals, axis=1, keepdims=True)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    v = v + jitter * edge * d / norm
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return Mesh(v, base.faces)


def golden_meshes(meshmnist_sample=None) -> dict[str, Mesh]:
    """The fixed meshes every operator check runs on.

    A MeshMNIST sample is appended when supplied (kept optional so this
    module does not depend on the dataset pipeline).
    """
    goldens = {
        "triangle": unit_triangle(),
        "square_pair": square_pair(),
        "tetrahedron": tetrahedron(),
        "icosphere2": icosphere(2),
        "icosphere3": icosphere(3),
    }
    if meshmnist_sample is not None:
        goldens["meshmnist"] = meshmnist_sample
    return goldens
