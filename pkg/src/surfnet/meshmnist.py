"""Height-field mesh synthesis: Poisson-disk sampling of a 2D domain,
Delaunay triangulation, and bilinear lifting of a grayscale image.

The default 27 x 27 domain with r = 1 yields roughly 500 samples. Images
come either from an IDX file (the standard big-endian digit format) or from
a built-in synthetic stroke generator, so no external download is required.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, OutOfDomain, ParseError
from .mesh import Mesh

DOMAIN_SIZE = 27.0
POISSON_RADIUS = 1.0
BRIDSON_CANDIDATES = 30
COCIRCULAR_TIE_EPS = 1e-9


@dataclass
class HeightFieldMesh:
    """A planar base mesh plus a per-vertex depth that lifts it to 3D."""

    base: Mesh          # z == 0 everywhere
    depth: np.ndarray   # (V,)
    lifted: Mesh        # same connectivity, z = depth

    @property
    def n_vertices(self) -> int:
        return self.base.n_vertices


def poisson_disk_sample(r: float = POISSON_RADIUS, size: float = DOMAIN_SIZE,
                        seed: int = 0, k: int = BRIDSON_CANDIDATES) -> np.ndarray:
    """Bridson dart throwing on [0, size]^2: maximal sample with all
    pairwise distances >= r. Deterministic given the seed."""
    if r <= 0:
        raise ValueError("r must be positive")
    rng = np.random.default_rng(seed)
    cell = r / np.sqrt(2.0)
    gw = int(np.ceil(size / cell)) + 1
    grid = -np.ones((gw, gw), dtype=np.int64)
    points: list[np.ndarray] = []
    active: list[int] = []

    def cell_of(p):
        return int(p[0] // cell), int(p[1] // cell)

    def fits(p):
        gx, gy = cell_of(p)
        x0, x1 = max(gx - 2, 0), min(gx + 3, gw)
        y0, y1 = max(gy - 2, 0), min(gy + 3, gw)
        idx = grid[x0:x1, y0:y1]
        near = idx[idx >= 0]
        if near.size == 0:
            return True
        d = np.asarray(points)[near] - p
        return (np.einsum("ij,ij->i", d, d) >= r * r).all()

    def push(p):
        grid[cell_of(p)] = len(points)
        active.append(len(points))
        points.append(p)

    push(rng.uniform(0.0, size, 2))
    while active:
        slot = int(rng.integers(len(active)))
        base = points[active[slot]]
        placed = False
        rad = rng.uniform(r, 2 * r, k)
        ang = rng.uniform(0.0, 2 * np.pi, k)
        cand = base + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        for p in cand:
            if 0.0 <= p[0] <= size and 0.0 <= p[1] <= size and fits(p):
                push(p)
                placed = True
                break
        if not placed:
            active[slot] = active[-1]
            active.pop()
    return np.asarray(points)


def _circumcircle(pts):
    """Centers and squared radii of triangles, pts shape (T, 3, 2)."""
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
    ab = b - a
    ac = c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (ac[:, 1] * (ab * ab).sum(1) - ab[:, 1] * (ac * ac).sum(1)) / d
        uy = (ab[:, 0] * (ac * ac).sum(1) - ac[:, 0] * (ab * ab).sum(1)) / d
    center = a + np.stack([ux, uy], axis=1)
    r2 = ((center - a) ** 2).sum(1)
    bad = ~np.isfinite(r2)
    r2[bad] = np.inf
    return center, r2


def delaunay_triangulate(points: np.ndarray) -> Mesh:
    """Bowyer-Watson triangulation of 2D points into a planar z = 0 mesh.

    Faces come out counter-clockwise. Cocircular ties are resolved by a
    post-pass that flips interior edges of cocircular quads toward the
    lexicographically smallest diagonal.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise DegenerateInput("need at least 3 two-dimensional points")
    n = len(pts)
    span = max(pts[:, 0].ptp(), pts[:, 1].ptp(), 1.0)
    if span <= 0:
        raise DegenerateInput("all points coincide")
    mid = pts.mean(axis=0)
    big = 64.0 * span
    super_pts = np.array([
        mid + [-big, -big],
        mid + [big, -big],
        mid + [0.0, big],
    ])
    allpts = np.vstack([pts, super_pts])
    tris = [[n, n + 1, n + 2]]
    centers, r2s = _circumcircle(allpts[np.array(tris)])
    centers = list(centers)
    r2s = list(r2s)

    for ip in range(n):
        p = allpts[ip]
        ctr = np.asarray(centers)
        rr = np.asarray(r2s)
        d2 = ((ctr - p) ** 2).sum(1)
        bad_idx = np.flatnonzero(d2 < rr * (1.0 - COCIRCULAR_TIE_EPS))
        if bad_idx.size == 0:
            raise DegenerateInput(f"point {ip} not inside any circumcircle")
        edge_count: dict[tuple[int, int], int] = {}
        directed: dict[tuple[int, int], tuple[int, int]] = {}
        for t in bad_idx:
            a, b, c = tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                edge_count[key] = edge_count.get(key, 0) + 1
                directed[key] = (u, v)
        keep = [t for t in range(len(tris)) if t not in set(bad_idx)]
        tris = [tris[t] for t in keep]
        centers = [centers[t] for t in keep]
        r2s = [r2s[t] for t in keep]
        hole = [directed[k] for k, cnt in edge_count.items() if cnt == 1]
        new = np.array([[ip, u, v] for u, v in hole])
        ctr_new, r2_new = _circumcircle(allpts[new])
        tris.extend(new.tolist())
        centers.extend(ctr_new)
        r2s.extend(r2_new)

    faces = np.array([t for t in tris if max(t) < n], dtype=np.int64)
    if len(faces) == 0:
        raise DegenerateInput("points are collinear")
    faces = _resolve_cocircular_ties(pts, faces)
    verts3 = np.concatenate([pts, np.zeros((n, 1))], axis=1)
    return Mesh(verts3, faces)


def _resolve_cocircular_ties(pts, faces, max_rounds: int = 20) -> np.ndarray:
    """Flip interior edges of cocircular quads to the lex-smallest diagonal."""
    faces = [tuple(f) for f in faces.tolist()]
    for _ in range(max_rounds):
        edge_map: dict[tuple[int, int], list[int]] = {}
        for fi, f in enumerate(faces):
            for u, v in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (u, v) if u < v else (v, u)
                edge_map.setdefault(key, []).append(fi)
        flipped = False
        for (i, j), owners in edge_map.items():
            if len(owners) != 2:
                continue
            f0, f1 = faces[owners[0]], faces[owners[1]]
            k = next(v for v in f0 if v not in (i, j))
            l = next(v for v in f1 if v not in (i, j))
            alt = (k, l) if k < l else (l, k)
            if alt >= (i, j):
                continue
            ctr, r2 = _circumcircle(pts[np.array([f0])])
            d2 = ((pts[l] - ctr[0]) ** 2).sum()
            if abs(d2 - r2[0]) > COCIRCULAR_TIE_EPS * r2[0]:
                continue
            # flip: replace (i,j) diagonal by (k,l), preserving winding of f0
            a, b, c = f0
            # rotate f0 so that it reads (k, i', j') with i', j' the shared edge
            while a != k:
                a, b, c = b, c, a
            faces[owners[0]] = (k, b, l)
            faces[owners[1]] = (k, l, c)
            flipped = True
            break
        if not flipped:
            break
    return np.array(faces, dtype=np.int64)


def circumcircle_empty_report(mesh: Mesh, tol: float = COCIRCULAR_TIE_EPS) -> bool:
    """Brute-force empty-circumcircle check over all faces and points."""
    pts = mesh.vertices[:, :2]
    ctr, r2 = _circumcircle(pts[mesh.faces])
    for f in range(mesh.n_faces):
        d2 = ((pts - ctr[f]) ** 2).sum(1)
        d2[mesh.faces[f]] = np.inf
        if (d2 < r2[f] * (1.0 - tol)).any():
            return False
    return True


def lift_heightfield(base: Mesh, image: np.ndarray,
                     normalize: bool = True) -> HeightFieldMesh:
    """Assign z by bilinear interpolation of a (G, G) grayscale image whose
    pixel centers sit at integer coordinates [0, G-1]^2.

    ``normalize`` divides by 255 so heights land in [0, 1]; raw grey values
    are available with normalize=False.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ParseError(f"image must be 2D, got {image.shape}")
    g = image.shape[0]
    pts = base.vertices[:, :2]
    lo, hi = pts.min(), pts.max()
    if lo < -1e-9 or hi > g - 1 + 1e-9:
        raise OutOfDomain(
            f"base mesh spans [{lo:.3f}, {hi:.3f}], image grid is [0, {g - 1}]")
    x = np.clip(pts[:, 0], 0.0, g - 1.0)
    y = np.clip(pts[:, 1], 0.0, g - 1.0)
    i0 = np.clip(np.floor(x).astype(int), 0, g - 2)
    j0 = np.clip(np.floor(y).astype(int), 0, g - 2)
    fx = x - i0
    fy = y - j0
    z = (image[i0, j0] * (1 - fx) * (1 - fy)
         + image[i0 + 1, j0] * fx * (1 - fy)
         + image[i0, j0 + 1] * (1 - fx) * fy
         + image[i0 + 1, j0 + 1] * fx * fy)
    if normalize:
        z = z / 255.0
    lifted_v = base.vertices.copy()
    lifted_v[:, 2] = z
    return HeightFieldMesh(base=base, depth=z, lifted=Mesh(lifted_v, base.faces))


def synthetic_glyph(seed: int, size: int = 28) -> np.ndarray:
    """Random smooth stroke rasterized with a Gaussian pen; values 0..255."""
    rng = np.random.default_rng(seed)
    npts = int(rng.integers(3, 6))
    ctrl = rng.uniform(5.0, size - 6.0, (npts, 2))
    # Catmull-Rom through the control points
    padded = np.vstack([ctrl[0], ctrl, ctrl[-1]])
    ts = np.linspace(0.0, 1.0, 40)
    curve = []
    for s in range(npts - 1):
        p0, p1, p2, p3 = padded[s], padded[s + 1], padded[s + 2], padded[s + 3]
        for t in ts:
            t2, t3 = t * t, t * t * t
            pt = 0.5 * ((2 * p1) + (-p0 + p2) * t
                        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
                        + (-p0 + 3 * p1 - 3 * p2 + p3) * t3)
            curve.append(pt)
    curve = np.asarray(curve)
    sigma = rng.uniform(1.0, 1.6)
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size))
    for pt in curve[:: max(1, len(curve) // 120)]:
        img += np.exp(-((xs - pt[0]) ** 2 + (ys - pt[1]) ** 2) / (2 * sigma ** 2))
    peak = img.max()
    if peak > 0:
        img *= rng.uniform(210.0, 255.0) / peak
    return img


IDX_IMAGE_MAGIC = 0x00000803


def load_idx_images(path, limit: int | None = None) -> np.ndarray:
    """Read a big-endian IDX ubyte image file -> (count, rows, cols) float64."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise ParseError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGE_MAGIC:
            raise ParseError(f"{path}: bad IDX magic {magic:#010x}")
        if limit is not None:
            count = min(count, limit)
        payload = fh.read(count * rows * cols)
    if len(payload) < count * rows * cols:
        raise ParseError(f"{path}: truncated IDX payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    return arr.astype(np.float64)


def make_meshmnist_sample(seed: int, image: np.ndarray | None = None,
                          r: float = POISSON_RADIUS, size: float = DOMAIN_SIZE,
                          normalize: bool = True) -> HeightFieldMesh:
    """End-to-end sample: Poisson points, Delaunay base mesh, lifted image.

    With no image supplied a synthetic glyph keyed to the same seed is used.
    The image orientation follows grid convention: image[i, j] sits at
    coordinate (x=i, y=j).
    """
    pts = poisson_disk_sample(r=r, size=size, seed=seed)
    base = delaunay_triangulate(pts)
    if image is None:
        image = synthetic_glyph(seed)
    return lift_heightfield(base, image, normalize=normalize)
