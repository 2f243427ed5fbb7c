"""Triangle mesh container, OBJ/OFF io, validation and per-face geometry.

Vertices are float64 positions of shape (V, 3); faces are integer index
triples of shape (F, 3) in counter-clockwise order. Meshes are validated at
construction and treated as immutable afterwards.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFace,
    NonManifoldEdge,
    ParseError,
    ValidationError,
)

# Faces with area below this (model units^2) are rejected at load: cotangent
# weights and 1/(2|a_f|) diverge on them.
DEGENERATE_AREA_EPS = 1e-12

# f64 -> text formatting used by all writers; round-trips exactly.
_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class EdgeInfo:
    """One undirected edge with its incident faces and length."""

    endpoints: tuple[int, int]
    incident_faces: tuple[int, ...]
    length: float

    @property
    def is_boundary(self) -> bool:
        return len(self.incident_faces) == 1


@dataclass(frozen=True)
class FaceGeometry:
    """Per-face quantities used by operator assembly.

    ``opposite_edge_vectors[j]`` is the edge vector opposite corner j: for a
    CCW face (j, a, b) it equals ``v_b - v_a``, so the three vectors sum to
    zero.
    """

    area: float
    angles: np.ndarray            # (3,) interior angles, radians
    opposite_edge_vectors: np.ndarray  # (3, 3)


class Mesh:
    """Validated indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like (V, 3)
        Vertex positions, float64.
    faces : array_like (F, 3)
        CCW vertex index triples.
    attributes : dict, optional
        Named per-vertex scalar/vector arrays (first axis length V).

    Raises
    ------
    ValidationError
        Out-of-range or repeated indices, non-finite coordinates, or
        inconsistent orientation.
    NonManifoldEdge
        An edge with more than two incident faces.
    DegenerateFace
        A face with area below ``DEGENERATE_AREA_EPS``.
    """

    def __init__(self, vertices, faces, attributes=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        self.attributes: dict[str, np.ndarray] = dict(attributes or {})
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.ndim != 2 or self.faces.shape[1] != 3):
            raise ValidationError(f"faces must be (F, 3), got {self.faces.shape}")
        self.faces = self.faces.reshape(-1, 3)
        if validate:
            self._validate()

    # -- basic counts ------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    # -- validation --------------------------------------------------------

    def _validate(self):
        if not np.isfinite(self.vertices).all():
            bad = int(np.flatnonzero(~np.isfinite(self.vertices).all(axis=1))[0])
            raise ValidationError(f"non-finite coordinate at vertex {bad}")
        if self.n_faces == 0:
            return
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            bad = int(np.argwhere((self.faces < 0) | (self.faces >= self.n_vertices))[0, 0])
            raise ValidationError(
                f"face {bad} references vertex outside [0, {self.n_vertices})"
            )
        same = (
            (self.faces[:, 0] == self.faces[:, 1])
            | (self.faces[:, 1] == self.faces[:, 2])
            | (self.faces[:, 0] == self.faces[:, 2])
        )
        if same.any():
            raise ValidationError(f"face {int(np.flatnonzero(same)[0])} repeats a vertex")
        areas = face_areas(self)
        if (areas < DEGENERATE_AREA_EPS).any():
            bad = int(np.argmin(areas))
            raise DegenerateFace(
                f"face {bad} has area {areas[bad]:.3e} < {DEGENERATE_AREA_EPS:.0e}"
            )
        self._check_orientation()

    def _check_orientation(self):
        """Each directed edge at most once; undirected edges in <= 2 faces."""
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owner = np.tile(np.arange(self.n_faces), 3)
        keys = directed[:, 0] * self.n_vertices + directed[:, 1]
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        dup = np.nonzero(keys_sorted[1:] == keys_sorted[:-1])[0]
        if dup.size:
            fidx = owner[order[dup[0] + 1]]
            e = directed[order[dup[0]]]
            raise ValidationError(
                f"directed edge ({e[0]},{e[1]}) repeated; face {fidx} has "
                "inconsistent orientation"
            )
        lo = directed.min(axis=1)
        hi = directed.max(axis=1)
        ukeys = lo * self.n_vertices + hi
        uniq, counts = np.unique(ukeys, return_counts=True)
        if (counts > 2).any():
            over = uniq[counts > 2][0]
            i, j = divmod(int(over), self.n_vertices)
            raise NonManifoldEdge(f"edge ({i},{j}) has more than two incident faces")

    # -- convenience -------------------------------------------------------

    def translated(self, offset) -> "Mesh":
        return Mesh(self.vertices + np.asarray(offset, float), self.faces,
                    self.attributes, validate=False)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.attributes)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy(),
                    {k: v.copy() for k, v in self.attributes.items()},
                    validate=False)

    def __eq__(self, other):
        return (
            isinstance(other, Mesh)
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )

    def __repr__(self):
        return f"Mesh(V={self.n_vertices}, F={self.n_faces})"


# -- geometric quantities ---------------------------------------------------


def face_corner_vectors(mesh: Mesh) -> np.ndarray:
    """Opposite edge vectors e_j for all faces, shape (F, 3 corners, 3)."""
    v = mesh.vertices[mesh.faces]  # (F, 3, 3)
    # corner j of CCW face (j, a, b): e_j = v_b - v_a
    e = np.empty_like(v)
    e[:, 0] = v[:, 2] - v[:, 1]
    e[:, 1] = v[:, 0] - v[:, 2]
    e[:, 2] = v[:, 1] - v[:, 0]
    return e


def face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def face_normals(mesh: Mesh) -> np.ndarray:
    """Unit CCW face normals, shape (F, 3)."""
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = np.linalg.norm(cross, axis=1, keepdims=True)
    return cross / n


def face_angles(mesh: Mesh) -> np.ndarray:
    """Interior angles per corner, shape (F, 3), radians."""
    e = face_corner_vectors(mesh)
    lengths = np.linalg.norm(e, axis=2)
    angles = np.empty_like(lengths)
    for j in range(3):
        a = e[:, (j + 1) % 3]
        b = e[:, (j + 2) % 3]
        # edges adjacent to corner j, oriented tail-to-head along the boundary
        cosang = -np.sum(a * b, axis=1) / (lengths[:, (j + 1) % 3] * lengths[:, (j + 2) % 3])
        angles[:, j] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return angles


def face_geometry(mesh: Mesh, face_id: int) -> FaceGeometry:
    """Area, interior angles and opposite edge vectors of one face.

    Raises DegenerateFace if the area is below ``DEGENERATE_AREA_EPS``.
    """
    if not 0 <= face_id < mesh.n_faces:
        raise IndexError(f"face id {face_id} out of range")
    sub = Mesh(mesh.vertices, mesh.faces[face_id : face_id + 1], validate=False)
    area = float(face_areas(sub)[0])
    if area < DEGENERATE_AREA_EPS:
        raise DegenerateFace(f"face {face_id} has area {area:.3e}")
    return FaceGeometry(
        area=area,
        angles=face_angles(sub)[0],
        opposite_edge_vectors=face_corner_vectors(sub)[0],
    )


def build_edge_table(mesh: Mesh) -> list[EdgeInfo]:
    """All undirected edges with incidence, sorted by (i, j).

    Raises NonManifoldEdge if any edge has more than two incident faces.
    """
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(mesh.n_faces), 3)
    lo = directed.min(axis=1)
    hi = directed.max(axis=1)
    keys = lo * mesh.n_vertices + hi
    order = np.argsort(keys, kind="stable")
    table: list[EdgeInfo] = []
    idx = 0
    keys_sorted = keys[order]
    while idx < len(keys_sorted):
        stop = idx
        while stop < len(keys_sorted) and keys_sorted[stop] == keys_sorted[idx]:
            stop += 1
        if stop - idx > 2:
            i, j = divmod(int(keys_sorted[idx]), mesh.n_vertices)
            raise NonManifoldEdge(f"edge ({i},{j}) has {stop - idx} incident faces")
        i, j = divmod(int(keys_sorted[idx]), mesh.n_vertices)
        length = float(np.linalg.norm(mesh.vertices[i] - mesh.vertices[j]))
        table.append(EdgeInfo(
            endpoints=(i, j),
            incident_faces=tuple(int(owner[order[k]]) for k in range(idx, stop)),
            length=length,
        ))
        idx = stop
    return table


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle over all face corners, radians."""
    return float(face_angles(mesh).min())


def vertex_degrees(mesh: Mesh) -> np.ndarray:
    """Number of distinct neighbors per vertex."""
    deg = np.zeros(mesh.n_vertices, dtype=np.int64)
    for e in build_edge_table(mesh):
        deg[e.endpoints[0]] += 1
        deg[e.endpoints[1]] += 1
    return deg


def incident_face_counts(mesh: Mesh) -> np.ndarray:
    counts = np.zeros(mesh.n_vertices, dtype=np.int64)
    np.add.at(counts, mesh.faces.ravel(), 1)
    return counts


# -- io ----------------------------------------------------------------------


def load_mesh(path, fmt: str | None = None) -> Mesh:
    """Read an OBJ or OFF file into a validated Mesh.

    ``fmt`` is "obj" or "off"; inferred from the extension when omitted.
    """
    fmt = _resolve_format(path, fmt)
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    if fmt == "obj":
        return _parse_obj(text, str(path))
    return _parse_off(text, str(path))


def save_mesh(mesh: Mesh, path, fmt: str | None = None) -> None:
    """Write a mesh as OBJ (v/f lines) or OFF. Rejects non-finite vertices."""
    if not np.isfinite(mesh.vertices).all():
        raise ValidationError("mesh has non-finite vertex coordinates")
    fmt = _resolve_format(path, fmt)
    lines = []
    if fmt == "obj":
        for v in mesh.vertices:
            lines.append("v " + " ".join(_FLOAT_FMT % c for c in v))
        for f in mesh.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    else:
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        for v in mesh.vertices:
            lines.append(" ".join(_FLOAT_FMT % c for c in v))
        for f in mesh.faces:
            lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _resolve_format(path, fmt):
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower().lstrip(".")
        fmt = ext
    fmt = fmt.lower()
    if fmt not in ("obj", "off"):
        raise ParseError(f"unsupported mesh format {fmt!r} for {path}")
    return fmt


def _parse_obj(text: str, name: str) -> Mesh:
    verts, faces = [], []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ParseError(f"{name}:{ln}: vertex line needs 3 coordinates")
            try:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise ParseError(f"{name}:{ln}: bad float: {exc}") from None
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ParseError(f"{name}:{ln}: only triangle faces supported")
            try:
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{name}:{ln}: bad face index: {exc}") from None
            faces.append(idx)
        # other OBJ directives (vn, vt, o, g, s, usemtl...) are ignored
    if not verts:
        raise ParseError(f"{name}: no vertices found")
    return Mesh(np.array(verts, float), np.array(faces, np.int64).reshape(-1, 3))


def _parse_off(text: str, name: str) -> Mesh:
    tokens = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ParseError(f"{name}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip edge count
        verts = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for k in range(nf):
            cnt = int(tokens[pos])
            if cnt != 3:
                raise ParseError(f"{name}: face {k} has {cnt} vertices; only triangles supported")
            faces.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
            pos += 4
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{name}: truncated or malformed OFF: {exc}") from None
    return Mesh(verts, np.array(faces, np.int64).reshape(-1, 3))
