"""Triangle surface geometry: watertightness checks, point containment, closest points.

Surfaces are only used to immerse the tissue into a regular hex grid and to
detect needle/surface contact; they carry no degrees of freedom themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Slightly irrational ray direction so parity ray casting never grazes an
# edge or vertex of a reasonably tessellated surface.
_RAY_DIR = np.array([0.928371652, 0.301927364, 0.217364859])
_RAY_DIR /= np.linalg.norm(_RAY_DIR)


class GeometryError(ValueError):
    """Raised for non-watertight or otherwise unusable surfaces."""


@dataclass
class SurfaceGeometry:
    """Closed orientable triangle surface.

    vertices: (nv, 3) float array [m]; triangles: (nt, 3) int array.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    _normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError("vertices must be (n, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise GeometryError("triangles must be (m, 3)")
        self._check_watertight()
        if self._signed_volume() < 0.0:
            self.triangles = self.triangles[:, [0, 2, 1]]
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1)
        if np.any(lens < 1e-30):
            raise GeometryError("degenerate (zero-area) triangle in surface")
        self._normals = n / lens[:, None]

    def _check_watertight(self):
        edges = {}
        for t, tri in enumerate(self.triangles):
            for k in range(3):
                e = (int(tri[k]), int(tri[(k + 1) % 3]))
                edges[e] = edges.get(e, 0) + 1
        bad = [e for e in edges if edges[e] != 1 or (e[1], e[0]) not in edges]
        if bad:
            raise GeometryError(
                f"surface is not a closed orientable manifold; "
                f"{len(bad)} bad directed edges, e.g. {bad[:3]}"
            )

    def _signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)

    @property
    def volume(self) -> float:
        return abs(self._signed_volume())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Parity ray-cast containment test for a batch of points (n, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        crossings = np.zeros(len(pts), dtype=int)
        a = self.vertices[self.triangles[:, 0]]
        e1 = self.vertices[self.triangles[:, 1]] - a
        e2 = self.vertices[self.triangles[:, 2]] - a
        d = _RAY_DIR
        # Moller-Trumbore, vectorised over triangles, looped over points.
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        for i, p in enumerate(pts):
            tvec = p - a
            u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1)
            v = np.einsum("j,ij->i", d, qvec) * inv_det
            t = np.einsum("ij,ij->i", e2, qvec) * inv_det
            hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
            crossings[i] = int(np.count_nonzero(hit))
        return crossings % 2 == 1

    def closest_point(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Closest surface point to p, its outward normal, and the signed distance.

        Signed distance is negative when p is inside the surface.
        """
        p = np.asarray(p, dtype=float)
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        q = _closest_point_on_triangles(p, a, b, c)
        d2 = np.einsum("ij,ij->i", q - p, q - p)
        k = int(np.argmin(d2))
        dist = float(np.sqrt(d2[k]))
        inside = bool(self.contains(p[None, :])[0])
        return q[k], self._normals[k], -dist if inside else dist


def _closest_point_on_triangles(p, a, b, c):
    # Ericson, "Real-Time Collision Detection", vectorised over triangles.
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    q = a + v[:, None] * ab + w[:, None] * ac

    # Vertex regions
    q = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, q)
    q = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, q)
    q = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, q)
    # Edge AB
    t_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=np.abs(d1 - d3) > 1e-300)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    q = np.where(on_ab[:, None], a + np.clip(t_ab, 0, 1)[:, None] * ab, q)
    # Edge AC
    t_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=np.abs(d2 - d6) > 1e-300)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    q = np.where(on_ac[:, None], a + np.clip(t_ac, 0, 1)[:, None] * ac, q)
    # Edge BC
    t_bc = np.divide(d4 - d3, (d4 - d3) + (d5 - d6),
                     out=np.zeros_like(d4), where=np.abs((d4 - d3) + (d5 - d6)) > 1e-300)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    q = np.where(on_bc[:, None], b + np.clip(t_bc, 0, 1)[:, None] * (c - b), q)
    return q


def box_surface(origin, size) -> SurfaceGeometry:
    """Axis-aligned box as 12 triangles."""
    o = np.asarray(origin, dtype=float)
    s = np.asarray(size, dtype=float)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    verts = o + corners * s
    # Outward-oriented quads: -z, +z, -y, +y, -x, +x
    quads = [
        (0, 2, 3, 1), (4, 5, 7, 6),
        (0, 1, 5, 4), (2, 6, 7, 3),
        (0, 4, 6, 2), (1, 3, 7, 5),
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return SurfaceGeometry(verts, np.array(tris))


def ellipsoid_surface(center, semi_axes, subdivisions: int = 3) -> SurfaceGeometry:
    """Icosphere scaled to an ellipsoid; subdivisions=3 gives 1280 triangles."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            verts.append(m)
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for i, j, k in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = new_faces

    v = np.array(verts) * np.asarray(semi_axes, dtype=float) + np.asarray(center, dtype=float)
    return SurfaceGeometry(v, np.array(faces))


def load_obj(path) -> SurfaceGeometry:
    """Minimal OBJ reader: v/f records, triangles only."""
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(ids) != 3:
                    raise GeometryError(f"{path}: only triangle faces supported")
                tris.append(ids)
    if not verts or not tris:
        raise GeometryError(f"{path}: no v/f records found")
    return SurfaceGeometry(np.array(verts), np.array(tris))
