"""Primitive closed and open surfaces used by the phantom generator and tests."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import SurfaceMesh


def _orient_outward(vertices, faces):
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    out = np.einsum("ij,ij->i", n, v.mean(axis=1) - vertices.mean(axis=0)) < 0
    faces = faces.copy()
    faces[out] = faces[out][:, [0, 2, 1]]
    return faces


def icosahedron(radius: float = 1.0) -> SurfaceMesh:
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return SurfaceMesh(v, f, name="icosahedron")


@lru_cache(maxsize=8)
def _icosphere_arrays(level: int):
    ico = icosahedron()
    v = [tuple(x) for x in ico.vertices]
    faces = ico.triangles.tolist()
    for _ in range(level):
        verts = np.array(v)
        cache = {}
        new_faces = []

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = (verts[a] + verts[b]) / 2
                v.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(v) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return np.array(v), np.array(faces, dtype=np.int64)


def icosphere(level: int = 3, radius: float = 1.0) -> SurfaceMesh:
    """Subdivided icosahedron; vertex counts 12, 42, 162, 642, 2562, ..."""
    v, f = _icosphere_arrays(level)
    return SurfaceMesh(v * radius, f, name=f"icosphere{level}")


@lru_cache(maxsize=32)
def _fib_arrays(n: int, twist: float):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    golden = np.pi * (3 - 5 ** 0.5)
    theta = golden * np.arange(n) + twist
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    hull = ConvexHull(pts)
    faces = _orient_outward(pts, hull.simplices.astype(np.int64))
    return pts, faces


def fibonacci_sphere(n: int, twist: float = 0.0) -> SurfaceMesh:
    """Near-uniform unit-sphere triangulation with exactly ``n`` vertices (2n - 4 faces).

    ``twist`` rotates the spiral about the polar axis, giving an independent
    triangulation of the same sphere.
    """
    pts, faces = _fib_arrays(int(n), float(twist))
    return SurfaceMesh(pts, faces, name=f"fibsphere{n}")


def box(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Axis-aligned closed box made of 12 triangles."""
    sx, sy, sz = size
    o = np.asarray(origin, dtype=float)
    v = o + np.array([[x, y, z] for x in (0, sx) for y in (0, sy) for z in (0, sz)], dtype=float)
    f = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    return SurfaceMesh(v, _orient_outward(v, f), name="box")


def grid_patch(nx: int = 5, ny: int = 5, spacing: float = 1.0, z: float = 0.0,
               jitter: float = 0.0, seed: int = 0) -> SurfaceMesh:
    """Flat triangulated rectangle in the plane ``z``; interior vertices may jitter in-plane."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], axis=1)
    if jitter:
        rng = np.random.default_rng(seed)
        interior = (xs.ravel() > 0) & (xs.ravel() < (nx - 1) * spacing) & \
                   (ys.ravel() > 0) & (ys.ravel() < (ny - 1) * spacing)
        v[interior, :2] += rng.uniform(-jitter, jitter, (interior.sum(), 2)) * spacing
    f = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = i * ny + j, (i + 1) * ny + j
            f += [[a, b, b + 1], [a, b + 1, a + 1]]
    return SurfaceMesh(v, f, name="patch")


def unit_square(z: float = 0.0) -> SurfaceMesh:
    return SurfaceMesh([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], [[0, 1, 2], [0, 2, 3]],
                       name="square")


def tetrahedron() -> SurfaceMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return SurfaceMesh(v, f, name="tetrahedron")
