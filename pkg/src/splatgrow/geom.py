"""Small geometry helpers shared across modules: quaternions, sphere seeds, sigmoids."""

from __future__ import annotations

import numpy as np


def normalize_rows(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def quat_from_z_to(normals: np.ndarray) -> np.ndarray:
    """Minimal rotations taking (0,0,1) to each row of `normals`.

    Returns unit quaternions as (w, x, y, z). Antiparallel targets get a
    180-degree rotation about the x axis.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    n = normalize_rows(n)
    w = 1.0 + n[:, 2]
    q = np.empty((n.shape[0], 4), dtype=np.float64)
    q[:, 0] = w
    # cross((0,0,1), n) = (-n_y, n_x, 0)
    q[:, 1] = -n[:, 1]
    q[:, 2] = n[:, 0]
    q[:, 3] = 0.0
    flipped = w < 1e-9
    q[flipped] = (0.0, 1.0, 0.0, 0.0)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z); batched (N,4)->(N,3,3)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return normalize_rows(verts), faces


def icosphere_directions(level: int = 0) -> np.ndarray:
    """Unit directions from a subdivided icosahedron.

    Vertex counts by level: 12, 42, 162, 642, 2562, 10242. Deterministic;
    used both as multistart seeds (level 0) and as the dense sphere-search
    oracle grid (level 5).
    """
    verts, faces = _icosahedron()
    for _ in range(level):
        edge_mid: dict[tuple[int, int], int] = {}
        vlist = [v for v in verts]

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = edge_mid.get(key)
            if idx is None:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                idx = len(vlist)
                vlist.append(m)
                edge_mid[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return verts


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def spherical_to_unit(azimuth: float, elevation: float) -> np.ndarray:
    ce = np.cos(elevation)
    return np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def unit_to_spherical(d: np.ndarray) -> tuple[float, float]:
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    el = float(np.arcsin(np.clip(d[2], -1.0, 1.0)))
    az = float(np.arctan2(d[1], d[0]))
    return az, el
