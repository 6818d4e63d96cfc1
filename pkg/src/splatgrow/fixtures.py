"""Deterministic test geometry: no RNG, reproducible to the bit.

Golden-ratio lattices stand in for uniform random sampling so fixtures are
identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def fibonacci_sphere(n: int, radius: float = 1.0) -> PointCloud:
    """Near-uniform sphere sampling via the Fibonacci spiral."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = 2.0 * np.pi * i / GOLDEN
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    pts = radius * np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return PointCloud(points=pts)


def torus_cloud(n: int, major: float = 1.0, minor: float = 0.3) -> PointCloud:
    """Golden-ratio lattice on a torus (R=major, r=minor)."""
    i = np.arange(n, dtype=np.float64)
    u = 2.0 * np.pi * np.mod(i / GOLDEN, 1.0)
    v = 2.0 * np.pi * (i + 0.5) / n
    x = (major + minor * np.cos(v)) * np.cos(u)
    y = (major + minor * np.cos(v)) * np.sin(u)
    z = minor * np.sin(v)
    return PointCloud(points=np.stack([x, y, z], axis=1))


def torus_analytic_normal(points: np.ndarray, major: float = 1.0) -> np.ndarray:
    """Outward normals of the torus surface at (near-)surface points."""
    p = np.atleast_2d(points)
    ring = p.copy()
    rho = np.linalg.norm(p[:, :2], axis=1, keepdims=True)
    ring[:, :2] = p[:, :2] / np.maximum(rho, 1e-12) * major
    ring[:, 2] = 0.0
    n = p - ring
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def grid_plane(side: int, step: float = 0.1) -> PointCloud:
    """side x side grid in the z=0 plane, centered at the origin."""
    axis = (np.arange(side) - (side - 1) / 2.0) * step
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.zeros(side * side)], axis=1)
    return PointCloud(points=pts)


def cube_corners(half: float = 1.0) -> PointCloud:
    pts = np.array(
        [[sx, sy, sz] for sx in (-half, half) for sy in (-half, half) for sz in (-half, half)],
        dtype=np.float64,
    )
    return PointCloud(points=pts)


def spherical_cap_indices(cloud: PointCloud, direction: np.ndarray, half_angle: float) -> np.ndarray:
    """Indices of points within `half_angle` of `direction` (sphere clouds)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    unit = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    return np.where(unit @ d >= np.cos(half_angle))[0]
