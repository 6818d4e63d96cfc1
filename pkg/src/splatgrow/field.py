"""Approximate unsigned distance field over a normalized point cloud.

A smooth softmin of distances to the k nearest samples stands in for a
learned field: d(x) = -beta * log( mean_j exp(-|x - p_j| / beta) ) over the
k_blend nearest points, clamped at 0. It is cheap, deterministic, and has
an analytic gradient, which is all the downstream pipeline consumes
(eval / grad / normals / sphere tracing).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, estimate_spacing


class FieldError(Exception):
    pass


class UnsignedField:
    """Immutable after construction; all queries are thread-safe."""

    def __init__(
        self,
        cloud: PointCloud,
        k_blend: int = 8,
        bandwidth: float | None = None,
    ):
        if len(cloud) < 4:
            raise FieldError("field needs at least 4 points")
        self.cloud = cloud
        self.points = cloud.points
        self.k_blend = int(min(k_blend, len(cloud) - 1))
        if self.k_blend < 1:
            raise FieldError("k_blend must be >= 1")
        spacing, _ = estimate_spacing(cloud, k=min(8, len(cloud) - 1))
        self.median_spacing = float(np.median(spacing))
        self.bandwidth = float(bandwidth) if bandwidth else 2.0 * self.median_spacing
        if self.bandwidth <= 0:
            raise FieldError("bandwidth must be > 0")
        self.hit_eps = 1.5 * self.bandwidth
        self.step_min = 0.25 * self.bandwidth
        self.tree = cKDTree(self.points)

    # ---- evaluation -----------------------------------------------------

    def _knn(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dist, idx = self.tree.query(x, k=self.k_blend, workers=-1)
        if self.k_blend == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return dist, idx

    def eval_many(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.isfinite(x).all():
            raise FieldError("non-finite query point")
        dist, _ = self._knn(x)
        beta = self.bandwidth
        m = dist.min(axis=1, keepdims=True)
        # softmin, shifted by the row minimum for stability
        val = m[:, 0] - beta * np.log(np.exp(-(dist - m) / beta).mean(axis=1))
        return np.maximum(val, 0.0)

    def eval(self, x) -> float:
        return float(self.eval_many(np.asarray(x, dtype=np.float64)[None, :])[0])

    def grad_many(
        self, x: np.ndarray, return_flags: bool = False
    ) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        """Analytic softmin gradient: a softmax-weighted blend of unit offsets.

        Queries inside the 1e-6 near-surface shell fall back to a one-sided
        finite difference toward the nearest sample and are flagged.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.isfinite(x).all():
            raise FieldError("non-finite query point")
        dist, idx = self._knn(x)
        beta = self.bandwidth
        m = dist.min(axis=1, keepdims=True)
        w = np.exp(-(dist - m) / beta)
        w /= w.sum(axis=1, keepdims=True)
        offsets = x[:, None, :] - self.points[idx]  # (n, k, 3)
        safe = np.maximum(dist, 1e-300)
        grads = (w[:, :, None] * offsets / safe[:, :, None]).sum(axis=1)

        flags = dist[:, 0] <= 1e-6
        if flags.any():
            h = 0.1 * beta
            for i in np.where(flags)[0]:
                u = x[i] - self.points[idx[i, 0]]
                nu = np.linalg.norm(u)
                u = u / nu if nu > 1e-12 else np.array([1.0, 0.0, 0.0])
                d0 = self.eval_many(x[i][None, :])[0]
                d1 = self.eval_many((x[i] + h * u)[None, :])[0]
                grads[i] = ((d1 - d0) / h) * u
        if return_flags:
            return grads, flags
        return grads

    def grad(self, x) -> np.ndarray:
        return self.grad_many(np.asarray(x, dtype=np.float64)[None, :])[0]

    # ---- normals --------------------------------------------------------

    def pca_normals(self, p: np.ndarray, k: int | None = None) -> np.ndarray:
        """Smallest-eigenvector normals of the k-neighborhood covariance.

        Sign is canonicalized (largest-|component| coordinate positive) so
        results are deterministic; orientation is resolved elsewhere.
        """
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        k = k or max(self.k_blend, 8)
        k = min(k, len(self.cloud))
        _, idx = self.tree.query(p, k=k, workers=-1)
        if k == 1:
            idx = idx[:, None]
        nbrs = self.points[idx]
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered)
        _, vecs = np.linalg.eigh(cov)
        n0 = vecs[:, :, 0]
        lead = np.abs(n0).argmax(axis=1)
        sign = np.sign(n0[np.arange(n0.shape[0]), lead])
        sign[sign == 0] = 1.0
        return n0 * sign[:, None]

    def normal_many(
        self, p: np.ndarray, return_flags: bool = False
    ) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        """Unoriented unit normals near the surface.

        The unsigned field has a gradient singularity on its zero set, so the
        gradient is sampled one bandwidth off-surface along a PCA bootstrap
        direction. Zero gradients fall back to centroid-to-point directions.
        """
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        n0 = self.pca_normals(p)
        off = p + self.bandwidth * n0
        g = self.grad_many(off)
        norms = np.linalg.norm(g, axis=1)
        bad = norms < 1e-9
        normals = np.where(bad[:, None], n0, g / np.maximum(norms, 1e-300)[:, None])
        if bad.any():
            k = min(max(self.k_blend, 8), len(self.cloud))
            _, idx = self.tree.query(p[bad], k=k, workers=-1)
            cent = self.points[np.atleast_2d(idx)].mean(axis=1)
            alt = p[bad] - cent
            alt_n = np.linalg.norm(alt, axis=1, keepdims=True)
            ok = alt_n[:, 0] > 1e-12
            fb = normals[bad]
            fb[ok] = alt[ok] / alt_n[ok]
            normals[bad] = fb
        if return_flags:
            return normals, bad
        return normals

    def normal_at(self, p) -> np.ndarray:
        return self.normal_many(np.asarray(p, dtype=np.float64)[None, :])[0]

    # ---- sphere tracing -------------------------------------------------

    def sphere_trace_batch(
        self,
        origins: np.ndarray,
        dirs: np.ndarray,
        t_max: float,
        max_steps: int = 256,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Marches t += max(eval, step_min) until eval < hit_eps or t > t_max.

        Returns (hit_t, hit_mask); hit_t is 0 where the ray missed.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = origins.shape[0]
        t = np.zeros(n)
        hit = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        for _ in range(max_steps):
            if not active.any():
                break
            pos = origins[active] + t[active, None] * dirs[active]
            d = self.eval_many(pos)
            newly_hit = d < self.hit_eps
            act_idx = np.where(active)[0]
            hit[act_idx[newly_hit]] = True
            active[act_idx[newly_hit]] = False
            still = act_idx[~newly_hit]
            t[still] += np.maximum(d[~newly_hit], self.step_min)
            over = still[t[still] > t_max]
            active[over] = False
        return np.where(hit, t, 0.0), hit

    def sphere_trace(self, origin, direction, t_max: float):
        """Single-ray convenience wrapper; returns (t, point) or None on miss."""
        direction = np.asarray(direction, dtype=np.float64)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise FieldError("direction must be unit length")
        origin = np.asarray(origin, dtype=np.float64)
        t, hit = self.sphere_trace_batch(origin[None, :], direction[None, :], t_max)
        if not hit[0]:
            return None
        return float(t[0]), origin + t[0] * direction
