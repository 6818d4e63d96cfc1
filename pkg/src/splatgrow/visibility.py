"""Per-view visible Gaussian sets, overlap regions, and front-facing subsets.

Visibility is defined by the renderer's first-hit ID buffer (the front-most
fragment whose compositing weight clears w_min), so what counts as visible
is exactly what optimization sees. `brute_force_visible` is the independent
opacity-free oracle: every pixel ray against every disk's 3-sigma screen
ellipse, min depth wins, no compositing, no binning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraPose
from .gaussians import GaussianSet
from .splatter import W_MIN_DEFAULT, project_arrays, render

FRONT_FACING_MAX_ANGLE = np.deg2rad(85.0)


@dataclass
class OverlapRegion:
    view_pair: tuple[int, int]
    members: np.ndarray        # sorted ascending disk indices
    centroid: np.ndarray
    mean_normal: np.ndarray


def visible_set(
    gset: GaussianSet,
    pose: CameraPose,
    w_min: float = W_MIN_DEFAULT,
    threads: int = 0,
) -> np.ndarray:
    """Sorted indices of disks that are some pixel's first hit."""
    out = render(gset, pose, w_min=w_min, threads=threads)
    hits = out.first_hit[out.first_hit >= 0]
    return np.unique(hits).astype(np.int64)


def brute_force_visible(gset: GaussianSet, pose: CameraPose) -> np.ndarray:
    """Oracle: min-depth 3-sigma ellipse coverage per pixel, all disks, no pruning."""
    pr = project_arrays(gset, pose)
    intr = pose.intrinsics
    w, h = intr.width, intr.height
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    best_z = np.full((h, w), np.inf)
    best_idx = np.full((h, w), -1, dtype=np.int64)
    order = np.arange(len(gset))
    for i in order:
        if not pr["valid"][i]:
            continue
        dx = cols[None, :] - pr["qx"][i]
        dy = rows[:, None] - pr["qy"][i]
        maha = pr["ia"][i] * dx * dx + 2.0 * pr["ib"][i] * dx * dy + pr["ic"][i] * dy * dy
        covered = maha <= 9.0
        closer = covered & (pr["z"][i] < best_z)
        best_z[closer] = pr["z"][i]
        best_idx[closer] = i
    found = best_idx[best_idx >= 0]
    return np.unique(found)


def front_facing(
    gset: GaussianSet, pose: CameraPose, threads: int = 0
) -> np.ndarray:
    """Visible disks whose normals are not grazing the per-disk view ray."""
    vis = visible_set(gset, pose, threads=threads)
    if vis.size == 0:
        return vis
    rays = gset.centers[vis] - pose.position
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cosines = np.abs(np.einsum("ij,ij->i", gset.normals[vis], rays))
    keep = cosines > np.cos(FRONT_FACING_MAX_ANGLE)
    return vis[keep]


def overlap_region(
    gset: GaussianSet,
    pose_i: CameraPose,
    pose_j: CameraPose,
    pair: tuple[int, int] = (0, 1),
    threads: int = 0,
) -> OverlapRegion:
    """Disks visible from both poses, with centroid and a sign-consistent
    mean normal (members aligned to the bisector of the two camera directions)."""
    vi = visible_set(gset, pose_i, threads=threads)
    vj = visible_set(gset, pose_j, threads=threads)
    members = np.intersect1d(vi, vj)
    if members.size == 0:
        return OverlapRegion(
            view_pair=pair, members=members,
            centroid=np.zeros(3), mean_normal=np.array([0.0, 0.0, 1.0]),
        )
    centroid = gset.centers[members].mean(axis=0)
    di = pose_i.position / np.linalg.norm(pose_i.position)
    dj = pose_j.position / np.linalg.norm(pose_j.position)
    bisector = di + dj
    nb = np.linalg.norm(bisector)
    if nb < 1e-9:  # antipodal poses: no preferred side, anchor on first member
        bisector = gset.normals[members[0]]
        nb = np.linalg.norm(bisector)
    bisector /= nb
    normals = gset.normals[members].copy()
    flip = normals @ bisector < 0
    normals[flip] *= -1.0
    mean = normals.mean(axis=0)
    norm = np.linalg.norm(mean)
    mean = mean / norm if norm > 1e-12 else bisector
    return OverlapRegion(view_pair=pair, members=members, centroid=centroid, mean_normal=mean)


def region_to_dict(region: OverlapRegion) -> dict:
    """JSON-friendly diagnostics payload."""
    return {
        "view_pair": list(region.view_pair),
        "member_count": int(region.members.size),
        "members": region.members.tolist(),
        "centroid": region.centroid.tolist(),
        "mean_normal": region.mean_normal.tolist(),
    }
