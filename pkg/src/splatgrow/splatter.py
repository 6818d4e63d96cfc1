"""Forward splat renderer with analytic color/opacity gradients.

Disks are perspective-projected to screen-space Gaussians (EWA-style
covariance, truncated at 3 sigma), composited front-to-back per pixel, and
attributed to a first-hit ID buffer. Because geometry is frozen, the
per-pixel fragment lists depend only on (set geometry, pose) and are cached
so the optimizer's 300 steps per view only re-walk weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import CameraPose
from .gaussians import GaussianSet
from .geom import quat_to_matrix

NEAR_PLANE = 0.05
W_MIN_DEFAULT = 0.01   # first-hit attribution threshold on compositing weight
T_MIN_DEFAULT = 0.0    # transmittance cutoff; 0 disables early termination
DISK_THICKNESS = 1e-8  # third covariance axis, keeps cov2d invertible
WHITE = np.array([1.0, 1.0, 1.0])


class SplatterError(Exception):
    pass


@dataclass
class Projection:
    q: np.ndarray       # 2D pixel-space center (u, v)
    z: float            # camera-space depth
    rho: float          # 3-sigma projected radius in pixels
    cov2d: np.ndarray   # 2x2 screen covariance


@dataclass
class FragmentCache:
    """Per-pixel fragment lists for one (set geometry, pose) pair."""

    offsets: np.ndarray
    fdisk: np.ndarray
    fg: np.ndarray
    fz: np.ndarray
    width: int
    height: int
    set_version: int
    n_disks: int


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    alpha: np.ndarray          # (H, W)
    first_hit: np.ndarray      # (H, W) int32, -1 = none
    cache: FragmentCache | None = None
    weights: tuple | None = None  # (pixel_offsets, disk_idx, w) from last forward


def project_arrays(gset: GaussianSet, pose: CameraPose) -> dict:
    """Vectorized projection of every disk; the common input to all kernels.

    Returns pixel-space centers (qx, qy), depths z, inverse-covariance
    entries (ia, ib, ic), 3-sigma radii rho, bbox half-extents, and a
    validity mask (z > near plane).
    """
    r, u, f = pose.basis()
    rot_wc = np.stack([r, u, f], axis=0)  # world -> cam (positive-forward)
    cam = (gset.centers - pose.position) @ rot_wc.T
    z = cam[:, 2]
    valid = z > NEAR_PLANE

    intr = pose.intrinsics
    focal = intr.focal_px
    with np.errstate(divide="ignore", invalid="ignore"):
        qx = intr.width / 2.0 + focal * cam[:, 0] / z
        qy = intr.height / 2.0 - focal * cam[:, 1] / z

    # world covariance of each disk: R diag(s1^2, s2^2, eps^2) R^T
    rmats = quat_to_matrix(gset.rotations)
    s = np.concatenate(
        [gset.scales ** 2, np.full((len(gset), 1), DISK_THICKNESS ** 2)], axis=1
    )
    cov_w = np.einsum("nij,nj,nkj->nik", rmats, s, rmats)
    cov_c = np.einsum("ij,njk,lk->nil", rot_wc, cov_w, rot_wc)

    # Jacobian of (u, v) wrt camera coords at the center
    zs = np.where(valid, z, 1.0)
    j = np.zeros((len(gset), 2, 3))
    j[:, 0, 0] = focal / zs
    j[:, 0, 2] = -focal * cam[:, 0] / zs ** 2
    j[:, 1, 1] = -focal / zs
    j[:, 1, 2] = focal * cam[:, 1] / zs ** 2
    cov2d = np.einsum("nij,njk,nlk->nil", j, cov_c, j)

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    valid = valid & (det > 1e-24) & np.isfinite(det)
    det_safe = np.where(valid, det, 1.0)
    ia = c / det_safe
    ib = -b / det_safe
    ic = a / det_safe

    mean = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = mean + disc
    rho = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    bx = 3.0 * np.sqrt(np.maximum(a, 0.0))
    by = 3.0 * np.sqrt(np.maximum(c, 0.0))
    return {
        "qx": np.ascontiguousarray(qx), "qy": np.ascontiguousarray(qy),
        "z": np.ascontiguousarray(z),
        "ia": np.ascontiguousarray(ia), "ib": np.ascontiguousarray(ib),
        "ic": np.ascontiguousarray(ic),
        "rho": np.ascontiguousarray(rho),
        "bx": np.ascontiguousarray(bx), "by": np.ascontiguousarray(by),
        "valid": np.ascontiguousarray(valid.astype(np.uint8)),
        "cov2d": cov2d,
    }


def project(disk, pose: CameraPose) -> Projection | None:
    """Single-disk projection; None when the center is behind the near plane."""
    from .gaussians import GaussianSet as _GS

    tmp = _GS(
        centers=disk.center[None, :], rotations=disk.rotation[None, :],
        scales=disk.scale[None, :], opacities=np.array([disk.opacity]),
        colors=disk.color[None, :], grown=np.array([disk.grown]),
        source_index=np.array([disk.source_index]),
    )
    pr = project_arrays(tmp, pose)
    if not pr["valid"][0]:
        return None
    return Projection(
        q=np.array([pr["qx"][0], pr["qy"][0]]),
        z=float(pr["z"][0]),
        rho=float(pr["rho"][0]),
        cov2d=pr["cov2d"][0],
    )


def build_cache(gset: GaussianSet, pose: CameraPose, threads: int = 0) -> FragmentCache:
    pr = project_arrays(gset, pose)
    intr = pose.intrinsics
    offsets, fdisk, fg, fz = kernels.build_fragments(
        pr["qx"], pr["qy"], pr["z"], pr["ia"], pr["ib"], pr["ic"],
        pr["bx"], pr["by"], pr["valid"], intr.width, intr.height, threads,
    )
    return FragmentCache(
        offsets=offsets, fdisk=fdisk, fg=fg, fz=fz,
        width=intr.width, height=intr.height,
        set_version=gset.version, n_disks=len(gset),
    )


def render(
    gset: GaussianSet,
    pose: CameraPose,
    background: np.ndarray = WHITE,
    w_min: float = W_MIN_DEFAULT,
    t_min: float = T_MIN_DEFAULT,
    retain_fragments: bool = False,
    cache: FragmentCache | None = None,
    threads: int = 0,
) -> RenderOutput:
    if len(gset) == 0:
        raise SplatterError("empty Gaussian set")
    if cache is None:
        cache = build_cache(gset, pose, threads)
    elif cache.set_version != gset.version:
        raise SplatterError("stale fragment cache: set mutated since it was built")
    bg = np.ascontiguousarray(background, dtype=np.float64)
    color, alpha, first_hit = kernels.composite(
        cache.offsets, cache.fdisk, cache.fg, cache.fz,
        gset.opacities, gset.colors, bg, w_min, t_min,
        cache.width, cache.height, True, threads,
    )
    return RenderOutput(
        color=color, alpha=alpha, first_hit=first_hit,
        cache=cache if retain_fragments else None,
    )


def photometric_loss(
    rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None
) -> float:
    """Mean absolute difference over masked pixels (all channels)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise SplatterError("render/target dimension mismatch")
    if mask is None:
        return float(np.abs(rendered - target).mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise SplatterError("empty pixel mask")
    return float(np.abs(rendered[mask] - target[mask]).mean())


def backward_color_opacity(
    gset: GaussianSet,
    render_out: RenderOutput,
    target: np.ndarray,
    mask: np.ndarray | None,
    active,
    background: np.ndarray = WHITE,
    t_min: float = T_MIN_DEFAULT,
    threads: int = 0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Exact gradients of photometric_loss w.r.t. color and opacity.

    Only disks in `active` get nonzero gradients. Requires the forward pass
    to have retained its fragment cache; errors if the set has been mutated
    since.
    """
    cache = render_out.cache
    if cache is None:
        raise SplatterError("forward pass did not retain fragments")
    if cache.set_version != gset.version:
        raise SplatterError("stale fragment cache: set mutated since forward")
    h, w = cache.height, cache.width
    if mask is None:
        pixmask = np.ones(h * w, dtype=np.uint8)
    else:
        pixmask = np.ascontiguousarray(
            np.asarray(mask, dtype=bool).reshape(-1).astype(np.uint8)
        )
    active_mask = np.zeros(len(gset), dtype=np.uint8)
    active_mask[np.asarray(active, dtype=np.int64)] = 1
    tgt = np.ascontiguousarray(np.asarray(target, dtype=np.float64).reshape(-1, 3))
    loss, dcol, dopac = kernels.masked_loss_grad(
        cache.offsets, cache.fdisk, cache.fg, gset.opacities, gset.colors,
        tgt, pixmask, active_mask, np.ascontiguousarray(background, dtype=np.float64),
        t_min, threads,
    )
    return loss, dcol, dopac
