"""Camera pose optimization on the viewing sphere.

Two objectives: the overlap-alignment loss (one minus |cos| between each
member disk's normal and its camera ray, summed over a region) with an
analytic gradient, and the sigmoid-relaxed occlusion loss (how many un-grown
disks hide behind grown ones in projection) with finite-difference gradients
over (azimuth, elevation). Both are minimized by projected descent with
normalized angular steps, backtracking, and fixed icosahedral multistarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import CameraPose, Intrinsics, from_spherical
from .gaussians import GaussianSet
from .geom import icosphere_directions, sigmoid, unit_to_spherical
from .splatter import project_arrays
from .visibility import OverlapRegion

OCC_PRUNE_MARGIN = 60.0  # dropped pair terms are bounded by exp(-margin) each


class PoseOptError(Exception):
    pass


@dataclass
class PoseOptConfig:
    restarts: int = 8
    max_iters: int = 200
    step_size: float = 0.05          # radians per (normalized) descent step
    convergence_tol: float = 1e-5    # relative loss change
    tau: float = 50.0                # occlusion sigmoid temperature
    fd_step: float = 1e-3            # FD step on (azimuth, elevation)
    exact_pairs: bool = False        # disable occlusion-pair pruning
    tau_scales_all: bool = False     # erratum variant: tau scales the whole argument
    sphere_radius: float = 2.5
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    threads: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise PoseOptError("tau must be > 0")
        if self.restarts < 1:
            raise PoseOptError("restarts must be >= 1")


@dataclass
class PoseOptResult:
    pose: CameraPose
    loss: float
    diverged: bool
    trace: list  # (restart, iteration, loss) rows


# ---- alignment loss (overlap regions) --------------------------------------

def align_loss(
    region: OverlapRegion, gset: GaussianSet, camera_pos: np.ndarray
) -> float:
    val, _ = align_loss_grad(region, gset, camera_pos)
    return val


def align_loss_grad(
    region: OverlapRegion, gset: GaussianSet, camera_pos: np.ndarray
) -> tuple[float, np.ndarray]:
    """Sum over members of 1 - |cos(ray, normal)| and its gradient w.r.t.
    the camera position. Rays run from the camera to each disk center;
    members coincident with the camera are skipped."""
    if region.members.size == 0:
        raise PoseOptError("empty overlap region")
    camera_pos = np.asarray(camera_pos, dtype=np.float64)
    centers = gset.centers[region.members]
    normals = gset.normals[region.members]
    u = centers - camera_pos
    r = np.linalg.norm(u, axis=1)
    ok = r > 1e-9
    u, r, normals = u[ok], r[ok], normals[ok]
    if u.shape[0] == 0:
        raise PoseOptError("camera coincides with the whole region")
    s = np.einsum("ij,ij->i", u, normals)
    loss = float(np.sum(1.0 - np.abs(s) / r))
    sign = np.sign(s)
    grad = (sign[:, None] * normals / r[:, None]) - (
        np.abs(s) / r ** 3
    )[:, None] * u
    return loss, grad.sum(axis=0)


# ---- occlusion loss ---------------------------------------------------------

def occlusion_loss(
    gset: GaussianSet, pose: CameraPose, cfg: PoseOptConfig, exact: bool | None = None
) -> float:
    """Eq-style pair sum over (un-grown i, grown j):
    sigmoid(tau*(rho_i+rho_j)^2 - |q_i-q_j|^2) * sigmoid(tau*(z_i-z_j)).

    q and rho are in pixels, z in camera units; disks behind the near plane
    contribute nothing. Pruning skips pairs whose contribution is below
    exp(-margin); `exact` forces the full enumeration.
    """
    grown = gset.grown
    if not grown.any() or grown.all():
        raise PoseOptError("need both grown and un-grown disks")
    pr = project_arrays(gset, pose)
    valid = pr["valid"].astype(bool)
    um = (~grown) & valid
    gm = grown & valid
    if not um.any() or not gm.any():
        return 0.0
    if exact is None:
        exact = cfg.exact_pairs
    return float(
        kernels.occlusion_pair_sum(
            np.ascontiguousarray(pr["qx"][um]), np.ascontiguousarray(pr["qy"][um]),
            np.ascontiguousarray(pr["rho"][um]), np.ascontiguousarray(pr["z"][um]),
            np.ascontiguousarray(pr["qx"][gm]), np.ascontiguousarray(pr["qy"][gm]),
            np.ascontiguousarray(pr["rho"][gm]), np.ascontiguousarray(pr["z"][gm]),
            cfg.tau, OCC_PRUNE_MARGIN, bool(exact), cfg.tau_scales_all,
            cfg.threads,
        )
    )


def occlusion_loss_reference(gset: GaussianSet, pose: CameraPose, cfg: PoseOptConfig) -> float:
    """Independent exhaustive enumeration in plain numpy (test oracle)."""
    grown = gset.grown
    pr = project_arrays(gset, pose)
    valid = pr["valid"].astype(bool)
    um = (~grown) & valid
    gm = grown & valid
    if not um.any() or not gm.any():
        return 0.0
    dq2 = (pr["qx"][um][:, None] - pr["qx"][gm][None, :]) ** 2 + (
        pr["qy"][um][:, None] - pr["qy"][gm][None, :]
    ) ** 2
    rsum = pr["rho"][um][:, None] + pr["rho"][gm][None, :]
    if cfg.tau_scales_all:
        arg1 = cfg.tau * (rsum ** 2 - dq2)
    else:
        arg1 = cfg.tau * rsum ** 2 - dq2
    arg2 = cfg.tau * (pr["z"][um][:, None] - pr["z"][gm][None, :])
    return float((sigmoid(arg1) * sigmoid(arg2)).sum())


# ---- projected descent on the sphere ---------------------------------------

def _seed_directions(restarts: int) -> np.ndarray:
    level = 0
    dirs = icosphere_directions(level)
    while dirs.shape[0] < restarts:
        level += 1
        dirs = icosphere_directions(level)
    return dirs[:restarts]


def _descend(
    loss_fn, grad_fn, seed_dir: np.ndarray, cfg: PoseOptConfig, trace, restart_id
) -> tuple[np.ndarray, float, bool]:
    """Tangent-step descent with normalized angular steps and backtracking.

    Returns (direction, loss, made_progress)."""
    d = seed_dir / np.linalg.norm(seed_dir)
    loss = loss_fn(d)
    trace.append((restart_id, 0, loss))
    fails = 0
    stalls = 0
    step = cfg.step_size
    for it in range(1, cfg.max_iters + 1):
        g = grad_fn(d)
        g_tan = g - (g @ d) * d
        gn = np.linalg.norm(g_tan)
        if gn < 1e-14:
            break
        direction = -g_tan / gn
        accepted = False
        trial_step = step
        for _ in range(10):
            cand = d + trial_step * direction
            cand /= np.linalg.norm(cand)
            cand_loss = loss_fn(cand)
            if cand_loss <= loss:
                improved = loss - cand_loss
                d, loss = cand, cand_loss
                accepted = True
                # reuse the accepted scale; regrow gently toward the configured step
                step = min(cfg.step_size, trial_step * 2.0)
                trace.append((restart_id, it, loss))
                if improved <= cfg.convergence_tol * max(1.0, abs(loss)):
                    stalls += 1
                else:
                    stalls = 0
                break
            trial_step *= 0.5
        if not accepted:
            fails += 1
            if fails >= 10:
                break
        else:
            fails = 0
            if stalls >= 3:
                break
    return d, loss, True


def _optimize_on_sphere(loss_fn, grad_fn, cfg: PoseOptConfig) -> PoseOptResult:
    seeds = _seed_directions(cfg.restarts)
    trace: list = []
    best_d = None
    best_loss = np.inf
    any_progress = False
    seed_losses = [loss_fn(s) for s in seeds]
    for k, seed in enumerate(seeds):
        d, loss, _ = _descend(loss_fn, grad_fn, seed, cfg, trace, k)
        if loss < seed_losses[k] - 1e-15:
            any_progress = True
        if loss < best_loss:
            best_loss, best_d = loss, d
    diverged = not any_progress
    if diverged:
        k = int(np.argmin(seed_losses))
        best_d, best_loss = seeds[k], seed_losses[k]
    pose = CameraPose(
        position=best_d * cfg.sphere_radius,
        intrinsics=cfg.intrinsics,
        sphere_radius=cfg.sphere_radius,
    )
    return PoseOptResult(pose=pose, loss=best_loss, diverged=diverged, trace=trace)


def optimize_overlap_pose(
    region: OverlapRegion, gset: GaussianSet, cfg: PoseOptConfig
) -> PoseOptResult:
    """Places a camera so member normals align with its rays (analytic grads)."""
    if region.members.size == 0:
        raise PoseOptError("empty overlap region")
    radius = cfg.sphere_radius

    def loss_fn(d):
        return align_loss(region, gset, d * radius)

    def grad_fn(d):
        _, g = align_loss_grad(region, gset, d * radius)
        return g * radius  # chain rule from position to unit direction

    return _optimize_on_sphere(loss_fn, grad_fn, cfg)


def optimize_unseen_pose(gset: GaussianSet, cfg: PoseOptConfig) -> PoseOptResult:
    """Finds the pose minimizing the occlusion loss (FD grads on az/el)."""
    if not (~gset.grown).any():
        raise PoseOptError("no un-grown disks")
    if not gset.grown.any():
        raise PoseOptError("no grown disks")
    radius = cfg.sphere_radius

    def pose_of(d):
        return CameraPose(
            position=d * radius, intrinsics=cfg.intrinsics, sphere_radius=radius
        )

    def loss_fn(d):
        return occlusion_loss(gset, pose_of(d), cfg)

    def grad_fn(d):
        az, el = unit_to_spherical(d)
        h = cfg.fd_step
        el_hi = min(el + h, np.pi / 2)
        el_lo = max(el - h, -np.pi / 2)
        dl_daz = (
            loss_fn(_sph(az + h, el)) - loss_fn(_sph(az - h, el))
        ) / (2 * h)
        dl_del = (
            loss_fn(_sph(az, el_hi)) - loss_fn(_sph(az, el_lo))
        ) / (el_hi - el_lo)
        # tangent basis of the spherical parameterization
        ce, se = np.cos(el), np.sin(el)
        t_az = np.array([-np.sin(az) * ce, np.cos(az) * ce, 0.0])
        n_az = np.linalg.norm(t_az)
        t_el = np.array([-np.cos(az) * se, -np.sin(az) * se, ce])
        g = dl_del * t_el
        if n_az > 1e-9:
            g = g + dl_daz * t_az / (n_az * n_az)
        return g

    return _optimize_on_sphere(loss_fn, grad_fn, cfg)


def _sph(az: float, el: float) -> np.ndarray:
    from .geom import spherical_to_unit

    return spherical_to_unit(az, el)


def dense_sphere_argmin(loss_fn, level: int = 5) -> tuple[np.ndarray, float, np.ndarray]:
    """Evaluates a direction-loss over the subdivided icosahedron grid.

    Returns (argmin direction, min loss, all losses); level 5 = 10242 points.
    """
    dirs = icosphere_directions(level)
    losses = np.array([loss_fn(d) for d in dirs])
    k = int(np.argmin(losses))
    return dirs[k], float(losses[k]), losses


def trace_to_csv(trace: list, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["restart", "iteration", "loss"])
        writer.writerows(trace)
