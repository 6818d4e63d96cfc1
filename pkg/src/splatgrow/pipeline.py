"""Two-stage growth orchestration.

Stage 1 optimizes the six cardinal views (front-facing disks only), then
refines the largest overlap regions from additionally optimized camera
poses. Stage 2 iterates: find the pose exposing the most un-grown disks,
inpaint the rendered view there, and optimize just those disks; a spatial
inpainting pass finishes off anything still untouched.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .appearance import ViewBundle, inpaint_with_backend, oracle_color
from .camera import (
    CameraPose, Intrinsics, cardinal_views, from_spherical, render_geometry_maps,
)
from .cloud import estimate_spacing, load_ply, normalize_to_unit
from .field import UnsignedField
from .gaussians import GaussianSet, export_splat_ply, init_from_cloud, spatial_inpaint
from .geom import unit_to_spherical
from .pose_opt import PoseOptConfig, optimize_overlap_pose, optimize_unseen_pose
from .splatter import W_MIN_DEFAULT, WHITE, build_cache, render
from .visibility import OverlapRegion, front_facing, overlap_region, visible_set

PIPELINE_T_MIN = 1e-4  # transmittance cutoff inside the optimizer loops
POSE_DEDUP_ANGLE = np.deg2rad(5.0)
PSNR_CAP_DB = 99.0


class PipelineError(Exception):
    pass


@dataclass
class PipelineConfig:
    n_additional: int = 4
    max_inpaint_iters: int = 6
    ungrown_stop_frac: float = 0.01
    opt_iters_per_view: int = 300
    lr_color: float = 0.01
    lr_opacity: float = 0.005
    mask_dilation_px: int = 3
    prompt: str = ""
    camera_radius: float = 2.5
    width: int = 512
    height: int = 512
    fov_deg: float = 45.0
    cardinal_azimuth_offset: float = 0.0
    k_blend: int = 8
    bandwidth: float = 0.0  # 0 = auto (2 x median spacing)
    threads: int = 0
    pose: PoseOptConfig = dc_field(default_factory=PoseOptConfig)

    def __post_init__(self):
        if self.max_inpaint_iters < 1:
            raise PipelineError("max_inpaint_iters must be >= 1")
        if self.n_additional < 0:
            raise PipelineError("n_additional must be >= 0")

    @property
    def k_total(self) -> int:
        return 6 + self.n_additional

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            fov_y=np.deg2rad(self.fov_deg), width=self.width, height=self.height
        )

    def pose_cfg(self) -> PoseOptConfig:
        cfg = self.pose
        cfg.sphere_radius = self.camera_radius
        cfg.intrinsics = self.intrinsics()
        cfg.threads = self.threads
        return cfg


# ---- per-view optimization ---------------------------------------------------

@dataclass
class ViewOptResult:
    final_loss: float
    initial_loss: float
    iters_run: int
    masked_px: int


def optimize_view(
    gset: GaussianSet,
    bundle: ViewBundle,
    active: np.ndarray,
    cfg: PipelineConfig,
) -> ViewOptResult | None:
    """Fixed-step descent on color/opacity of `active` disks only.

    The loss is masked to pixels whose first hit is an active disk (further
    intersected with the bundle mask when present). Gradients are the
    splatter's exact ones, rescaled per disk by its masked weight mass so
    every disk converges at the same lr-bounded rate; the preconditioner is
    frozen at iteration 0, keeping runs bit-deterministic. Returns None (and
    marks nothing grown) when the active disks are invisible.
    """
    active = np.unique(np.asarray(active, dtype=np.int64))
    if active.size == 0:
        raise PipelineError("active disk set is empty")
    if bundle.target is None:
        raise PipelineError("bundle has no target image")
    threads = cfg.threads
    cache = build_cache(gset, bundle.pose, threads)
    _, _, first_hit = kernels.composite(
        cache.offsets, cache.fdisk, cache.fg, cache.fz,
        gset.opacities, gset.colors, WHITE, W_MIN_DEFAULT, PIPELINE_T_MIN,
        cache.width, cache.height, False, threads,
    )
    pixmask = np.isin(first_hit.ravel(), active)
    if bundle.mask is not None:
        pixmask &= np.asarray(bundle.mask, dtype=bool).ravel()
    n_masked = int(pixmask.sum())
    if n_masked == 0:
        return None
    pixmask_u8 = np.ascontiguousarray(pixmask.astype(np.uint8))

    active_u8 = np.zeros(len(gset), dtype=np.uint8)
    active_u8[active] = 1
    target = np.ascontiguousarray(
        np.asarray(bundle.target, dtype=np.float64).reshape(-1, 3)
    )

    colors = gset.colors.copy()
    opac = gset.opacities.copy()
    mass = kernels.weight_mass(
        cache.offsets, cache.fdisk, cache.fg, opac, pixmask_u8,
        PIPELINE_T_MIN, threads,
    )
    scale = np.where(mass[active] > 1e-9, 3.0 * n_masked / np.maximum(mass[active], 1e-9), 0.0)

    def loss_at(c, o):
        return kernels.masked_loss(
            cache.offsets, cache.fdisk, cache.fg, o, c, target, pixmask_u8,
            WHITE, PIPELINE_T_MIN, threads,
        )

    loss, dcol, dopac = kernels.masked_loss_grad(
        cache.offsets, cache.fdisk, cache.fg, opac, colors, target,
        pixmask_u8, active_u8, WHITE, PIPELINE_T_MIN, threads,
    )
    initial_loss = loss
    iters = 0
    for _ in range(cfg.opt_iters_per_view):
        step_c = cfg.lr_color * dcol[active] * scale[:, None]
        step_o = cfg.lr_opacity * dopac[active] * scale
        if not (np.any(step_c) or np.any(step_o)):
            break
        accepted = False
        h = 1.0
        for _ in range(10):
            cand_c = colors.copy()
            cand_o = opac.copy()
            cand_c[active] = np.clip(cand_c[active] - h * step_c, 0.0, 1.0)
            cand_o[active] = np.clip(cand_o[active] - h * step_o, 1e-4, 1.0 - 1e-4)
            cand_loss = loss_at(cand_c, cand_o)
            if cand_loss <= loss:
                colors, opac, loss = cand_c, cand_o, cand_loss
                accepted = True
                break
            h *= 0.5
        iters += 1
        if not accepted:
            break
        _, dcol, dopac = kernels.masked_loss_grad(
            cache.offsets, cache.fdisk, cache.fg, opac, colors, target,
            pixmask_u8, active_u8, WHITE, PIPELINE_T_MIN, threads,
        )
    gset.set_colors(slice(None), colors)
    gset.set_opacities(slice(None), opac)
    gset.mark_grown(active)
    return ViewOptResult(
        final_loss=loss, initial_loss=initial_loss, iters_run=iters,
        masked_px=n_masked,
    )


# ---- seam metric --------------------------------------------------------------

def heldout_poses(cfg: PipelineConfig) -> list[CameraPose]:
    """Eight corner directions; none coincide with the cardinal axes."""
    poses = []
    intr = cfg.intrinsics()
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                d = np.array([sx, sy, sz]) / np.sqrt(3.0)
                az, el = unit_to_spherical(d)
                poses.append(from_spherical(az, el, cfg.camera_radius, intr))
    return poses


def _image_gradient_mag(img: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) * 0.5
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) * 0.5
    return np.sqrt((gx ** 2 + gy ** 2).sum(axis=2))


def seam_metric(
    gset: GaussianSet,
    regions: list[OverlapRegion],
    cfg: PipelineConfig,
) -> float:
    """Mean color-gradient magnitude along overlap-region boundaries in the
    held-out renders; the measurable face of cross-view consistency."""
    vals = []
    struct = ndimage.generate_binary_structure(2, 2)
    for pose in heldout_poses(cfg):
        out = render(gset, pose, WHITE, threads=cfg.threads)
        grad_mag = _image_gradient_mag(out.color)
        for region in regions:
            if region.members.size == 0:
                continue
            mask = np.isin(out.first_hit, region.members)
            if not mask.any():
                continue
            band = ndimage.binary_dilation(mask, struct) & ~ndimage.binary_erosion(mask, struct)
            if band.any():
                vals.append(float(grad_mag[band].mean()))
    return float(np.mean(vals)) if vals else 0.0


# ---- stage 1 -------------------------------------------------------------------

def _pose_angle(a: CameraPose, b: CameraPose) -> float:
    da = a.position / np.linalg.norm(a.position)
    db = b.position / np.linalg.norm(b.position)
    return float(np.arccos(np.clip(da @ db, -1.0, 1.0)))


def _adjacent_pairs(n_additional: int) -> list[tuple[int, int]]:
    """Adjacent-azimuth ring pairs first; ring-pole pairs only when more
    than four additional views are requested."""
    pairs = [(0, 1), (1, 2), (2, 3), (3, 0)]
    if n_additional > 4:
        for i in range(4):
            pairs.append((i, 4))
            pairs.append((i, 5))
    return pairs


@dataclass
class Stage1Report:
    per_view_loss: list
    region_sizes: list
    grown_frac: float
    additional_poses: list
    seam_before_refine: float
    seam_after_refine: float
    regions: list = dc_field(default_factory=list)


def stage1_grow(
    gset: GaussianSet,
    field: UnsignedField,
    backend,
    cfg: PipelineConfig,
    progress=None,
) -> Stage1Report:
    def say(msg):
        if progress:
            progress(msg)

    intr = cfg.intrinsics()
    poses = cardinal_views(cfg.camera_radius, intr, cfg.cardinal_azimuth_offset)
    say("stage1: rendering cardinal geometry maps")
    bundles = [
        ViewBundle(pose=p, maps=render_geometry_maps(field, p), prompt=cfg.prompt)
        for p in poses
    ]
    say("stage1: synthesizing reference + cardinal targets")
    reference = backend.synthesize_reference(bundles[0])
    targets = backend.synthesize_multiview(bundles, reference)
    for b, t in zip(bundles, targets):
        b.reference = reference
        b.target = t

    # poles first: their rim bands lie inside later equatorial views' interiors,
    # and the equatorial views' own rim bands are what phase (b) refines
    view_order = [4, 5, 0, 1, 2, 3]
    per_view_loss = [None] * len(bundles)
    for i in view_order:
        b = bundles[i]
        active = front_facing(gset, b.pose, threads=cfg.threads)
        res = optimize_view(gset, b, active, cfg) if active.size else None
        per_view_loss[i] = res.final_loss if res else None
        say(f"stage1: cardinal view {i} done "
            f"(loss={res.final_loss:.4f})" if res else f"stage1: cardinal view {i} skipped")

    say("stage1: detecting overlap regions")
    pairs = _adjacent_pairs(cfg.n_additional)
    regions = [
        overlap_region(gset, poses[i], poses[j], (i, j), threads=cfg.threads)
        for i, j in pairs
    ]
    region_sizes = [int(r.members.size) for r in regions]
    seam_before = seam_metric(gset, regions, cfg)

    order = sorted(
        range(len(regions)), key=lambda k: (-regions[k].members.size, k)
    )
    chosen = [k for k in order if regions[k].members.size > 0][: cfg.n_additional]

    additional = []
    if chosen:
        pose_cfg = cfg.pose_cfg()
        kept_poses = list(poses)
        for k in chosen:
            res = optimize_overlap_pose(regions[k], gset, pose_cfg)
            # the alignment loss is sign-blind (|cos| with unoriented normals),
            # and for convex regions its argmin often sits on the far side of
            # the object; flip to the side the region actually faces
            d = res.pose.position / np.linalg.norm(res.pose.position)
            if d @ regions[k].mean_normal < 0:
                res.pose = CameraPose(
                    position=-res.pose.position,
                    intrinsics=res.pose.intrinsics,
                    sphere_radius=res.pose.sphere_radius,
                )
            if any(_pose_angle(res.pose, p) < POSE_DEDUP_ANGLE for p in kept_poses):
                say(f"stage1: additional pose for pair {regions[k].view_pair} "
                    "deduplicated (within 5 deg of an existing view)")
                continue
            kept_poses.append(res.pose)
            additional.append((k, res.pose))
            say(f"stage1: additional pose for pair {regions[k].view_pair} "
                f"at align loss {res.loss:.4f}")

    if additional:
        say("stage1: synthesizing additional-view targets")
        add_bundles = [
            ViewBundle(pose=p, maps=render_geometry_maps(field, p), prompt=cfg.prompt)
            for _, p in additional
        ]
        add_targets = backend.synthesize_multiview(add_bundles, reference)
        for (k, pose), b, t in zip(additional, add_bundles, add_targets):
            b.reference = reference
            b.target = t
            active = np.intersect1d(
                regions[k].members, visible_set(gset, pose, threads=cfg.threads)
            )
            if active.size == 0:
                continue
            res = optimize_view(gset, b, active, cfg)
            per_view_loss.append(res.final_loss if res else None)
    elif cfg.n_additional > 0:
        say("stage1: all overlap regions empty; skipping refinement phase")

    seam_after = seam_metric(gset, regions, cfg)
    return Stage1Report(
        per_view_loss=per_view_loss,
        region_sizes=region_sizes,
        grown_frac=gset.grown_fraction,
        additional_poses=[
            list(unit_to_spherical(p.position / np.linalg.norm(p.position)))
            for _, p in additional
        ],
        seam_before_refine=seam_before,
        seam_after_refine=seam_after,
        regions=regions,
    )


# ---- stage 2 -------------------------------------------------------------------

@dataclass
class Stage2Report:
    iterations: list
    grown_frac: float
    spatial_inpaint_rounds: int = 0
    spatial_inpaint_filled: int = 0


def stage2_iterative_inpaint(
    gset: GaussianSet,
    field: UnsignedField,
    backend,
    cfg: PipelineConfig,
    median_spacing: float,
    progress=None,
) -> Stage2Report:
    def say(msg):
        if progress:
            progress(msg)

    iterations = []
    pose_cfg = cfg.pose_cfg()
    for it in range(cfg.max_inpaint_iters):
        ungrown = np.where(~gset.grown)[0]
        frac = ungrown.size / max(1, len(gset))
        if ungrown.size == 0 or frac < cfg.ungrown_stop_frac:
            break
        if not gset.grown.any():
            break
        res = optimize_unseen_pose(gset, pose_cfg)
        pose = res.pose
        out = render(gset, pose, WHITE, threads=cfg.threads)
        ungrown_px = np.isin(out.first_hit, ungrown)
        if not ungrown_px.any():
            say(f"stage2 iter {it}: best pose sees no un-grown disks; stopping")
            break
        mask = ndimage.binary_dilation(
            ungrown_px, iterations=max(1, cfg.mask_dilation_px)
        )
        maps = render_geometry_maps(field, pose)
        bundle = ViewBundle(
            pose=pose, maps=maps, prompt=cfg.prompt,
            target=out.color, mask=mask,
        )
        bundle.target = inpaint_with_backend(backend, bundle)
        visible = np.unique(out.first_hit[out.first_hit >= 0]).astype(np.int64)
        active = np.intersect1d(ungrown, visible)
        if active.size == 0:
            break
        view_res = optimize_view(gset, bundle, active, cfg)
        if view_res is None:
            break
        az, el = unit_to_spherical(pose.position / np.linalg.norm(pose.position))
        iterations.append(
            {
                "pose": [az, el],
                "mask_px": int(mask.sum()),
                "loss": view_res.final_loss,
                "grown_frac": gset.grown_fraction,
            }
        )
        say(f"stage2 iter {it}: grew {active.size} disks "
            f"(grown {gset.grown_fraction:.3f})")

    rounds = filled = 0
    if gset.grown.any() and (~gset.grown).any():
        rep = spatial_inpaint(gset, radius=3.0 * median_spacing)
        rounds, filled = rep.rounds, rep.filled
        say(f"stage2: spatial inpaint filled {filled} disks in {rounds} rounds")
    return Stage2Report(
        iterations=iterations,
        grown_frac=gset.grown_fraction,
        spatial_inpaint_rounds=rounds,
        spatial_inpaint_filled=filled,
    )


# ---- full run ------------------------------------------------------------------

def compute_heldout_psnr(gset: GaussianSet, cfg: PipelineConfig) -> list[float]:
    """Renders vs an oracle-colored twin (same geometry and opacities)."""
    gt = gset.copy()
    gt.set_colors(slice(None), np.clip(oracle_color(gt.centers), 0.0, 1.0))
    psnrs = []
    for pose in heldout_poses(cfg):
        a = render(gset, pose, WHITE, threads=cfg.threads).color
        b = render(gt, pose, WHITE, threads=cfg.threads).color
        mse = float(((a - b) ** 2).mean())
        if mse <= 0:
            psnrs.append(PSNR_CAP_DB)
        else:
            psnrs.append(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))
    return psnrs


def run_full(
    cloud_path,
    prompt: str,
    cfg: PipelineConfig,
    backend,
    out_dir=None,
    progress=None,
) -> tuple[GaussianSet, dict]:
    def say(msg):
        if progress:
            progress(msg)

    t0 = time.perf_counter()
    cfg.prompt = prompt or cfg.prompt
    cloud = load_ply(cloud_path)
    say(f"loaded {len(cloud)} points")
    ncloud, transform = normalize_to_unit(cloud)
    spacing, _ = estimate_spacing(ncloud, k=min(8, len(ncloud) - 1))
    field = UnsignedField(
        ncloud, k_blend=cfg.k_blend,
        bandwidth=cfg.bandwidth if cfg.bandwidth > 0 else None,
    )
    gset = init_from_cloud(ncloud, field, spacing)
    say(f"initialized {len(gset)} disks (bandwidth={field.bandwidth:.4f})")

    files = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        export_splat_ply(gset, out_dir / "initial.ply")
        files["initial"] = out_dir / "initial.ply"

    s1 = stage1_grow(gset, field, backend, cfg, progress)
    say(f"stage1 complete: grown {s1.grown_frac:.3f}")
    s2 = stage2_iterative_inpaint(
        gset, field, backend, cfg, float(np.median(spacing)), progress
    )
    say(f"stage2 complete: grown {s2.grown_frac:.3f}")

    psnrs = compute_heldout_psnr(gset, cfg)
    wall = time.perf_counter() - t0
    report = {
        "stage1": {
            "per_view_loss": s1.per_view_loss,
            "region_sizes": s1.region_sizes,
            "grown_frac": s1.grown_frac,
            "additional_poses": s1.additional_poses,
            "seam_before_refine": s1.seam_before_refine,
            "seam_after_refine": s1.seam_after_refine,
        },
        "stage2": {"iterations": s2.iterations},
        "final": {
            "grown_frac": s2.grown_frac,
            "psnr_heldout": psnrs,
            "wall_s": wall,
        },
    }

    if out_dir is not None:
        export_splat_ply(gset, out_dir / "grown.ply")
        files["grown"] = out_dir / "grown.ply"
        renders_dir = out_dir / "renders"
        renders_dir.mkdir(exist_ok=True)
        from .appearance import image_to_u8
        from .camera import save_png

        for i, pose in enumerate(heldout_poses(cfg)):
            img = render(gset, pose, WHITE, threads=cfg.threads).color
            save_png(renders_dir / f"heldout_{i}.png", image_to_u8(img))
        (out_dir / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
        files["report"] = out_dir / "report.json"
    return gset, report
