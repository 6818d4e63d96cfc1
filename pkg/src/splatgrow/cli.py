"""Command-line front end: one subcommand per pipeline stage or utility.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 backend error.
Every config key can be overridden with --<key> <value>.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .appearance import BackendError, make_backend
from .camera import (
    depth_range, encode_depth_u16, from_spherical, load_png, render_geometry_maps,
    save_maps_png, save_png,
)
from .cloud import CloudError, estimate_spacing, load_ply, normalize_to_unit
from .config import ConfigError, RunConfig, load_config
from .field import UnsignedField
from .gaussians import (
    export_splat_ply, init_from_cloud, read_splat_ply, set_from_splat_arrays,
)
from .pipeline import PipelineError, heldout_poses, run_full
from .splatter import WHITE, render

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4

PSNR_CAP_DB = 99.0


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        parser.add_argument(
            f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V"
        )


def _gather_config(args) -> RunConfig:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    return load_config(args.config, overrides)


def _prepare_scene(cfg: RunConfig):
    cloud = load_ply(cfg.input)
    ncloud, transform = normalize_to_unit(cloud)
    spacing, clamped = estimate_spacing(ncloud, k=min(8, len(ncloud) - 1))
    field = UnsignedField(
        ncloud, k_blend=cfg.k_blend,
        bandwidth=cfg.bandwidth if cfg.bandwidth > 0 else None,
    )
    return cloud, ncloud, transform, spacing, clamped, field


def cmd_init(args) -> int:
    cfg = _gather_config(args)
    cloud, ncloud, transform, spacing, clamped, field = _prepare_scene(cfg)
    gset = init_from_cloud(ncloud, field, spacing)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_splat_ply(gset, out / "initial.ply")

    # how far the field normals sit from a plain local-PCA estimate
    pca = field.pca_normals(ncloud.points)
    dots = np.abs(np.einsum("ij,ij->i", pca, gset.normals))
    angles = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    hist, edges = np.histogram(angles, bins=18, range=(0.0, 90.0))
    stats = {
        "n_points": len(cloud),
        "spacing_median": float(np.median(spacing)),
        "spacing_clamped": clamped,
        "bandwidth": field.bandwidth,
        "normal_vs_pca_deg_hist": {
            "bin_edges_deg": edges.tolist(),
            "counts": hist.tolist(),
        },
        "normal_fallback_count": int(gset.normal_fallback.sum()),
    }
    (out / "init_stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'initial.ply'} ({len(gset)} disks)")
    return EXIT_OK


def cmd_maps(args) -> int:
    cfg = _gather_config(args)
    _, _, _, _, _, field = _prepare_scene(cfg)
    pose = from_spherical(
        args.azimuth, args.elevation, cfg.camera_radius,
        cfg.pipeline_config().intrinsics(),
    )
    maps = render_geometry_maps(field, pose)
    paths = save_maps_png(maps, pose, cfg.output_dir, stem=args.stem)
    near, far = depth_range(pose)
    np.savez(
        Path(cfg.output_dir) / f"{args.stem}_maps.npz",
        depth=maps.depth.astype(np.float32),
        normal=maps.normal.astype(np.float32),
        position=maps.position.astype(np.float32),
        hit_mask=maps.hit_mask,
        depth_near=near, depth_far=far,
    )
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_grow(args) -> int:
    cfg = _gather_config(args)
    backend = make_backend(cfg.backend, cfg.remote_url, cfg.remote_timeout)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(cfg.dump())
    gset, report = run_full(
        cfg.input, cfg.prompt, cfg.pipeline_config(), backend,
        out_dir=out, progress=lambda msg: print(msg, flush=True),
    )
    print(f"grown fraction: {report['final']['grown_frac']:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _gather_config(args)
    gset = set_from_splat_arrays(read_splat_ply(args.splat))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = cfg.pipeline_config().intrinsics()
    if args.poses:
        pose_list = []
        for chunk in args.poses.split(";"):
            az, el = (float(v) for v in chunk.split(","))
            pose_list.append(from_spherical(az, el, cfg.camera_radius, intr))
    else:
        pose_list = heldout_poses(cfg.pipeline_config())
    from .appearance import image_to_u8

    for i, pose in enumerate(pose_list):
        img = render(gset, pose, WHITE, threads=cfg.threads).color
        save_png(out / f"render_{i}.png", image_to_u8(img))
    print(f"wrote {len(pose_list)} renders to {out}")
    return EXIT_OK


def _load_dir_images(path: Path) -> dict[str, np.ndarray]:
    out = {}
    for p in sorted(path.glob("*.png")):
        arr = load_png(p)
        if arr.dtype == np.uint16:
            out[p.name] = arr.astype(np.float64) / 65535.0
        else:
            out[p.name] = arr.astype(np.float64) / 255.0
    return out


def cmd_eval(args) -> int:
    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    imgs_a = _load_dir_images(dir_a)
    imgs_b = _load_dir_images(dir_b)
    common = sorted(set(imgs_a) & set(imgs_b))
    if not common:
        raise CloudError("no common PNG names between the two directories")
    rows = []
    for name in common:
        a, b = imgs_a[name], imgs_b[name]
        if a.shape != b.shape:
            raise CloudError(f"shape mismatch for {name}")
        mse = float(((a - b) ** 2).mean())
        psnr = PSNR_CAP_DB if mse <= 0 else min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))
        rows.append((name, psnr))
        print(f"{name}\t{psnr:.4f} dB")
    mean = float(np.mean([p for _, p in rows]))
    print(f"mean\t{mean:.4f} dB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatgrow",
        description="Grow colored oriented Gaussian disks over a point cloud.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="load/normalize/field/init; write initial splats")
    p_maps = sub.add_parser("maps", help="render depth/normal/position maps from a pose")
    p_maps.add_argument("--azimuth", type=float, default=0.0)
    p_maps.add_argument("--elevation", type=float, default=0.0)
    p_maps.add_argument("--stem", default="view")
    p_grow = sub.add_parser("grow", help="run the full growth pipeline")
    p_render = sub.add_parser("render", help="render a splat PLY from given poses")
    p_render.add_argument("--splat", required=True)
    p_render.add_argument("--poses", default="", help='semicolon list "az,el;az,el" (radians)')
    p_eval = sub.add_parser("eval", help="PSNR table between two render directories")
    p_eval.add_argument("--dir-a", required=True)
    p_eval.add_argument("--dir-b", required=True)

    for p in (p_init, p_maps, p_grow, p_render):
        p.add_argument("--config", default=None, help="flat YAML config file")
        _add_config_overrides(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "init": cmd_init,
        "maps": cmd_maps,
        "grow": cmd_grow,
        "render": cmd_render,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (CloudError, FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
