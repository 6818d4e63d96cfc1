"""Sphere-constrained look-at cameras and geometric map rendering.

Camera convention: world-space right-handed; the camera frame is
(right, up, forward) with `forward` pointing at the origin. The 4x4 view
matrix maps world points into an OpenGL-style frame (camera looks along
-z), so view @ world_origin = (0, 0, -radius). Projection and depth used
everywhere else are positive-forward: depth = dot(p - position, forward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .field import UnsignedField
from .geom import spherical_to_unit


@dataclass(frozen=True)
class Intrinsics:
    fov_y: float = np.deg2rad(45.0)  # vertical FOV, radians
    width: int = 512
    height: int = 512

    @property
    def focal_px(self) -> float:
        return self.height / (2.0 * np.tan(self.fov_y / 2.0))


DEFAULT_RADIUS = 2.5


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    intrinsics: Intrinsics
    sphere_radius: float

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.ascontiguousarray(self.position, dtype=np.float64)
        )
        r = float(np.linalg.norm(self.position))
        if abs(r - self.sphere_radius) > 1e-6 * max(1.0, self.sphere_radius):
            raise ValueError("camera position must lie on the viewing sphere")
        if not 0.0 < self.intrinsics.fov_y < np.pi:
            raise ValueError("FOV must be in (0, pi)")

    @property
    def forward(self) -> np.ndarray:
        return -self.position / np.linalg.norm(self.position)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal frame; +z world up, +x near poles."""
        f = self.forward
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(f @ up_hint) > 0.999:
            up_hint = np.array([1.0, 0.0, 0.0])
        r = np.cross(f, up_hint)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f

    def view_matrix(self) -> np.ndarray:
        r, u, f = self.basis()
        m = np.eye(4)
        m[0, :3], m[1, :3], m[2, :3] = r, u, -f
        m[:3, 3] = -m[:3, :3] @ self.position
        return m

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        """Positive-forward camera coords: columns (x right, y up, z depth)."""
        r, u, f = self.basis()
        rel = np.atleast_2d(points) - self.position
        return rel @ np.stack([r, u, f], axis=1)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) unit world-space directions through pixel centers."""
        intr = self.intrinsics
        r, u, f = self.basis()
        focal = intr.focal_px
        cols = (np.arange(intr.width) + 0.5 - intr.width / 2.0) / focal
        rows = (intr.height / 2.0 - (np.arange(intr.height) + 0.5)) / focal
        d = (
            f[None, None, :]
            + cols[None, :, None] * r[None, None, :]
            + rows[:, None, None] * u[None, None, :]
        )
        return d / np.linalg.norm(d, axis=2, keepdims=True)

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns ((u, v) pixel coords, depth); u along columns, v along rows."""
        cam = self.world_to_cam(points)
        intr = self.intrinsics
        z = cam[:, 2]
        focal = intr.focal_px
        uu = intr.width / 2.0 + focal * cam[:, 0] / z
        vv = intr.height / 2.0 - focal * cam[:, 1] / z
        return np.stack([uu, vv], axis=1), z


def from_spherical(
    azimuth: float,
    elevation: float,
    radius: float = DEFAULT_RADIUS,
    intrinsics: Intrinsics = Intrinsics(),
) -> CameraPose:
    if abs(elevation) > np.pi / 2 + 1e-12:
        raise ValueError("elevation must be within [-pi/2, pi/2]")
    pos = radius * spherical_to_unit(azimuth, elevation)
    return CameraPose(position=pos, intrinsics=intrinsics, sphere_radius=radius)


def cardinal_views(
    radius: float = DEFAULT_RADIUS,
    intrinsics: Intrinsics = Intrinsics(),
    azimuth_offset: float = 0.0,
) -> list[CameraPose]:
    """Four equatorial views plus the two poles (axis-aligned by default)."""
    poses = [
        from_spherical(azimuth_offset + a, 0.0, radius, intrinsics)
        for a in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)
    ]
    poses.append(from_spherical(azimuth_offset, np.pi / 2, radius, intrinsics))
    poses.append(from_spherical(azimuth_offset, -np.pi / 2, radius, intrinsics))
    return poses


@dataclass
class GeometryMaps:
    depth: np.ndarray      # (H, W) camera-space depth, 0 on miss
    normal: np.ndarray     # (H, W, 3) unit, camera-facing; zero on miss
    position: np.ndarray   # (H, W, 3) world hit points; zero on miss
    hit_mask: np.ndarray   # (H, W) bool


def render_geometry_maps(
    field: UnsignedField, pose: CameraPose, refine_steps: int = 3
) -> GeometryMaps:
    """Sphere-traces every pixel ray and samples depth/normal/position.

    The march stops a hit_eps-wide shell above the samples, so hits are
    refined with along-ray Newton steps (dt = -eval / (grad . dir)) before
    sampling; otherwise the position map would paint appearance ~1.5
    bandwidths off the true surface. Refining along the ray keeps every hit
    on its pixel ray, so projecting the position map lands back on the pixel
    center. Grazing rays (|grad . dir| small) keep the marched point.
    """
    intr = pose.intrinsics
    h, w = intr.height, intr.width
    rays = pose.pixel_rays().reshape(-1, 3)
    origins = np.broadcast_to(pose.position, rays.shape)
    t_max = 2.0 * pose.sphere_radius
    t, hit = field.sphere_trace_batch(origins, rays, t_max)

    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    position = np.zeros((h * w, 3))
    if hit.any():
        hit_t = t[hit]
        hit_rays = rays[hit]
        for _ in range(refine_steps):
            pts = pose.position + hit_t[:, None] * hit_rays
            d = field.eval_many(pts)
            g = field.grad_many(pts)
            denom = np.einsum("ij,ij->i", g, hit_rays)
            dt = np.where(np.abs(denom) > 0.2, -d / np.where(denom == 0, 1.0, denom), 0.0)
            hit_t = hit_t + np.clip(dt, -field.hit_eps, field.hit_eps)
        pts = pose.position + hit_t[:, None] * hit_rays
        position[hit] = pts
        _, _, f = pose.basis()
        depth[hit] = (pts - pose.position) @ f
        n = field.normal_many(pts)
        # unoriented field normals: flip to face the camera
        flip = np.einsum("ij,ij->i", n, rays[hit]) > 0
        n[flip] *= -1.0
        normal[hit] = n
    return GeometryMaps(
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        position=position.reshape(h, w, 3),
        hit_mask=hit.reshape(h, w),
    )


# ---- raster encodings (PNG diagnostics + wire payloads) -------------------

def depth_range(pose: CameraPose) -> tuple[float, float]:
    """Fixed near/far for depth quantization: [0, 2 * sphere radius]."""
    return 0.0, 2.0 * pose.sphere_radius


def encode_depth_u16(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    scaled = np.clip((depth - near) / (far - near), 0.0, 1.0)
    return np.round(scaled * 65535.0).astype(np.uint16)


def decode_depth_u16(raw: np.ndarray, near: float, far: float) -> np.ndarray:
    return raw.astype(np.float64) / 65535.0 * (far - near) + near


def encode_normal_u8(normal: np.ndarray, hit_mask: np.ndarray) -> np.ndarray:
    img = np.round((normal + 1.0) / 2.0 * 255.0).astype(np.uint8)
    img[~hit_mask] = 0
    return img


def decode_normal_u8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0 * 2.0 - 1.0


def encode_position_u8(position: np.ndarray, hit_mask: np.ndarray, bound: float = 1.0) -> np.ndarray:
    img = np.round(np.clip((position + bound) / (2 * bound), 0.0, 1.0) * 255.0).astype(np.uint8)
    img[~hit_mask] = 0
    return img


def save_png(path, array: np.ndarray) -> None:
    """uint8 gray/RGB or uint16 gray."""
    if array.dtype == np.uint16:
        Image.fromarray(array, mode="I;16").save(path)
    else:
        Image.fromarray(array).save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.array(img)
    if arr.dtype == np.int32:  # PIL promotes 16-bit gray to I
        arr = arr.astype(np.uint16)
    return arr


def save_maps_png(maps: GeometryMaps, pose: CameraPose, out_dir, stem: str = "view") -> dict:
    """Writes depth/normal/position PNGs; returns the written paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    near, far = depth_range(pose)
    paths = {
        "depth": out_dir / f"{stem}_depth.png",
        "normal": out_dir / f"{stem}_normal.png",
        "position": out_dir / f"{stem}_position.png",
    }
    save_png(paths["depth"], encode_depth_u16(maps.depth, near, far))
    save_png(paths["normal"], encode_normal_u8(maps.normal, maps.hit_mask))
    save_png(paths["position"], encode_position_u8(maps.position, maps.hit_mask))
    return paths
