"""Oriented-disk Gaussian primitives grown over a point cloud.

Geometry (center, rotation, scale) is frozen at initialization: the cloud is
the trusted prior, and only color and opacity are ever optimized. The
per-disk `grown` flag tracks whether appearance optimization has touched a
disk; it is monotone over the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .field import UnsignedField
from .geom import logit, quat_from_z_to, quat_to_matrix, sigmoid

SCALE_MIN = 1e-5
SCALE_MAX = 0.5
OPACITY_INIT = 0.9
COLOR_INIT = 0.5
SH_C0 = 0.28209479177387814


class GaussianError(Exception):
    pass


@dataclass
class GaussianDisk:
    """Read-only per-disk view; the set stores everything as arrays."""

    center: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z); disk plane ⟂ normal
    scale: np.ndarray     # two in-plane semi-axes
    opacity: float
    color: np.ndarray
    grown: bool
    source_index: int

    @property
    def normal(self) -> np.ndarray:
        return quat_to_matrix(self.rotation[None, :])[0, :, 2]


class GaussianSet:
    """Array-of-struct-free container; single-writer, snapshot-safe readers.

    `version` increments on every mutation so renderer fragment caches can
    detect staleness.
    """

    def __init__(self, centers, rotations, scales, opacities, colors, grown,
                 source_index, normals=None, normal_fallback=None):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64)
        self.grown = np.ascontiguousarray(grown, dtype=bool)
        self.source_index = np.ascontiguousarray(source_index, dtype=np.int64)
        if normals is None:
            normals = quat_to_matrix(self.rotations)[:, :, 2]
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        self.normal_fallback = (
            np.zeros(len(self), dtype=bool) if normal_fallback is None
            else np.ascontiguousarray(normal_fallback, dtype=bool)
        )
        self.version = 0

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def grown_count(self) -> int:
        return int(self.grown.sum())

    @property
    def grown_fraction(self) -> float:
        return self.grown_count / max(1, len(self))

    def disk(self, i: int) -> GaussianDisk:
        return GaussianDisk(
            center=self.centers[i].copy(),
            rotation=self.rotations[i].copy(),
            scale=self.scales[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            grown=bool(self.grown[i]),
            source_index=int(self.source_index[i]),
        )

    def set_colors(self, idx, values) -> None:
        self.colors[idx] = values
        self.version += 1

    def set_opacities(self, idx, values) -> None:
        self.opacities[idx] = values
        self.version += 1

    def mark_grown(self, idx) -> None:
        self.grown[idx] = True
        self.version += 1

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.centers.copy(), self.rotations.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(), self.grown.copy(),
            self.source_index.copy(), self.normals.copy(),
            self.normal_fallback.copy(),
        )


def init_from_cloud(
    cloud: PointCloud, field: UnsignedField, spacing: np.ndarray
) -> GaussianSet:
    """One disk per point: center at the point, plane ⟂ field normal,
    isotropic scale = local spacing, mid-gray and near-opaque, un-grown."""
    n = len(cloud)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape[0] != n:
        raise GaussianError("spacing length must match point count")
    normals, fallback = field.normal_many(cloud.points, return_flags=True)

    # orient away from the cloud centroid where that is unambiguous
    centroid = cloud.points.mean(axis=0)
    outward = cloud.points - centroid
    dots = np.einsum("ij,ij->i", normals, outward)
    flip = dots < -0.1
    normals = np.where(flip[:, None], -normals, normals)

    rotations = quat_from_z_to(normals)
    normals = quat_to_matrix(rotations)[:, :, 2]  # exact rotated +z
    scales = np.clip(spacing, SCALE_MIN, SCALE_MAX)[:, None].repeat(2, axis=1)
    return GaussianSet(
        centers=cloud.points.copy(),
        rotations=rotations,
        scales=scales,
        opacities=np.full(n, OPACITY_INIT),
        colors=np.full((n, 3), COLOR_INIT),
        grown=np.zeros(n, dtype=bool),
        source_index=np.arange(n),
        normals=normals,
        normal_fallback=fallback,
    )


@dataclass
class InpaintReport:
    rounds: int
    filled: int
    still_ungrown: np.ndarray


def spatial_inpaint(gset: GaussianSet, radius: float, max_rounds: int = 5) -> InpaintReport:
    """Propagates color/opacity from grown neighbors to un-grown disks.

    Round-synchronous: every un-grown disk with at least one grown neighbor
    within `radius` receives the inverse-distance-weighted average of those
    neighbors (previous round's grown set) and is then marked grown.
    """
    if not gset.grown.any():
        raise GaussianError("nothing to propagate: no grown disks")
    filled_total = 0
    rounds = 0
    for _ in range(max_rounds):
        ungrown_idx = np.where(~gset.grown)[0]
        if ungrown_idx.size == 0:
            break
        grown_idx = np.where(gset.grown)[0]
        tree = cKDTree(gset.centers[grown_idx])
        neighbors = tree.query_ball_point(gset.centers[ungrown_idx], r=radius, workers=-1)
        new_colors = {}
        new_opac = {}
        for ui, nbrs in zip(ungrown_idx, neighbors):
            if not nbrs:
                continue
            gidx = grown_idx[np.sort(np.asarray(nbrs))]
            d = np.linalg.norm(gset.centers[gidx] - gset.centers[ui], axis=1)
            w = 1.0 / np.maximum(d, 1e-12)
            w /= w.sum()
            new_colors[ui] = w @ gset.colors[gidx]
            new_opac[ui] = float(w @ gset.opacities[gidx])
        if not new_colors:
            break
        rounds += 1
        idx = np.array(sorted(new_colors), dtype=np.int64)
        gset.set_colors(idx, np.stack([new_colors[i] for i in idx]))
        gset.set_opacities(idx, np.array([new_opac[i] for i in idx]))
        gset.mark_grown(idx)
        filled_total += idx.size
    return InpaintReport(
        rounds=rounds, filled=filled_total, still_ungrown=np.where(~gset.grown)[0]
    )


# ---- splat PLY export / reference reader ----------------------------------

_SPLAT_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
     "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)

_OPACITY_CLAMP = 1e-4


def export_splat_ply(gset: GaussianSet, path) -> None:
    """Binary little-endian splat PLY in the layout common splat viewers read.

    Colors are stored as SH DC coefficients, opacity as a logit, scales as
    logs (third axis pinned to log(1e-5) for disk thinness).
    """
    if len(gset) == 0:
        raise GaussianError("empty set")
    n = len(gset)
    cols = np.empty((n, len(_SPLAT_FIELDS)), dtype=np.float64)
    cols[:, 0:3] = gset.centers
    cols[:, 3:6] = gset.normals
    cols[:, 6:9] = (gset.colors - 0.5) / SH_C0
    cols[:, 9] = logit(np.clip(gset.opacities, _OPACITY_CLAMP, 1.0 - _OPACITY_CLAMP))
    cols[:, 10:12] = np.log(np.clip(gset.scales, SCALE_MIN, None))
    cols[:, 12] = np.log(1e-5)
    cols[:, 13:17] = gset.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header.extend(f"property float {f}" for f in _SPLAT_FIELDS)
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(cols.astype("<f4").tobytes())


def read_splat_ply(path) -> dict[str, np.ndarray]:
    """Reference splat-PLY parser: header-driven, independent of the writer.

    Returns a dict of float64 columns keyed by property name.
    """
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise GaussianError("not a PLY file")
        fmt = None
        count = None
        names: list[str] = []
        types: list[str] = []
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end_header":
                break
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                types.append(tok[1])
                names.append(tok[2])
        if fmt != "binary_little_endian" or count is None:
            raise GaussianError("reference parser expects binary_little_endian")
        np_types = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        dtype = np.dtype([(nm, np_types[tp]) for nm, tp in zip(names, types)])
        rec = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
    return {nm: rec[nm].astype(np.float64) for nm in names}


def set_from_splat_arrays(cols: dict[str, np.ndarray]) -> GaussianSet:
    """Rebuilds a GaussianSet from parsed splat PLY columns (inverse of export)."""
    n = cols["x"].shape[0]
    centers = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    colors = np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1) * SH_C0 + 0.5
    opac = sigmoid(cols["opacity"])
    scales = np.exp(np.stack([cols["scale_0"], cols["scale_1"]], axis=1))
    rots = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1)
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    return GaussianSet(
        centers=centers, rotations=rots, scales=scales, opacities=opac,
        colors=np.clip(colors, 0.0, 1.0), grown=np.ones(n, dtype=bool),
        source_index=np.arange(n), normals=normals,
    )
