"""Point cloud loading, validation, normalization, and spacing estimation.

The cloud is the geometric scaffold for the whole growth pipeline; point
order is a stable identity (index i here is index i everywhere downstream).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class CloudError(Exception):
    """Base for point-cloud input failures."""


class PlyHeaderError(CloudError):
    """Malformed or unsupported PLY header."""


class PlyPropertyError(CloudError):
    """Coordinate properties missing or not a float type."""


class TooFewPointsError(CloudError):
    """Fewer than the 4 non-coincident points the field needs."""


class NonFiniteError(CloudError):
    """NaN or infinite coordinates in the input."""


class DegenerateCloudError(CloudError):
    """All points coincident; no scale to normalize by."""


MIN_POINTS = 4

_PLY_FLOAT_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
}

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4,
    "double": 8, "float64": 8,
}


@dataclass
class SimilarityTransform:
    """Maps normalized coordinates back to the original frame: x -> x*scale + translation."""

    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) / self.scale


@dataclass
class PointCloud:
    points: np.ndarray
    input_normals: np.ndarray | None = None
    bounding_center: np.ndarray = field(default=None)  # type: ignore[assignment]
    bounding_radius: float = 0.0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise CloudError(f"points must be (N,3), got {self.points.shape}")
        if self.points.shape[0] < MIN_POINTS:
            raise TooFewPointsError(
                f"need at least {MIN_POINTS} points, got {self.points.shape[0]}"
            )
        if not np.isfinite(self.points).all():
            raise NonFiniteError("non-finite coordinates in point cloud")
        if self.input_normals is not None:
            self.input_normals = np.ascontiguousarray(self.input_normals, dtype=np.float64)
        if self.bounding_center is None:
            self._recompute_bounds()

    def _recompute_bounds(self):
        self.bounding_center = self.points.mean(axis=0)
        self.bounding_radius = float(
            np.linalg.norm(self.points - self.bounding_center, axis=1).max()
        )

    def __len__(self) -> int:
        return self.points.shape[0]


def _parse_ply_header(fh) -> tuple[str, int, list[tuple[str, str]], int]:
    """Returns (format, vertex_count, [(prop_type, prop_name)...], header_end_offset)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyHeaderError("not a PLY file (missing 'ply' magic)")
    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise PlyHeaderError("unexpected EOF in header")
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens:
            continue
        kw = tokens[0]
        if kw == "comment":
            continue
        if kw == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(f"unsupported PLY format: {line!r}")
            fmt = tokens[1]
        elif kw == "element":
            if len(tokens) != 3:
                raise PlyHeaderError(f"bad element line: {line!r}")
            if tokens[1] == "vertex":
                in_vertex = True
                try:
                    vertex_count = int(tokens[2])
                except ValueError as e:
                    raise PlyHeaderError(f"bad vertex count: {tokens[2]}") from e
            else:
                in_vertex = False
        elif kw == "property":
            if in_vertex:
                if tokens[1] == "list":
                    raise PlyPropertyError("list properties on vertices are unsupported")
                if len(tokens) != 3:
                    raise PlyHeaderError(f"bad property line: {line!r}")
                props.append((tokens[1], tokens[2]))
        elif kw == "end_header":
            break
    if fmt is None or vertex_count is None:
        raise PlyHeaderError("header missing format or vertex element")
    return fmt, vertex_count, props, fh.tell()


def load_ply(path) -> PointCloud:
    """Reads a PLY point cloud (ascii or binary little-endian, x/y/z float)."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, offset = _parse_ply_header(fh)
        names = [n for _, n in props]
        for coord in ("x", "y", "z"):
            if coord not in names:
                raise PlyPropertyError(f"missing vertex property '{coord}'")
            ptype = props[names.index(coord)][0]
            if ptype not in _PLY_FLOAT_TYPES:
                raise PlyPropertyError(f"property '{coord}' has non-float type '{ptype}'")
        has_normals = all(n in names for n in ("nx", "ny", "nz"))

        if fmt == "ascii":
            rows = []
            for _ in range(count):
                line = fh.readline()
                if not line:
                    raise PlyHeaderError("fewer vertex rows than declared")
                rows.append(line.split())
            data = {}
            for col, (ptype, name) in enumerate(props):
                if name in ("x", "y", "z", "nx", "ny", "nz"):
                    data[name] = np.array([float(r[col]) for r in rows], dtype=np.float64)
        else:
            dtype = np.dtype(
                [
                    (name, _PLY_FLOAT_TYPES[ptype][0] if ptype in _PLY_FLOAT_TYPES else f"V{_PLY_SIZES[ptype]}")
                    for ptype, name in props
                ]
            )
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise PlyHeaderError("binary payload shorter than declared")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            data = {
                name: rec[name].astype(np.float64)
                for ptype, name in props
                if name in ("x", "y", "z", "nx", "ny", "nz") and ptype in _PLY_FLOAT_TYPES
            }
            has_normals = has_normals and all(k in data for k in ("nx", "ny", "nz"))

    points = np.stack([data["x"], data["y"], data["z"]], axis=1)
    normals = None
    if has_normals:
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1)
    return PointCloud(points=points, input_normals=normals)


def export_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Writes the cloud back out; binary little-endian float64 preserves bits."""
    path = Path(path)
    n = len(cloud)
    has_normals = cloud.input_normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header.extend(f"property double {p}" for p in props)
    header.append("end_header")
    cols = cloud.points
    if has_normals:
        cols = np.hstack([cloud.points, cloud.input_normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
        else:
            for row in cols:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def normalize_to_unit(cloud: PointCloud) -> tuple[PointCloud, SimilarityTransform]:
    """Centers at the origin and scales the bounding radius to 1.

    The returned transform maps normalized coordinates back to the input
    frame exactly.
    """
    center = cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(cloud.points - center, axis=1).max())
    if radius <= 0.0:
        raise DegenerateCloudError("all points coincident")
    pts = (cloud.points - center) / radius
    out = PointCloud(points=pts, input_normals=cloud.input_normals)
    return out, SimilarityTransform(scale=radius, translation=center)


def estimate_spacing(
    cloud: PointCloud, k: int = 8, brute_force: bool = False
) -> tuple[np.ndarray, int]:
    """Per-point mean distance to the k nearest neighbors.

    Zero spacings (duplicated points) are clamped to the global median;
    returns (spacing, clamped_count). `brute_force=True` keeps an O(N^2)
    oracle path alive for tests.
    """
    n = len(cloud)
    if k >= n:
        raise CloudError(f"k={k} must be < N={n}")
    pts = cloud.points
    if brute_force:
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        dist = np.sqrt(np.sort(d2, axis=1)[:, :k])
    else:
        tree = cKDTree(pts)
        dist, _ = tree.query(pts, k=k + 1, workers=-1)
        dist = dist[:, 1:]
    spacing = dist.mean(axis=1)
    clamped = 0
    zero = spacing <= 0.0
    if zero.any():
        med = float(np.median(spacing[~zero])) if (~zero).any() else 1e-6
        clamped = int(zero.sum())
        spacing = np.where(zero, med, spacing)
    return spacing, clamped


def write_ascii_ply(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    """Tiny ascii writer for fixtures and tests (float32-formatted columns)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines.extend(f"property float {p}" for p in props)
    lines.append("end_header")
    cols = points if normals is None else np.hstack([points, normals])
    for row in cols:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
