import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatgrow.cloud import (
    CloudError, DegenerateCloudError, NonFiniteError, PlyHeaderError,
    PlyPropertyError, PointCloud, TooFewPointsError, estimate_spacing,
    export_ply, load_ply, normalize_to_unit, write_ascii_ply,
)
from splatgrow.fixtures import cube_corners, fibonacci_sphere, grid_plane


def test_load_ascii_too_few_points(tmp_path):
    path = tmp_path / "three.ply"
    write_ascii_ply(path, np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    with pytest.raises(TooFewPointsError):
        load_ply(path)


def test_load_ascii_cube_corners(tmp_path):
    path = tmp_path / "cube.ply"
    write_ascii_ply(path, cube_corners(1.0).points)
    cloud = load_ply(path)
    assert len(cloud) == 8
    assert abs(cloud.bounding_radius - np.sqrt(3.0)) < 1e-6


def test_binary_roundtrip_bitwise(tmp_path):
    cloud = fibonacci_sphere(5000)
    path = tmp_path / "sphere.ply"
    export_ply(cloud, path, binary=True)
    again = load_ply(path)
    assert np.array_equal(cloud.points, again.points)
    # load -> export -> load is idempotent
    path2 = tmp_path / "sphere2.ply"
    export_ply(again, path2, binary=True)
    third = load_ply(path2)
    assert np.array_equal(again.points, third.points)


def test_load_rejects_non_float_coords(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 4\n"
        "property int x\nproperty float y\nproperty float z\nend_header\n"
        "0 0 0\n1 0 0\n0 1 0\n0 0 1\n"
    )
    with pytest.raises(PlyPropertyError):
        load_ply(path)


def test_load_rejects_malformed_header(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("not a ply\n")
    with pytest.raises(PlyHeaderError):
        load_ply(path)


def test_load_rejects_non_finite(tmp_path):
    path = tmp_path / "nan.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 4\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
        "0 0 0\n1 0 0\n0 1 0\nnan 0 1\n"
    )
    with pytest.raises(NonFiniteError):
        load_ply(path)


def test_load_skips_extra_properties_binary(tmp_path):
    cloud = fibonacci_sphere(10)
    n = len(cloud)
    path = tmp_path / "extra.ply"
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nend_header\n"
    )
    import numpy.lib.recfunctions  # noqa: F401

    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
    for i, name in enumerate(("x", "y", "z")):
        rec[name] = cloud.points[:, i].astype(np.float32)
    rec["red"] = 7
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(rec.tobytes())
    again = load_ply(path)
    assert np.allclose(again.points, cloud.points, atol=1e-6)


def test_normalize_identity_when_already_unit():
    cloud, _ = normalize_to_unit(fibonacci_sphere(100))
    _, tf = normalize_to_unit(cloud)
    assert abs(tf.scale - 1.0) < 1e-9
    assert np.all(np.abs(tf.translation) < 1e-9)


def test_normalize_cube_at_pm10():
    cloud = cube_corners(10.0)
    normed, tf = normalize_to_unit(cloud)
    assert abs(tf.scale - 10.0 * np.sqrt(3.0)) < 1e-9
    assert np.all(np.abs(tf.translation) < 1e-12)
    assert abs(normed.bounding_radius - 1.0) < 1e-6
    assert np.all(np.abs(normed.bounding_center) < 1e-9)


def test_normalize_roundtrip_random():
    rng = np.random.default_rng(11)
    cloud = PointCloud(points=rng.normal(2.0, 3.0, (500, 3)))
    normed, tf = normalize_to_unit(cloud)
    back = tf.apply(normed.points)
    assert np.allclose(back, cloud.points, atol=1e-6)


def test_normalize_idempotent():
    rng = np.random.default_rng(12)
    cloud = PointCloud(points=rng.normal(0.0, 2.0, (200, 3)))
    once, _ = normalize_to_unit(cloud)
    twice, tf = normalize_to_unit(once)
    assert np.allclose(once.points, twice.points, atol=1e-9)
    assert abs(tf.scale - 1.0) < 1e-9


def test_normalize_degenerate():
    cloud = PointCloud(points=np.ones((5, 3)))
    with pytest.raises(DegenerateCloudError):
        normalize_to_unit(cloud)


def test_spacing_3d_grid_interior_k6():
    # 5x5x5 grid, step h: an interior point's 6 nearest are the axis
    # neighbors at exactly h
    h = 0.1
    axis = np.arange(5) * h
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    cloud = PointCloud(points=np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1))
    spacing, clamped = estimate_spacing(cloud, k=6)
    assert clamped == 0
    interior = 2 * 25 + 2 * 5 + 2  # index of (2,2,2)
    assert abs(spacing[interior] - h) < 1e-9


def test_spacing_isolated_point_k1():
    # k=1 spacing of an isolated point is the distance to its nearest neighbor
    cloud = PointCloud(
        points=np.array([[0.0, 0, 0], [0, 0, 1], [0, 1, 0], [3.0, 0, 0]])
    )
    spacing, _ = estimate_spacing(cloud, k=1)
    assert abs(spacing[3] - 3.0) < 1e-12
    assert abs(spacing[0] - 1.0) < 1e-12


def test_spacing_matches_bruteforce_oracle():
    cloud = fibonacci_sphere(800)
    fast, _ = estimate_spacing(cloud, k=8)
    brute, _ = estimate_spacing(cloud, k=8, brute_force=True)
    assert np.allclose(fast, brute, rtol=0, atol=1e-12)


def test_spacing_duplicate_clamped():
    pts = np.vstack([fibonacci_sphere(50).points, [[1.0, 0, 0]], [[1.0, 0, 0]]])
    # two exact duplicates of each other
    pts[-2] = pts[-1] = np.array([0.3, 0.3, 0.3])
    cloud = PointCloud(points=pts)
    spacing, clamped = estimate_spacing(cloud, k=1)
    assert clamped == 2
    assert np.all(spacing > 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_spacing_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (60, 3))
    cloud = PointCloud(points=pts)
    perm = rng.permutation(60)
    spacing, _ = estimate_spacing(cloud, k=5)
    spacing_p, _ = estimate_spacing(PointCloud(points=pts[perm]), k=5)
    assert np.allclose(spacing[perm], spacing_p, atol=1e-12)


def test_input_normals_retained(tmp_path):
    pts = fibonacci_sphere(10).points
    normals = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    path = tmp_path / "n.ply"
    write_ascii_ply(path, pts, normals)
    cloud = load_ply(path)
    assert cloud.input_normals is not None
    assert np.allclose(cloud.input_normals, normals, atol=1e-6)


def test_estimate_spacing_k_too_large():
    cloud = fibonacci_sphere(10)
    with pytest.raises(CloudError):
        estimate_spacing(cloud, k=10)
