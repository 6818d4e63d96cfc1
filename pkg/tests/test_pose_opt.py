import numpy as np
import pytest

from splatgrow.camera import CameraPose, Intrinsics, from_spherical
from splatgrow.fixtures import fibonacci_sphere, spherical_cap_indices
from splatgrow.geom import icosphere_directions
from splatgrow.pose_opt import (
    PoseOptConfig, PoseOptError, align_loss, align_loss_grad,
    dense_sphere_argmin, occlusion_loss, occlusion_loss_reference,
    optimize_overlap_pose, optimize_unseen_pose,
)
from splatgrow.visibility import OverlapRegion

from conftest import random_disk_set


def _cap_region(cloud, gset, direction, half_angle):
    idx = spherical_cap_indices(cloud, direction, half_angle)
    return OverlapRegion(
        view_pair=(0, 1), members=idx,
        centroid=cloud.points[idx].mean(axis=0),
        mean_normal=np.asarray(direction, dtype=np.float64),
    )


SMALL_INTR = Intrinsics(width=128, height=128)


def test_align_loss_parallel_zero():
    from splatgrow.gaussians import GaussianSet
    from splatgrow.geom import quat_from_z_to

    n = np.array([0.3, -0.5, 0.81])
    n /= np.linalg.norm(n)
    gset = GaussianSet(
        centers=np.zeros((1, 3)), rotations=quat_from_z_to(n[None, :]),
        scales=np.full((1, 2), 0.1), opacities=np.array([0.9]),
        colors=np.full((1, 3), 0.5), grown=np.zeros(1, dtype=bool),
        source_index=np.arange(1),
    )
    region = OverlapRegion((0, 1), np.array([0]), np.zeros(3), n)
    # camera on the sphere along the normal: the ray is parallel to it
    assert align_loss(region, gset, 2.5 * n) < 1e-9


def test_align_loss_orthogonal_one():
    from splatgrow.gaussians import GaussianSet
    from splatgrow.geom import quat_from_z_to

    gset = GaussianSet(
        centers=np.zeros((1, 3)),
        rotations=quat_from_z_to(np.array([[0.0, 0, 1]])),
        scales=np.full((1, 2), 0.1), opacities=np.array([0.9]),
        colors=np.full((1, 3), 0.5), grown=np.zeros(1, dtype=bool),
        source_index=np.arange(1),
    )
    region = OverlapRegion((0, 1), np.array([0]), np.zeros(3), np.array([0.0, 0, 1]))
    # camera on the equator: ray to the origin is orthogonal to the +z normal
    loss = align_loss(region, gset, np.array([2.5, 0.0, 0.0]))
    assert abs(loss - 1.0) < 1e-9


def test_align_grad_matches_fd(small_sphere_set, small_sphere_cloud):
    rng = np.random.default_rng(33)
    h = 1e-6
    errs = []
    for _ in range(100):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        cap = spherical_cap_indices(small_sphere_cloud, rng.normal(size=3), np.deg2rad(30))
        if cap.size == 0:
            continue
        region = OverlapRegion((0, 1), cap, small_sphere_cloud.points[cap].mean(axis=0), d)
        pos = 2.5 * d
        _, g = align_loss_grad(region, small_sphere_set, pos)
        fd = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[k] = (
                align_loss(region, small_sphere_set, pos + e)
                - align_loss(region, small_sphere_set, pos - e)
            ) / (2 * h)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert len(errs) >= 100 - 5
    assert max(errs) < 1e-5


def test_align_loss_empty_region(small_sphere_set):
    region = OverlapRegion((0, 1), np.array([], dtype=np.int64), np.zeros(3), None)
    with pytest.raises(PoseOptError):
        align_loss(region, small_sphere_set, np.array([2.5, 0, 0]))


def test_optimize_overlap_cap_matches_dense_oracle(small_sphere_set, small_sphere_cloud):
    u = np.array([0.2, 0.3, 0.93])
    u /= np.linalg.norm(u)
    region = _cap_region(small_sphere_cloud, small_sphere_set, u, np.deg2rad(20))
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    res = optimize_overlap_pose(region, small_sphere_set, cfg)
    opt_dir = res.pose.position / np.linalg.norm(res.pose.position)

    dense_dir, dense_loss, _ = dense_sphere_argmin(
        lambda d: align_loss(region, small_sphere_set, 2.5 * d), level=5
    )
    angle = np.degrees(np.arccos(np.clip(opt_dir @ dense_dir, -1, 1)))
    assert angle < 3.0
    assert res.loss <= dense_loss + 1e-9
    # the optimum sits on the cap axis (sign ambiguous under |cos|)
    axis_angle = np.degrees(np.arccos(np.clip(abs(opt_dir @ u), -1, 1)))
    assert axis_angle < 3.0


def test_optimize_overlap_planar_patch_pole():
    from splatgrow.gaussians import GaussianSet
    from splatgrow.geom import quat_from_z_to

    rng = np.random.default_rng(5)
    n = 40
    centers = np.zeros((n, 3))
    # tight patch: per-disk ray tilt from the pole stays ~1e-3 rad, so the
    # summed 1-|cos| terms can actually reach < 1e-4
    centers[:, :2] = rng.uniform(-0.003, 0.003, (n, 2))
    normals = np.tile([0.0, 0, 1.0], (n, 1))
    gset = GaussianSet(
        centers=centers, rotations=quat_from_z_to(normals),
        scales=np.full((n, 2), 0.08), opacities=np.full(n, 0.9),
        colors=np.full((n, 3), 0.5), grown=np.zeros(n, dtype=bool),
        source_index=np.arange(n),
    )
    region = OverlapRegion((0, 1), np.arange(n), centers.mean(axis=0), np.array([0.0, 0, 1]))
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    res = optimize_overlap_pose(region, gset, cfg)
    d = res.pose.position / 2.5
    assert abs(abs(d[2]) - 1.0) < 0.01  # either pole
    assert res.loss < 1e-4


def test_optimize_overlap_multistart_dominance(small_sphere_set, small_sphere_cloud):
    # two antipodal caps in one region: result must beat every single seed
    cap_a = spherical_cap_indices(small_sphere_cloud, [1, 0, 0], np.deg2rad(15))
    cap_b = spherical_cap_indices(small_sphere_cloud, [-1, 0, 0], np.deg2rad(15))
    members = np.union1d(cap_a, cap_b)
    region = OverlapRegion((0, 1), members, np.zeros(3), np.array([1.0, 0, 0]))
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    res = optimize_overlap_pose(region, small_sphere_set, cfg)
    seeds = icosphere_directions(0)[: cfg.restarts]
    seed_losses = [align_loss(region, small_sphere_set, 2.5 * s) for s in seeds]
    assert res.loss <= min(seed_losses) + 1e-12


def test_pose_iterates_stay_on_sphere(small_sphere_set, small_sphere_cloud):
    u = np.array([0.0, 1.0, 0.0])
    region = _cap_region(small_sphere_cloud, small_sphere_set, u, np.deg2rad(25))
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    res = optimize_overlap_pose(region, small_sphere_set, cfg)
    assert abs(np.linalg.norm(res.pose.position) - 2.5) < 1e-6
    # loss non-increasing per restart across accepted steps
    by_restart = {}
    for restart, it, loss in res.trace:
        by_restart.setdefault(restart, []).append(loss)
    for losses in by_restart.values():
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


# ---- occlusion loss -----------------------------------------------------------


def _half_grown(gset, axis=0):
    g = gset.copy()
    g.grown[:] = g.centers[:, axis] > 0
    return g


def test_occlusion_requires_both_kinds(small_sphere_set):
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    pose = from_spherical(0, 0, 2.5, SMALL_INTR)
    with pytest.raises(PoseOptError):
        occlusion_loss(small_sphere_set, pose, cfg)  # nothing grown
    allgrown = small_sphere_set.copy()
    allgrown.grown[:] = True
    with pytest.raises(PoseOptError):
        occlusion_loss(allgrown, pose, cfg)


def test_occlusion_saturated_pair():
    from splatgrow.geom import sigmoid

    # one un-grown disk exactly behind one grown disk with identical
    # projections, tau=50, dz=1, (rho_i+rho_j)^2 = 1 -> sigma(50)^2
    val = sigmoid(50.0 * 1.0 - 0.0) * sigmoid(50.0 * 1.0)
    assert abs(val - 1.0) < 1e-9


def test_occlusion_pruned_equals_exact(small_sphere_set):
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    rng = np.random.default_rng(77)
    for seed in range(5):
        gset = random_disk_set(np.random.default_rng(200 + seed), 150)
        gset.grown[:] = np.random.default_rng(300 + seed).random(150) < 0.5
        if not gset.grown.any() or gset.grown.all():
            continue
        pose = from_spherical(rng.uniform(0, 2 * np.pi), rng.uniform(-1.2, 1.2), 2.5, SMALL_INTR)
        exact = occlusion_loss(gset, pose, cfg, exact=True)
        pruned = occlusion_loss(gset, pose, cfg, exact=False)
        ref = occlusion_loss_reference(gset, pose, cfg)
        assert abs(pruned - exact) < 1e-9
        assert abs(exact - ref) < 1e-6 * max(1.0, abs(ref))


def test_occlusion_permutation_invariant(small_sphere_set):
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    gset = _half_grown(small_sphere_set)
    pose = from_spherical(0.7, 0.2, 2.5, SMALL_INTR)
    base = occlusion_loss(gset, pose, cfg, exact=True)
    rng = np.random.default_rng(55)
    perm = rng.permutation(len(gset))
    from splatgrow.gaussians import GaussianSet

    gperm = GaussianSet(
        centers=gset.centers[perm], rotations=gset.rotations[perm],
        scales=gset.scales[perm], opacities=gset.opacities[perm],
        colors=gset.colors[perm], grown=gset.grown[perm],
        source_index=gset.source_index[perm],
    )
    assert abs(occlusion_loss(gperm, pose, cfg, exact=True) - base) < 1e-9


def test_losses_rotation_equivariant(small_sphere_set, small_sphere_cloud):
    from scipy.spatial.transform import Rotation

    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    gset = _half_grown(small_sphere_set)
    rot = Rotation.from_rotvec([0.3, -0.5, 0.8]).as_matrix()

    # align loss under joint rotation of scene + camera
    cap = spherical_cap_indices(small_sphere_cloud, [0, 0, 1], np.deg2rad(30))
    region = OverlapRegion((0, 1), cap, small_sphere_cloud.points[cap].mean(axis=0), None)
    pos = 2.5 * np.array([0.3, -0.2, 0.93]) / np.linalg.norm([0.3, -0.2, 0.93])
    base = align_loss(region, gset, pos)

    from splatgrow.gaussians import GaussianSet

    grot = GaussianSet(
        centers=gset.centers @ rot.T, rotations=gset.rotations,
        scales=gset.scales, opacities=gset.opacities, colors=gset.colors,
        grown=gset.grown, source_index=gset.source_index,
        normals=gset.normals @ rot.T,
    )
    rotated = align_loss(region, grot, rot @ pos)
    assert abs(base - rotated) < 1e-9


def test_optimize_unseen_half_grown_direction(small_sphere_set):
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=Intrinsics(width=256, height=256))
    gset = _half_grown(small_sphere_set)  # grown where x > 0
    res = optimize_unseen_pose(gset, cfg)
    d = res.pose.position / np.linalg.norm(res.pose.position)
    ungrown_dir = gset.centers[~gset.grown].mean(axis=0)
    ungrown_dir /= np.linalg.norm(ungrown_dir)
    assert d @ ungrown_dir > 0.9


def test_optimize_unseen_depth_preference():
    # un-grown disks strictly nearer the +z camera than all grown disks
    rng = np.random.default_rng(60)
    gset = random_disk_set(rng, 60)
    gset.centers[:30, 2] = rng.uniform(0.4, 0.6, 30)    # high: near +z pole camera
    gset.centers[30:, 2] = rng.uniform(-0.6, -0.4, 30)  # low
    gset.grown[:] = False
    gset.grown[30:] = True  # grown are far from +z, near -z
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    top = occlusion_loss(gset, from_spherical(0, np.pi / 2, 2.5, SMALL_INTR), cfg, exact=True)
    bottom = occlusion_loss(gset, from_spherical(0, -np.pi / 2, 2.5, SMALL_INTR), cfg, exact=True)
    assert top < bottom


def test_optimize_unseen_matches_dense_oracle(small_sphere_set):
    cfg = PoseOptConfig(sphere_radius=2.5, intrinsics=SMALL_INTR)
    gset = _half_grown(small_sphere_set, axis=2)

    def loss_dir(d):
        pose = CameraPose(position=2.5 * d, intrinsics=SMALL_INTR, sphere_radius=2.5)
        return occlusion_loss(gset, pose, cfg)

    res = optimize_unseen_pose(gset, cfg)
    _, dense_loss, _ = dense_sphere_argmin(loss_dir, level=2)
    assert res.loss <= dense_loss * 1.02 + 1e-9


def test_tau_variant_flag(small_sphere_set):
    gset = _half_grown(small_sphere_set)
    pose = from_spherical(0.3, 0.3, 2.5, SMALL_INTR)
    base = occlusion_loss(gset, pose, PoseOptConfig(intrinsics=SMALL_INTR), exact=True)
    variant = occlusion_loss(
        gset, pose, PoseOptConfig(intrinsics=SMALL_INTR, tau_scales_all=True), exact=True
    )
    assert base != variant


def test_config_validation():
    with pytest.raises(PoseOptError):
        PoseOptConfig(tau=0.0)
    with pytest.raises(PoseOptError):
        PoseOptConfig(restarts=0)
