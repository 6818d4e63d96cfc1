import numpy as np
import pytest

from splatgrow.cloud import estimate_spacing
from splatgrow.field import UnsignedField
from splatgrow.fixtures import fibonacci_sphere, grid_plane, torus_cloud
from splatgrow.gaussians import GaussianSet, init_from_cloud
from splatgrow.geom import quat_from_z_to


@pytest.fixture(scope="session")
def sphere_cloud():
    return fibonacci_sphere(5000)


@pytest.fixture(scope="session")
def sphere_field(sphere_cloud):
    return UnsignedField(sphere_cloud)


@pytest.fixture(scope="session")
def sphere_set(sphere_cloud, sphere_field):
    spacing, _ = estimate_spacing(sphere_cloud)
    return init_from_cloud(sphere_cloud, sphere_field, spacing)


@pytest.fixture(scope="session")
def small_sphere_cloud():
    return fibonacci_sphere(800)


@pytest.fixture(scope="session")
def small_sphere_field(small_sphere_cloud):
    return UnsignedField(small_sphere_cloud)


@pytest.fixture(scope="session")
def small_sphere_set(small_sphere_cloud, small_sphere_field):
    spacing, _ = estimate_spacing(small_sphere_cloud)
    return init_from_cloud(small_sphere_cloud, small_sphere_field, spacing)


@pytest.fixture(scope="session")
def plane_cloud():
    # odd side: the origin is a grid vertex, keeping on-axis queries symmetric
    return grid_plane(side=41, step=0.05)


@pytest.fixture(scope="session")
def torus():
    return torus_cloud(4000)


def random_disk_set(rng, n, spread=0.5, opacity_range=(0.3, 0.95),
                    scale_range=(0.05, 0.15)) -> GaussianSet:
    """Random disk scene for renderer and visibility tests."""
    centers = rng.uniform(-spread, spread, (n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return GaussianSet(
        centers=centers,
        rotations=quat_from_z_to(normals),
        scales=rng.uniform(*scale_range, (n, 2)),
        opacities=rng.uniform(*opacity_range, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
        grown=np.zeros(n, dtype=bool),
        source_index=np.arange(n),
    )
