"""splatgrow: grows colored oriented Gaussian disks over a point cloud.

Geometry comes from the cloud (an approximate unsigned distance field
supplies normals and geometric maps); appearance comes from a pluggable
view-synthesis backend and is optimized view by view, with pose
optimization steering extra cameras at overlap seams and unseen regions.
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
