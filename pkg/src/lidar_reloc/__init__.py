"""Global re-localization of a LiDAR scan inside a prebuilt point cloud map.

The map is cut into submaps along its trajectory, every submap and the
query scan are projected to panoramic range images, and a descriptor
backend turns each image into a place vector ``q`` and an orientation
vector ``w``. Nearest ``q`` neighbors give candidate places, ``w`` gives the
yaw offset, and ICP refines the resulting pose. A classifier head can
trigger the whole chain when the robot reaches a junction.
"""

from .config import RunConfig, load_config
from .database import DescriptorDatabase, KDTree, SubmapRecord
from .descriptors import DESCRIPTOR_DIM, ClassificationUnavailable, DescriptorPair
from .geometry import Pose, PointCloud, Trajectory, compose, inverse, transform_cloud
from .model import DescriptorNet, LearnedBackend, train
from .partition import MapBundle, Submap, partition_map
from .projection import ProjectionParams, RangeImage, project
from .registration import ReLocResult, icp_refine, relocalize
from .spectral import SpectralBackend

__version__ = "0.1.0"

__all__ = [
    "ClassificationUnavailable", "DESCRIPTOR_DIM", "DescriptorDatabase", "DescriptorNet",
    "DescriptorPair", "KDTree", "LearnedBackend", "MapBundle", "PointCloud", "Pose",
    "ProjectionParams", "RangeImage", "ReLocResult", "RunConfig", "SpectralBackend", "Submap",
    "SubmapRecord", "Trajectory", "compose", "icp_refine", "inverse", "load_config",
    "partition_map", "project", "relocalize", "train", "transform_cloud",
]
