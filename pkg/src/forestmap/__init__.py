"""Lidar mapping with ICP and automatic DBH estimation by cylinder fitting."""

from .circle import Circle2D, HyperCircleFitter, hyper_circle_fit
from .cylinder import (
    Cylinder,
    CylinderFitter,
    RansacSettings,
    axis_lls,
    cylinder_nls,
    project_to_plane,
    ransac_cylinder,
)
from .dbh import (
    METHODS,
    DbhEstimate,
    DbhEstimator,
    EstimationConfig,
    estimate_dbh,
    estimate_trees,
    extract_slice,
)
from .dtm import RasterDtm, TerrainModel, build_dtm, ground_height
from .geometry import BoundingBox, PointCloud, RigidTransform
from .icp import (
    IcpConfig,
    IcpMapper,
    IcpRegistration,
    OdometrySequence,
    Trajectory,
    build_map,
    icp_register,
    input_filters,
)
from .io import TreeRecord, load_cloud, save_cloud
from .metrics import (
    MetricsReport,
    TreeObservation,
    compute_metrics,
    distance_profile,
    min_observation_distance,
    sweep,
)
from .neighbors import NormalEstimator, VoxelDownsampler, estimate_normals, knn, voxel_downsample

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Circle2D", "Cylinder", "CylinderFitter", "DbhEstimate", "DbhEstimator",
    "EstimationConfig", "HyperCircleFitter", "IcpConfig", "IcpMapper", "IcpRegistration",
    "METHODS", "MetricsReport", "NormalEstimator", "OdometrySequence", "PointCloud",
    "RansacSettings", "RasterDtm", "RigidTransform", "TerrainModel", "Trajectory",
    "TreeObservation", "TreeRecord", "VoxelDownsampler", "axis_lls", "build_dtm", "build_map",
    "compute_metrics", "cylinder_nls", "distance_profile", "estimate_dbh", "estimate_normals",
    "estimate_trees", "extract_slice", "ground_height", "hyper_circle_fit", "icp_register",
    "input_filters", "knn", "load_cloud", "min_observation_distance", "project_to_plane",
    "ransac_cylinder", "save_cloud", "sweep", "voxel_downsample",
]
