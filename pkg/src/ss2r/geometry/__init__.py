from .camera import DepthMap, Intrinsics, camera_rays, look_at, project, unproject
from .fusion import GridConfig, TsdfGrid, extract_points, fuse_depths, fuse_to_points
from .metrics import chamfer_l2, cloud_metrics, f_score, normalize_pair, voxel_iou
from .patches import GENERATED, REAL, PointPatch, split_patches

__all__ = [
    "DepthMap", "Intrinsics", "camera_rays", "look_at", "project", "unproject",
    "GridConfig", "TsdfGrid", "fuse_depths", "extract_points", "fuse_to_points",
    "normalize_pair", "chamfer_l2", "f_score", "voxel_iou", "cloud_metrics",
    "PointPatch", "split_patches", "REAL", "GENERATED",
]
