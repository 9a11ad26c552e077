"""Geometry, view transform, occupancy labels, fusion, losses and metrics for BEV occupancy-guided detection."""

from .boxes import DETECTION_CLASSES, BoxSet, make_row
from .fusion import FusionAdapter, FusionConfig, PyramidFeatures, modality_fuse, pyramid_decode, pyramid_fuse
from .geometry import CameraIntrinsics, CameraRig, RigidTransform, compose, invert, project, transform_points, unproject
from .losses import LossConfig, gaussian_focal_loss, l1_box_loss, lovasz_softmax, weighted_cross_entropy
from .metrics import average_precision, evaluate_detections, match_by_center_distance, nds, voxel_miou
from .pipeline import PipelineConfig, decode_heatmap, run_forward
from .scenegen import SceneConfig, generate_scene, oracle_depth
from .view_transform import BevFeature, DepthBins, DepthDistribution, lift_splat, temporal_concat
from .voxelizer import (
    SEMANTIC_CLASSES,
    BinaryVoxelGrid,
    LabeledPointCloud,
    SemanticVoxelGrid,
    VoxelGridSpec,
    binary_occupancy,
    semantic_occupancy,
)

__version__ = "0.1.0"
