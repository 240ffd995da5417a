"""Ultrametric graph segmentation toolkit.

Exact minimax-path (ultrametric) distances over weighted graphs built from
feature maps and point clouds, hierarchical segmentation by threshold
cuts, mask-tree contrastive pair sampling with reference loss gradients,
and multi-view consistency metrics.
"""

from .graphs import (
    FeatureMap,
    Metric,
    PointCloud,
    WeightedGraph,
    components_under_threshold,
    feature_distance,
    grid_graph,
    knn_graph,
    radius_outlier_filter,
    sample_pixel_ids,
    sampled_pixel_graph,
    voxel_downsample,
)
from .hierarchy import (
    UNREACHABLE,
    BinaryPartitionTree,
    active_edge,
    brute_force_ultrametric,
    build_bpt,
    threshold_cut,
    ultrametric_distance,
)
from .losses import (
    ContrastiveConfig,
    DepthPatchBatch,
    LossResult,
    depth_continuity_loss,
    euclid_pair_distance,
    feature_loss,
    pair_contrastive_loss,
    reweight_graph,
    ultra_pair_distance,
)
from .mask_forest import (
    MaskSet,
    MaskTree,
    PairBatch,
    build_mask_tree,
    inclusion_stats,
    sample_pairs,
)
from .metrics import (
    CameraModel,
    MetricReport,
    TrialConfig,
    ViewData,
    best_threshold,
    default_sweep,
    depth_error,
    mask_iou,
    nc_score,
    si_score,
    vc_score,
    visibility_mask,
    warp_pixel,
    warp_pixels,
)
from .segmentation import (
    CloudViewSegmenter,
    LabelMap,
    Segmenter,
    query_mask,
    segment_2d,
    segment_3d,
    transfer_labels,
)

__version__ = "0.1.0"
