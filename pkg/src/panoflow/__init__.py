"""Panoptic segmentation toolkit: four-subnet forward pass, fusion, PQ metric."""

from .checkpoint import Checkpoint, seeded_checkpoint, splitmix64, uniform_stream
from .config import RunConfig, apply_overrides, load_config
from .detection import (
    Detection,
    box_iou,
    decode_boxes,
    generate_anchors,
    load_detections,
    nms_per_class,
    save_detections,
    select_detections,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    PanoflowError,
    SchemaError,
    ShapeError,
)
from .ftns import read_tensor, write_tensor
from .fusion import FusionConfig, InstanceMask, colorize, fuse, paste_mask
from .heads import (
    RoiMask,
    assign_level,
    head_entries,
    run_cls_reg_heads,
    run_stuff_head,
    run_thing_head,
)
from .kernels import (
    ConvParams,
    activate,
    add,
    bilinear_resize,
    conv2d,
    deconv2x,
    group_norm,
    nearest_upsample2x,
    relu,
    roi_align,
    sigmoid,
    softmax_channel,
)
from .panoptic import PanopticMap, SegmentInfo
from .panoptic_io import (
    PanopticArchive,
    decode_png,
    encode_png,
    id_to_rgb,
    load_archive,
    rgb_to_id,
    save_archive,
)
from .pipeline import (
    ForwardResult,
    model_entries,
    run_evaluate,
    run_forward,
    run_fuse,
    seeded_image,
    write_dumps,
)
from .pq import (
    ClassStats,
    PQReport,
    PQStats,
    compute_pq,
    evaluate_pairs,
    match_segments,
    reduce_stats,
)
from .pyramid import FeaturePyramid, build_pyramid, pyramid_entries, select_levels
from .subnets import (
    SubnetConfig,
    SubnetFeatures,
    loss_compose,
    run_subnets,
    subnet_entries,
)

__version__ = "0.1.0"
