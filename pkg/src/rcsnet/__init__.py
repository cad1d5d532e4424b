"""CPU inference and analysis toolkit for RCS-YOLO style detectors.

Building blocks: a float32 NCHW tensor kernel library with numba/numpy
backends, structural reparameterization of three-branch blocks into single
3x3 convolutions, channel-shuffle units with one-shot aggregation, a
two-head anchor detector graph, the detection pipeline (letterbox, decode,
NMS), complexity analysis and COCO-style evaluation metrics.

Environment: RCSNET_BACKEND selects the kernel backend (numba/numpy),
RCSNET_THREADS caps library parallelism.
"""

import os as _os

# Cap BLAS pools before numpy loads; numba threads are capped in .kernels.
_threads = _os.environ.get("RCSNET_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .analysis import (
    AnchorSet,
    ComplexityReport,
    LabelBox,
    LayerSpec,
    compare_osa_elan,
    flops,
    kmeans_anchors,
    mac,
    model_complexity,
)
from .blocks import OSAModule, RCSUnit, convert_to_deployed, downsample_forward, rcs_forward, rcs_osa_forward
from .errors import (
    ConfigError,
    ImageFormatError,
    ManifestMismatchError,
    ShapeError,
    StateError,
    TruncatedWeightsError,
    WeightFileError,
    WeightMagicError,
    WeightVersionError,
)
from .imageio import Image, read_image, write_ppm
from .kernels import backend_name
from .metrics import (
    ConfusionCounts,
    EvalConfig,
    ap50_95,
    average_precision,
    evaluate,
    fps_benchmark,
    iou,
    match_detections,
    precision,
    recall,
)
from .model import (
    Model,
    ModelConfig,
    PAPER_ANCHORS,
    build_model,
    forward,
    forward_all,
    load_config,
    load_weights,
    nano_config,
    parse_config,
    reparameterize_model,
    save_config,
    save_weights,
)
from .pipeline import (
    Detection,
    PhaseTimes,
    TransformMeta,
    decode_head,
    detect,
    format_detection,
    letterbox,
    nms,
    unletterbox,
)
from .reparam import (
    RepVGGBlock,
    block_forward,
    deploy_block,
    fuse_block,
    fuse_conv_bn,
    identity_to_3x3,
    pad_1x1_to_3x3,
)
from .tensor_ops import (
    BNParams,
    ConvParams,
    activation,
    batchnorm_infer,
    channel_shuffle,
    channel_split,
    concat_channels,
    conv2d,
    maxpool2d,
    sigmoid,
    upsample_nearest,
)

__version__ = "0.1.0"
