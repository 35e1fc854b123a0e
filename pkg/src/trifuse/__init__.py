"""Desk-scale kernels for tri-modal detection pipelines.

Every numerical building block of an RGB + surface-normal + event-camera
detection stack as an independently testable unit: depth-to-normal geometry,
event rasterization, the two attention fusion blocks with tape-checked
gradients, and COCO-style mAP evaluation.
"""

from trifuse.container import ContainerError, load_tensor, save_tensor
from trifuse.events import (
    Event,
    EventBoundsError,
    EventFrame,
    EventOrderError,
    EventParseError,
    EventStream,
    Window,
    parse_events,
    rasterize,
    split_windows,
)
from trifuse.fusion import (
    ADFMParams,
    EAFMBranchParams,
    EAFMParams,
    adfm_forward,
    adfm_init,
    eafm_forward,
    eafm_init,
    fusion_gradients,
    load_fusion_params,
    save_fusion_params,
)
from trifuse.geometry import (
    AngularLossResult,
    DepthMap,
    EmptyOverlapError,
    NormalMap,
    angular_loss,
    decode_normal_png,
    depth_to_normals,
    encode_normal_png,
    load_normal_png,
    save_normal_png,
)
from trifuse.gradcheck import GradReport, finite_diff_check
from trifuse.metrics import (
    Box,
    Detection,
    GroundTruth,
    MetricsReport,
    average_precision,
    iou,
    load_annotations,
    map_suite,
    match_detections,
)
from trifuse.tensor import Gradients, ShapeMismatchError, Tape, Tensor, backward

__version__ = "0.1.0"
