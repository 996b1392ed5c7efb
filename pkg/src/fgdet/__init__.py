"""Framework-free improved-YOLOv4 detection toolkit.

Feature maps are ``numpy`` arrays in H x W x C layout, convolution kernels are
K x K x Cin x Cout. Everything runs on the CPU at desk scale.
"""

from fgdet.activations import ActivationKind, activate, activate_grad
from fgdet.boxes import (
    BoundingBox,
    DecodeContext,
    ciou_grad,
    ciou_loss,
    confidence,
    decode_box,
    diou_grad,
    diou_loss,
    giou_grad,
    giou_loss,
    iou,
)
from fgdet.errors import FgdetError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ActivationKind",
    "BoundingBox",
    "DecodeContext",
    "FgdetError",
    "ShapeError",
    "activate",
    "activate_grad",
    "ciou_grad",
    "ciou_loss",
    "confidence",
    "decode_box",
    "diou_grad",
    "diou_loss",
    "giou_grad",
    "giou_loss",
    "iou",
]
