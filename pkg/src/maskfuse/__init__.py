"""Mask-level fusion toolkit: Matrix NMS, TTA/ensemble merging, balanced copy-paste, mask mAP."""
from ._backend import BACKEND
from .errors import ContractViolation, MalformedRLE, SchemaError
from .masks import (
    BinaryMask,
    InstancePrediction,
    PredictionSet,
    RleMask,
    cross_iou,
    iou_matrix,
    mask_area,
    mask_iou,
    rle_decode,
    rle_encode,
)

__version__ = "0.1.0"
