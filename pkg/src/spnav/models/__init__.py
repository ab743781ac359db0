from .losses import (
    PoseBatchLoss,
    bce_loss,
    classification_loss,
    consistency_loss,
    dice_loss,
    pose_loss,
    rot6d_to_matrix_t,
    seg_labeled_loss,
    total_seg_loss,
)
from .posenet import PoseNet
from .segnet import SegNet, SmallEncoder

__all__ = [
    "PoseBatchLoss",
    "bce_loss",
    "classification_loss",
    "consistency_loss",
    "dice_loss",
    "pose_loss",
    "rot6d_to_matrix_t",
    "seg_labeled_loss",
    "total_seg_loss",
    "PoseNet",
    "SegNet",
    "SmallEncoder",
]
