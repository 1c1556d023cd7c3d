"""Siamese single/multi object tracking and video object segmentation.

A compact, CPU-friendly implementation of a multi-task fully-convolutional
Siamese tracker that produces per-frame binary masks and boxes, plus the
geometry (rotated-box fitting, IoU), assignment, synthetic-data, and
evaluation machinery needed to train and measure it end to end.
"""

from .geom import (
    Assignment,
    AxisBox,
    EmptyMaskError,
    RotatedBox,
    hungarian,
    iou_axis,
    iou_mask,
    iou_rotated,
    mbr,
    min_max_box,
    opt_box,
)
from .model import ModelConfig, SiameseTracker, build_model, load_checkpoint, save_checkpoint
from .track import FrameResult, TrackOptions, Tracker
from .train import TrainConfig, train

__all__ = [
    "Assignment",
    "AxisBox",
    "EmptyMaskError",
    "FrameResult",
    "ModelConfig",
    "RotatedBox",
    "SiameseTracker",
    "TrackOptions",
    "Tracker",
    "TrainConfig",
    "build_model",
    "hungarian",
    "iou_axis",
    "iou_mask",
    "iou_rotated",
    "load_checkpoint",
    "mbr",
    "min_max_box",
    "opt_box",
    "save_checkpoint",
    "train",
]
