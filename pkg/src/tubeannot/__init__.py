"""Weakly supervised spatio-temporal action annotation from proposal tubes."""

from tubeannot.core import (
    ActionProposal,
    BoundingBox,
    FeatureHistogram,
    GroundTruthTube,
    VideoMeta,
    frame_iou,
    tube_iou,
)

__version__ = "0.1.0"

__all__ = [
    "ActionProposal",
    "BoundingBox",
    "FeatureHistogram",
    "GroundTruthTube",
    "VideoMeta",
    "frame_iou",
    "tube_iou",
]
