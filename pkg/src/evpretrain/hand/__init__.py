"""Synthetic articulated-hand benchmark."""

from .dataset import Dataset, DatasetConfig, DatasetError, generate_dataset
from .motion import MotionError, MotionScript, random_script
from .render import HandOutOfFrame, RenderConfig, gt_flow, rasterize, render_hand
from .skeleton import NUM_JOINTS, HandSkeleton, SkeletonError, forward_kinematics, rest_pose

__all__ = [
    "Dataset", "DatasetConfig", "DatasetError", "generate_dataset",
    "MotionError", "MotionScript", "random_script",
    "HandOutOfFrame", "RenderConfig", "gt_flow", "rasterize", "render_hand",
    "NUM_JOINTS", "HandSkeleton", "SkeletonError", "forward_kinematics", "rest_pose",
]
