"""21-joint kinematic hand model.

Joint order: 0 wrist; then thumb (CMC, MCP, IP, tip), index, middle, ring and
pinky (MCP, PIP, DIP, tip), four joints per finger. The hand frame has x to the
right, y down the image (fingers point towards -y at rest) and z away from the
camera; the palm lies in z = 0 and flexion curls fingers towards the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

NUM_JOINTS = 21
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
ROOT = 0

# base joint (CMC for the thumb, MCP otherwise), in mm in the hand frame
BASE_POSITIONS = np.array([
    [-24.0, -22.0, 0.0],
    [-31.0, -86.0, 0.0],
    [-10.0, -92.0, 0.0],
    [11.0, -88.0, 0.0],
    [31.0, -78.0, 0.0],
])
REST_DIRECTIONS = np.array([
    [-0.75, -0.66, 0.0],
    [-0.16, -1.0, 0.0],
    [-0.03, -1.0, 0.0],
    [0.10, -1.0, 0.0],
    [0.24, -1.0, 0.0],
])
REST_DIRECTIONS /= np.linalg.norm(REST_DIRECTIONS, axis=1, keepdims=True)
BONE_LENGTHS = np.array([
    [36.0, 30.0, 26.0],
    [40.0, 24.0, 20.0],
    [44.0, 28.0, 22.0],
    [40.0, 26.0, 21.0],
    [32.0, 20.0, 18.0],
])
# rigid palm outline (convex, counter-clockwise in the image), hand frame mm
PALM_OUTLINE = np.array([
    [-20.0, 6.0, 0.0],
    [24.0, 6.0, 0.0],
    [36.0, -70.0, 0.0],
    [32.0, -80.0, 0.0],
    [-10.0, -94.0, 0.0],
    [-33.0, -86.0, 0.0],
    [-28.0, -24.0, 0.0],
])

# per finger: abduction, base flexion, middle flexion, tip flexion (radians)
ANGLE_LIMITS = np.array([
    [[-0.35, 0.35], [-0.30, 1.75], [0.0, 1.90], [0.0, 1.40]],
] * 5)

PALM_NORMAL = np.array([0.0, 0.0, 1.0])


class SkeletonError(ValueError):
    pass


def finger_joints(f: int) -> list[int]:
    return [1 + 4 * f + k for k in range(4)]


BONES: list[tuple[int, int, int]] = []  # (finger, parent joint, child joint)
for _f in range(5):
    _j = finger_joints(_f)
    BONES += [(_f, _j[0], _j[1]), (_f, _j[1], _j[2]), (_f, _j[2], _j[3])]


def axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(axis, dtype=np.float64) * angle).as_matrix()


@dataclass
class HandSkeleton:
    """Articulation angles (5 x 4) plus a global rigid pose."""

    angles: np.ndarray = field(default_factory=lambda: np.zeros((5, 4)))
    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bone_lengths: np.ndarray = field(default_factory=lambda: BONE_LENGTHS.copy())
    limits: np.ndarray = field(default_factory=lambda: ANGLE_LIMITS.copy())

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(5, 4)
        self.rotvec = np.asarray(self.rotvec, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64).reshape(5, 3)

    def validate(self) -> None:
        if (self.bone_lengths <= 0).any():
            raise SkeletonError("bone lengths must be positive")
        lo, hi = self.limits[..., 0], self.limits[..., 1]
        bad = (self.angles < lo - 1e-12) | (self.angles > hi + 1e-12)
        if bad.any():
            f, k = np.argwhere(bad)[0]
            raise SkeletonError(f"angle {self.angles[f, k]:.4f} of {FINGERS[f]} joint {k} outside {self.limits[f, k].tolist()}")

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rotvec).as_matrix()

    def with_(self, **kw) -> "HandSkeleton":
        return replace(self, **kw)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.angles.ravel(), self.rotvec, self.translation])

    @classmethod
    def from_vector(cls, v: np.ndarray, **kw) -> "HandSkeleton":
        v = np.asarray(v, dtype=np.float64)
        return cls(angles=v[:20].reshape(5, 4), rotvec=v[20:23], translation=v[23:26], **kw)


def _finger_chain(base, direction, lengths, angles):
    """Local (hand-frame) joint positions of one finger, base first."""
    flex_axis = np.cross(PALM_NORMAL, direction)
    flex_axis /= np.linalg.norm(flex_axis)
    abd, f1, f2, f3 = angles
    r = axis_angle(PALM_NORMAL, abd) @ axis_angle(flex_axis, f1)
    pts = [base]
    r_cur = r
    for k, length in enumerate(lengths):
        if k == 1:
            r_cur = r_cur @ axis_angle(flex_axis, f2)
        elif k == 2:
            r_cur = r_cur @ axis_angle(flex_axis, f3)
        pts.append(pts[-1] + r_cur @ (length * direction))
    return np.array(pts)


def hand_frame_joints(skel: HandSkeleton) -> np.ndarray:
    joints = np.zeros((NUM_JOINTS, 3))
    for f in range(5):
        joints[finger_joints(f)] = _finger_chain(BASE_POSITIONS[f], REST_DIRECTIONS[f], skel.bone_lengths[f], skel.angles[f])
    return joints


def forward_kinematics(skel: HandSkeleton) -> np.ndarray:
    """Camera-frame joint positions (21 x 3, mm)."""
    skel.validate()
    return hand_frame_joints(skel) @ skel.rotation.T + skel.translation


def rest_pose() -> np.ndarray:
    """Hand-frame joints with every angle zero; also the FK output of
    ``HandSkeleton()``."""
    joints = np.zeros((NUM_JOINTS, 3))
    for f in range(5):
        idx = finger_joints(f)
        joints[idx[0]] = BASE_POSITIONS[f]
        for k in range(3):
            joints[idx[k + 1]] = joints[idx[k]] + BONE_LENGTHS[f, k] * REST_DIRECTIONS[f]
    return joints


def palm_outline(skel: HandSkeleton) -> np.ndarray:
    return PALM_OUTLINE @ skel.rotation.T + skel.translation
