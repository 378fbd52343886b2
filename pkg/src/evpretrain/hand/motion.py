"""Keyframed motion scripts and random pose sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import HandOutOfFrame, RenderConfig, check_in_frame
from .skeleton import ANGLE_LIMITS, HandSkeleton

# hand centred in the default 64x64 view
DEFAULT_TRANSLATION = np.array([0.0, 90.0, 300.0])

# comfortable sub-range for random base poses (fraction of the full limits)
_BASE_RANGE = np.array([[-0.2, 0.2], [-0.1, 0.9], [0.0, 0.9], [0.0, 0.7]])


class MotionError(ValueError):
    pass


@dataclass
class MotionScript:
    """Skeleton keyframes interpolated linearly in parameter space.

    Every keyframe interval is split into ``micro_steps`` equal steps, so a
    script with K keyframes yields ``(K - 1) * micro_steps + 1`` skeletons.
    """

    keyframes: list
    micro_steps: int = 8

    def __post_init__(self):
        if len(self.keyframes) < 2:
            raise MotionError("a motion script needs at least two keyframes")
        if self.micro_steps < 1:
            raise MotionError("micro_steps must be >= 1")

    @property
    def n_frames(self) -> int:
        return (len(self.keyframes) - 1) * self.micro_steps + 1

    def at(self, s: float) -> HandSkeleton:
        """Skeleton at fractional micro-step index ``s`` in [0, n_frames - 1]."""
        s = float(np.clip(s, 0.0, self.n_frames - 1))
        k = min(int(s // self.micro_steps), len(self.keyframes) - 2)
        a = (s - k * self.micro_steps) / self.micro_steps
        v0 = self.keyframes[k].to_vector()
        v1 = self.keyframes[k + 1].to_vector()
        skel = HandSkeleton.from_vector((1.0 - a) * v0 + a * v1, bone_lengths=self.keyframes[k].bone_lengths)
        # interpolation can leave the limits only through rounding
        skel.angles = np.clip(skel.angles, skel.limits[..., 0], skel.limits[..., 1])
        return skel

    def frames(self, substeps: int = 1) -> list[HandSkeleton]:
        n = (self.n_frames - 1) * substeps + 1
        return [self.at(i / substeps) for i in range(n)]


def random_base_pose(rng: np.random.Generator) -> HandSkeleton:
    """Rest-ish pose from one curl value per finger: the three flexion joints
    of a finger move together (with a little jitter) and abduction is free."""
    curl = rng.uniform(0.0, 1.0, size=(5, 1))
    lo, hi = _BASE_RANGE[1:, 0], _BASE_RANGE[1:, 1]
    angles = np.empty((5, 4))
    angles[:, 0] = rng.uniform(_BASE_RANGE[0, 0], _BASE_RANGE[0, 1], size=5)
    angles[:, 1:] = np.clip(lo + curl * (hi - lo) + rng.uniform(-0.05, 0.05, size=(5, 3)), lo, hi)
    rotvec = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.3, 0.3)])
    translation = DEFAULT_TRANSLATION + rng.uniform([-6, -6, -10], [6, 6, 10])
    return HandSkeleton(angles=angles, rotvec=rotvec, translation=translation)


def perturb_pose(rng: np.random.Generator, skel: HandSkeleton, amplitude: float) -> HandSkeleton:
    """Random articulation of size ``amplitude`` (radians per angle) plus a
    proportionally smaller rigid motion."""
    angles = skel.angles + rng.uniform(-amplitude, amplitude, size=(5, 4))
    angles = np.clip(angles, ANGLE_LIMITS[..., 0], ANGLE_LIMITS[..., 1])
    rotvec = skel.rotvec + rng.uniform(-1, 1, size=3) * amplitude * np.array([0.1, 0.1, 0.2])
    translation = skel.translation + rng.uniform(-1, 1, size=3) * amplitude * np.array([8.0, 8.0, 10.0])
    return skel.with_(angles=angles, rotvec=rotvec, translation=translation)


def random_script(
    rng: np.random.Generator,
    n_keyframes: int = 2,
    micro_steps: int = 8,
    amplitude: float = 0.3,
    cfg: RenderConfig | None = None,
    max_tries: int = 100,
) -> MotionScript:
    """Sample a script whose every keyframe stays inside the frame margin.

    Linear interpolation between in-frame keyframes stays in frame only
    approximately, so all micro-steps are checked as well.
    """
    cfg = cfg or RenderConfig()
    for _ in range(max_tries):
        keys = [random_base_pose(rng)]
        for _ in range(n_keyframes - 1):
            keys.append(perturb_pose(rng, keys[-1], amplitude))
        script = MotionScript(keys, micro_steps)
        try:
            for skel in script.frames():
                check_in_frame(cfg, skel)
        except HandOutOfFrame:
            continue
        return script
    raise MotionError("could not sample an in-frame motion script")
