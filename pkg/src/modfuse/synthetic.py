"""Synthetic upper-body gesture streams with frame-accurate ground truth.

A stream alternates rest segments (standing pose plus sensor jitter) with
gesture segments drawn from five templates: raise, wave, and circle are
one-handed (the performing hand is drawn at random, so handedness
normalization downstream actually matters), push and spread use both arms.
Every template is a smooth trajectory u in [0, 1] -> joint offsets from
the rest pose, shaped by a sin^2 envelope so gestures start and end at
rest. Class ids are 1..5; 0 is the rest class. The planted intervals are
returned as the ground-truth labeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng
from .skeleton import N_JOINTS, joint_index
from .temporal import SegmentLabeling

__all__ = [
    "SyntheticConfig",
    "GESTURE_CLASSES",
    "rest_pose",
    "gesture_frame",
    "generate_synthetic_sequence",
]

GESTURE_CLASSES = ("raise", "wave", "circle", "push", "spread")

_ONE_HANDED = {"raise", "wave", "circle"}


def rest_pose() -> np.ndarray:
    """Standing pose, meters; z is up, x is the subject's left."""
    pose = np.zeros((N_JOINTS, 3))

    def put(name, x, y, z):
        pose[joint_index(name)] = (x, y, z)

    put("hip_center", 0.0, 0.0, 1.00)
    put("shoulder_center", 0.0, 0.0, 1.45)
    put("head", 0.0, 0.0, 1.63)
    put("shoulder_left", 0.18, 0.0, 1.45)
    put("elbow_left", 0.22, 0.0, 1.18)
    put("hand_left", 0.24, 0.0, 0.94)
    put("shoulder_right", -0.18, 0.0, 1.45)
    put("elbow_right", -0.22, 0.0, 1.18)
    put("hand_right", -0.24, 0.0, 0.94)
    put("hip_left", 0.10, 0.0, 1.00)
    put("hip_right", -0.10, 0.0, 1.00)
    return pose


def _arm(side: str):
    return joint_index(f"elbow_{side}"), joint_index(f"hand_{side}")


def gesture_frame(name: str, u: float, hand: str = "right",
                  amplitude: float = 1.0) -> np.ndarray:
    """Pose at phase u of a gesture; u runs 0 -> 1 over the segment."""
    if name not in GESTURE_CLASSES:
        raise ValueError(f"unknown gesture {name!r}")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"phase must be in [0, 1], got {u}")
    pose = rest_pose()
    env = amplitude * np.sin(np.pi * u) ** 2
    if name in _ONE_HANDED:
        elbow, hand_j = _arm(hand)
        if name == "raise":
            pose[hand_j] += env * np.array([0.0, 0.25, 0.75])
            pose[elbow] += env * np.array([0.0, 0.15, 0.35])
        elif name == "wave":
            sway = np.sin(4.0 * np.pi * u)
            pose[hand_j] += env * np.array([0.12 * sway, 0.15, 0.72])
            pose[elbow] += env * np.array([0.05 * sway, 0.10, 0.35])
        else:   # circle
            pose[hand_j] += env * np.array([
                0.18 * np.sin(4.0 * np.pi * u),
                0.22,
                0.50 + 0.18 * np.cos(4.0 * np.pi * u),
            ])
            pose[elbow] += env * np.array([0.0, 0.14, 0.25])
    elif name == "push":
        for side in ("left", "right"):
            elbow, hand_j = _arm(side)
            pose[hand_j] += env * np.array([0.0, 0.45, 0.35])
            pose[elbow] += env * np.array([0.0, 0.25, 0.18])
    else:   # spread
        for sign, side in ((1.0, "left"), (-1.0, "right")):
            elbow, hand_j = _arm(side)
            pose[hand_j] += env * np.array([sign * 0.30, 0.0, 0.45])
            pose[elbow] += env * np.array([sign * 0.16, 0.0, 0.22])
    return pose


@dataclass(frozen=True)
class SyntheticConfig:
    n_events: int = 6
    gesture_frames: tuple = (20, 30)     # inclusive draw range
    rest_frames: tuple = (45, 70)        # long enough to separate gestures
    noise_std: float = 0.004             # per-coordinate jitter, meters
    amplitude_jitter: float = 0.1        # per-event scale draw, +/- range

    def __post_init__(self):
        if self.n_events < 1:
            raise ValueError("need at least one gesture event")
        for name in ("gesture_frames", "rest_frames"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"bad {name} range ({lo}, {hi})")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def generate_synthetic_sequence(seed: int, config: SyntheticConfig):
    """Build one stream; returns (positions (T, 11, 3), SegmentLabeling)."""
    rng = SeededRng(seed)
    draw = rng.split(0)
    rest = rest_pose()
    frames = []
    intervals = []

    def rest_block(i):
        lo, hi = config.rest_frames
        n = int(draw.split(2 * i).integers(lo, hi + 1))
        frames.extend([rest.copy() for _ in range(n)])

    for i in range(config.n_events):
        rest_block(i)
        ev = draw.split(2 * i + 1)
        cls = int(ev.integers(0, len(GESTURE_CLASSES)))
        name = GESTURE_CLASSES[cls]
        hand = "left" if ev.uniform() < 0.5 else "right"
        lo, hi = config.gesture_frames
        n = int(ev.integers(lo, hi + 1))
        amp = 1.0 + config.amplitude_jitter * (2.0 * ev.uniform() - 1.0)
        start = len(frames)
        for j in range(n):
            u = j / (n - 1) if n > 1 else 0.0
            frames.append(gesture_frame(name, u, hand, amp))
        intervals.append((cls + 1, start, len(frames) - 1))
    rest_block(config.n_events)

    positions = np.stack(frames)
    if config.noise_std > 0:
        positions = positions + rng.split(1).normal(
            size=positions.shape) * config.noise_std
    return positions, SegmentLabeling(tuple(intervals), positions.shape[0])
