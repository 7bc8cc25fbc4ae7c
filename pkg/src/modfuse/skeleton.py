"""Upper-body pose descriptors from 3D joint positions.

Input is a capture of 11 upper-body joints (see JOINTS for the canonical
order). Each frame is made body-centric in three steps: root-center on the
hip center, rescale every bone to a target length (removing subject size),
and rotate into a torso-attached basis found by PCA over six stable torso
points with signs fixed against anatomical references (up = hips to
shoulders, left = right-to-left shoulder). All later quantities live in
this frame, so descriptors do not depend on where the subject stands or
how they face the sensor.

The per-frame descriptor has 183 entries, in order: 33 positions,
33 velocities and 33 accelerations (central differences of the smoothed,
normalized positions), 9 inclination angles at bone junctions, 9 azimuth
angles of the same junctions around their parent bone, 11 bending angles
between the torso normal and each joint's position, and all 55 pairwise
joint distances. A dynamic pose concatenates the descriptors of 5 frames
sampled at a stride, earliest first: 915 entries, covering {t-4s .. t}.
The more active hand (larger x/y travel over the window; ties go right)
can be mirrored to the right side so handedness does not split classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import gaussian_smooth_temporal

__all__ = [
    "JOINTS",
    "N_JOINTS",
    "SkeletonTree",
    "ANGLE_TRIPLES",
    "STATIC_DIM",
    "DYNAMIC_FRAMES",
    "DYNAMIC_DIM",
    "joint_index",
    "check_skeleton",
    "normalize_skeleton",
    "torso_basis",
    "to_torso_frame",
    "joint_dynamics",
    "inclination_angles",
    "azimuth_angles",
    "bending_angles",
    "pairwise_distances",
    "assemble_descriptor",
    "prepare_frames",
    "descriptor_sequence",
    "make_dynamic_pose",
    "active_hand_delta",
    "active_hand",
    "mirror_left_right",
    "dynamic_pose_sequence",
    "FeatureStandardizer",
    "fit_standardizer",
    "apply_standardizer",
    "write_capture",
    "read_capture",
]

JOINTS = (
    "hip_center",
    "shoulder_center",
    "head",
    "shoulder_left",
    "elbow_left",
    "hand_left",
    "shoulder_right",
    "elbow_right",
    "hand_right",
    "hip_left",
    "hip_right",
)
N_JOINTS = len(JOINTS)

_IDX = {name: i for i, name in enumerate(JOINTS)}


def joint_index(name: str) -> int:
    if name not in _IDX:
        raise KeyError(f"unknown joint {name!r}")
    return _IDX[name]


_DEFAULT_BONES = (
    ("hip_center", "shoulder_center"),
    ("shoulder_center", "head"),
    ("shoulder_center", "shoulder_left"),
    ("shoulder_center", "shoulder_right"),
    ("shoulder_left", "elbow_left"),
    ("elbow_left", "hand_left"),
    ("shoulder_right", "elbow_right"),
    ("elbow_right", "hand_right"),
    ("hip_center", "hip_left"),
    ("hip_center", "hip_right"),
)

_DEFAULT_LENGTHS = {
    ("hip_center", "shoulder_center"): 0.45,
    ("shoulder_center", "head"): 0.18,
    ("shoulder_center", "shoulder_left"): 0.18,
    ("shoulder_center", "shoulder_right"): 0.18,
    ("shoulder_left", "elbow_left"): 0.28,
    ("elbow_left", "hand_left"): 0.25,
    ("shoulder_right", "elbow_right"): 0.28,
    ("elbow_right", "hand_right"): 0.25,
    ("hip_center", "hip_left"): 0.10,
    ("hip_center", "hip_right"): 0.10,
}


@dataclass(frozen=True)
class SkeletonTree:
    """Bone tree rooted at the hip center with target segment lengths.

    bones are (parent, child) name pairs listed parent-before-child, so a
    single walk down the list can rescale the whole skeleton. Lengths are
    meters; the defaults are average adult proportions, but a tree fitted
    from training data can be passed anywhere a tree is accepted.
    """

    bones: tuple = _DEFAULT_BONES
    lengths: dict = field(default_factory=lambda: dict(_DEFAULT_LENGTHS))

    def __post_init__(self):
        seen = {"hip_center"}
        for a, b in self.bones:
            if a not in _IDX or b not in _IDX:
                raise ValueError(f"unknown joint in bone ({a}, {b})")
            if a not in seen:
                raise ValueError(
                    f"bone ({a}, {b}) listed before its parent chain"
                )
            if b in seen:
                raise ValueError(f"joint {b} appears as child twice")
            seen.add(b)
        if seen != set(JOINTS):
            raise ValueError("bone tree must reach every joint")
        missing = [bone for bone in self.bones if bone not in self.lengths]
        if missing:
            raise ValueError(f"missing target lengths for {missing}")

    @property
    def parents(self) -> dict:
        return {b: a for a, b in self.bones}


ANGLE_TRIPLES = (
    # (outer, vertex, outer): 7 anatomical junctions plus 2 virtual ones
    # that tie each hand back to the shoulder center across the elbow
    ("hip_center", "shoulder_center", "head"),
    ("hip_center", "shoulder_center", "shoulder_left"),
    ("hip_center", "shoulder_center", "shoulder_right"),
    ("shoulder_center", "shoulder_left", "elbow_left"),
    ("shoulder_center", "shoulder_right", "elbow_right"),
    ("shoulder_left", "elbow_left", "hand_left"),
    ("shoulder_right", "elbow_right", "hand_right"),
    ("hand_left", "elbow_left", "shoulder_center"),
    ("hand_right", "elbow_right", "shoulder_center"),
)

STATIC_DIM = 183
DYNAMIC_FRAMES = 5
DYNAMIC_DIM = STATIC_DIM * DYNAMIC_FRAMES

_LEFT = tuple(_IDX[n] for n in
              ("shoulder_left", "elbow_left", "hand_left", "hip_left"))
_RIGHT = tuple(_IDX[n] for n in
               ("shoulder_right", "elbow_right", "hand_right", "hip_right"))
_TORSO_POINTS = tuple(_IDX[n] for n in
                      ("head", "shoulder_center", "shoulder_left",
                       "shoulder_right", "hip_center"))


def check_skeleton(positions) -> np.ndarray:
    """Coerce to float64 (..., 11, 3) and require finite values."""
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim not in (2, 3) or p.shape[-2:] != (N_JOINTS, 3):
        raise ValueError(
            f"expected shape (..., {N_JOINTS}, 3), got {p.shape}"
        )
    if not np.isfinite(p).all():
        raise ValueError("joint positions must be finite")
    return p


# --------------------------------------------------------------------------
# normalization


def normalize_skeleton(positions, tree: Optional[SkeletonTree] = None
                       ) -> np.ndarray:
    """Root-center on the hip center and rescale bones to target lengths.

    Bone directions are kept, lengths replaced, walking parent to child;
    the subtree below a bone translates rigidly with it. A zero-length
    input bone has no direction and is rejected.
    """
    p = check_skeleton(positions)
    if p.ndim == 3:
        return np.stack([normalize_skeleton(f, tree) for f in p])
    tree = tree if tree is not None else SkeletonTree()
    out = np.zeros_like(p)
    for a_name, b_name in tree.bones:
        a, b = _IDX[a_name], _IDX[b_name]
        d = p[b] - p[a]
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            raise ValueError(
                f"zero-length bone ({a_name}, {b_name}): direction undefined"
            )
        out[b] = out[a] + tree.lengths[(a_name, b_name)] * (d / norm)
    return out


def torso_basis(positions) -> np.ndarray:
    """Rows (up, left, front): PCA axes of six torso points, signs fixed.

    Up is oriented along hips-to-shoulders, left along the right-to-left
    shoulder direction, front completes the right-handed set. Raises if
    the torso points are rank-deficient (collinear).
    """
    p = check_skeleton(positions)
    if p.ndim != 2:
        raise ValueError("torso_basis expects a single frame")
    hip_mid = 0.5 * (p[_IDX["hip_left"]] + p[_IDX["hip_right"]])
    pts = np.vstack([p[list(_TORSO_POINTS)], hip_mid])
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-9:
        raise ValueError("torso points are collinear, no stable basis")
    up, left = vt[0], vt[1]
    up_ref = p[_IDX["shoulder_center"]] - p[_IDX["hip_center"]]
    left_ref = p[_IDX["shoulder_left"]] - p[_IDX["shoulder_right"]]
    if up @ up_ref < 0:
        up = -up
    if left @ left_ref < 0:
        left = -left
    front = np.cross(up, left)
    return np.vstack([up, left, front])


def to_torso_frame(positions) -> np.ndarray:
    """Express joints in the frame returned by torso_basis."""
    p = check_skeleton(positions)
    if p.ndim == 3:
        return np.stack([to_torso_frame(f) for f in p])
    return p @ torso_basis(p).T


# --------------------------------------------------------------------------
# per-frame descriptor pieces


def joint_dynamics(frames):
    """Central-difference velocities and accelerations of a frame sequence.

    v(t) = (x(t+1) - x(t-1)) / 2 and a(t) = x(t+1) - 2 x(t) + x(t-1) in
    the interior; endpoints fall back to one-sided differences.
    """
    q = check_skeleton(frames)
    if q.ndim != 3 or q.shape[0] < 3:
        raise ValueError("need at least 3 frames for derivatives")
    vel = np.empty_like(q)
    acc = np.empty_like(q)
    vel[1:-1] = 0.5 * (q[2:] - q[:-2])
    vel[0] = q[1] - q[0]
    vel[-1] = q[-1] - q[-2]
    acc[1:-1] = q[2:] - 2.0 * q[1:-1] + q[:-2]
    acc[0] = q[2] - 2.0 * q[1] + q[0]
    acc[-1] = q[-1] - 2.0 * q[-2] + q[-3]
    return vel, acc


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros_like(v)


def inclination_angles(pos) -> np.ndarray:
    """Angle at the vertex of each of the 9 triples, in [0, pi].

    A junction with a degenerate (zero-length) segment has no defined
    angle and contributes 0.
    """
    p = check_skeleton(pos)
    out = np.empty(len(ANGLE_TRIPLES))
    for i, (a, b, c) in enumerate(ANGLE_TRIPLES):
        u = p[_IDX[a]] - p[_IDX[b]]
        v = p[_IDX[c]] - p[_IDX[b]]
        if np.linalg.norm(u) < 1e-12 or np.linalg.norm(v) < 1e-12:
            out[i] = 0.0
            continue
        out[i] = np.arccos(np.clip(_unit(u) @ _unit(v), -1.0, 1.0))
    return out


def azimuth_angles(pos) -> np.ndarray:
    """Rotation of each child bone about its parent bone, in (-pi, pi].

    Works on torso-frame coordinates: the reference direction is the up
    axis projected onto the plane perpendicular to the parent bone (the
    left axis when the bone is near vertical). A child bone parallel to
    the parent has no azimuth and contributes 0.
    """
    p = check_skeleton(pos)
    out = np.empty(len(ANGLE_TRIPLES))
    for i, (a, b, c) in enumerate(ANGLE_TRIPLES):
        axis = _unit(p[_IDX[b]] - p[_IDX[a]])
        ref = np.array([1.0, 0.0, 0.0]) - axis[0] * axis
        if np.linalg.norm(ref) < 1e-6:
            ref = np.array([0.0, 1.0, 0.0]) - axis[1] * axis
        ref = _unit(ref)
        q = p[_IDX[c]] - p[_IDX[b]]
        q = _unit(q - (q @ axis) * axis)
        if not q.any():
            out[i] = 0.0
            continue
        ang = float(np.arctan2(np.cross(ref, q) @ axis, ref @ q))
        out[i] = np.pi if ang == -np.pi else ang
    return out


def bending_angles(pos) -> np.ndarray:
    """Angle between the torso normal and each joint's position, [0, pi].

    Torso-frame coordinates put the normal on the third axis. The root
    joint sits at the origin and gets 0 by convention.
    """
    p = check_skeleton(pos)
    out = np.empty(N_JOINTS)
    for j in range(N_JOINTS):
        if np.linalg.norm(p[j]) < 1e-12:
            out[j] = 0.0
        else:
            out[j] = np.arccos(np.clip(_unit(p[j])[2], -1.0, 1.0))
    return out


def pairwise_distances(pos) -> np.ndarray:
    """All C(11,2) = 55 joint distances, upper-triangle order."""
    p = check_skeleton(pos)
    iu, ju = np.triu_indices(N_JOINTS, k=1)
    return np.linalg.norm(p[iu] - p[ju], axis=1)


def assemble_descriptor(pos, vel, acc) -> np.ndarray:
    """Concatenate the seven descriptor blocks for one frame: 183 entries."""
    p = check_skeleton(pos)
    out = np.concatenate([
        p.ravel(),
        check_skeleton(vel).ravel(),
        check_skeleton(acc).ravel(),
        inclination_angles(p),
        azimuth_angles(p),
        bending_angles(p),
        pairwise_distances(p),
    ])
    assert out.shape == (STATIC_DIM,)
    return out


# --------------------------------------------------------------------------
# sequence-level assembly


def prepare_frames(positions, tree: Optional[SkeletonTree] = None,
                   sigma: float = 1.0, window: int = 5) -> np.ndarray:
    """Smooth, normalize, and rotate a capture into torso-frame positions.

    Smoothing runs over time on the raw coordinates (disabled when sigma
    is 0); normalization and the torso rotation are per-frame.
    """
    p = check_skeleton(positions)
    if p.ndim != 3:
        raise ValueError("prepare_frames expects a (T, joints, 3) capture")
    t_len = p.shape[0]
    if sigma > 0 and t_len > 1:
        flat = gaussian_smooth_temporal(p.reshape(t_len, -1), sigma, window)
        p = flat.reshape(t_len, N_JOINTS, 3)
    return to_torso_frame(normalize_skeleton(p, tree))


def descriptor_sequence(positions, tree: Optional[SkeletonTree] = None,
                        sigma: float = 1.0, window: int = 5) -> np.ndarray:
    """Per-frame descriptors for a whole capture: (T, 183)."""
    frames = prepare_frames(positions, tree, sigma, window)
    vel, acc = joint_dynamics(frames)
    return np.stack([assemble_descriptor(frames[t], vel[t], acc[t])
                     for t in range(frames.shape[0])])


def make_dynamic_pose(descriptors, t: int, stride: int) -> np.ndarray:
    """Concatenate descriptors at {t-4s, ..., t}, earliest first: 915.

    The window is past-anchored; frames before the capture start are not
    invented, so t must leave 4*stride frames of history.
    """
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != STATIC_DIM:
        raise ValueError(f"expected (T, {STATIC_DIM}) descriptors")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    first = t - (DYNAMIC_FRAMES - 1) * stride
    if first < 0 or t >= d.shape[0]:
        raise ValueError(
            f"frame {t} lacks history at stride {stride} "
            f"(needs frames {first}..{t} of {d.shape[0]})"
        )
    return d[first:t + 1:stride].ravel()


def active_hand_delta(track) -> float:
    """L1 path length over x and y of one hand across sampled frames:
    sum of |dx| + |dy| between consecutive positions."""
    q = np.asarray(track, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 2 or q.shape[1] < 2:
        raise ValueError("expected a (frames, >=2) hand track")
    return float(np.abs(np.diff(q[:, :2], axis=0)).sum())


def active_hand(frames) -> str:
    """Which hand moves more over the window; ties go to the right."""
    q = check_skeleton(frames)
    if q.ndim != 3:
        raise ValueError("active_hand expects a frame window")
    d_left = active_hand_delta(q[:, _IDX["hand_left"]])
    d_right = active_hand_delta(q[:, _IDX["hand_right"]])
    return "left" if d_left > d_right else "right"


def mirror_left_right(positions) -> np.ndarray:
    """Swap left/right joints and negate the left axis (torso frame)."""
    p = check_skeleton(positions).copy()
    idx = np.arange(N_JOINTS)
    idx[list(_LEFT)] = _RIGHT
    idx[list(_RIGHT)] = _LEFT
    p = p[..., idx, :]
    p[..., 1] *= -1.0
    return p


def dynamic_pose_sequence(positions, stride: int,
                          tree: Optional[SkeletonTree] = None,
                          sigma: float = 1.0, window: int = 5,
                          mirror: bool = True):
    """Dynamic poses for every frame with full history.

    Returns (poses, first_frame): poses[i] is the 915-entry dynamic pose
    for frame first_frame + i, with first_frame = 4*stride. When mirror
    is set, each window whose active hand is the left one is taken from
    the left/right-mirrored capture instead.
    """
    frames = prepare_frames(positions, tree, sigma, window)
    t_len = frames.shape[0]
    first = (DYNAMIC_FRAMES - 1) * stride
    if first >= t_len:
        raise ValueError(
            f"capture of {t_len} frames too short for stride {stride}"
        )
    vel, acc = joint_dynamics(frames)
    desc = np.stack([assemble_descriptor(frames[t], vel[t], acc[t])
                     for t in range(t_len)])
    desc_mirror = None
    poses = np.empty((t_len - first, DYNAMIC_DIM))
    for i, t in enumerate(range(first, t_len)):
        sampled = slice(t - first, t + 1, stride)
        table = desc
        if mirror and active_hand(frames[sampled]) == "left":
            if desc_mirror is None:
                m_frames = mirror_left_right(frames)
                m_vel, m_acc = joint_dynamics(m_frames)
                desc_mirror = np.stack([
                    assemble_descriptor(m_frames[u], m_vel[u], m_acc[u])
                    for u in range(t_len)
                ])
            table = desc_mirror
        poses[i] = make_dynamic_pose(table, t, stride)
    return poses, first


# --------------------------------------------------------------------------
# feature standardization


@dataclass
class FeatureStandardizer:
    """Per-feature mean and standard deviation from training data.

    Constant features are flagged and passed through with std 1 so they
    never divide by zero.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray   # boolean flags for zero-variance features


def fit_standardizer(descriptors) -> FeatureStandardizer:
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 1:
        raise ValueError("expected a non-empty (n, features) matrix")
    mean = d.mean(axis=0)
    std = d.std(axis=0)
    constant = std < 1e-12
    std = np.where(constant, 1.0, std)
    return FeatureStandardizer(mean, std, constant)


def apply_standardizer(standardizer: FeatureStandardizer,
                       descriptors) -> np.ndarray:
    d = np.asarray(descriptors, dtype=np.float64)
    if d.shape[-1] != standardizer.mean.shape[0]:
        raise ValueError(
            f"descriptor width {d.shape[-1]} does not match the "
            f"fitted {standardizer.mean.shape[0]}"
        )
    return (d - standardizer.mean) / standardizer.std


# --------------------------------------------------------------------------
# capture files: one frame per line, 33 whitespace-separated reals
# (11 joints x xyz, in the JOINTS order)


def write_capture(positions, path) -> None:
    p = check_skeleton(positions)
    if p.ndim == 2:
        p = p[None]
    np.savetxt(path, p.reshape(p.shape[0], N_JOINTS * 3), fmt="%.17g")


def read_capture(path) -> np.ndarray:
    flat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if flat.shape[1] != N_JOINTS * 3:
        raise ValueError(
            f"{path}: expected {N_JOINTS * 3} values per line, "
            f"got {flat.shape[1]}"
        )
    return check_skeleton(flat.reshape(flat.shape[0], N_JOINTS, 3))
