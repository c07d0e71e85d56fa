"""Fixed 22-joint skeleton with forward kinematics and a capsule surface.

The joint set and ordering mirror a standard parametric body (pelvis root
plus 21 articulated joints, each an axis-angle rotation relative to its
parent). Shape is fixed: bone offsets below describe a ~1.7 m person in a
rest pose facing +y, arms in T-pose, +z up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import CapsuleBody, rotation_between, so3_exp, so3_log

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
]

PARENTS = np.array([
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19
])

PELVIS, L_WRIST, R_WRIST = 0, 20, 21
L_ANKLE, R_ANKLE, L_FOOT, R_FOOT = 7, 8, 10, 11
FOOT_JOINTS = (L_FOOT, R_FOOT)
WRIST_JOINTS = (L_WRIST, R_WRIST)

# Bone offsets (child position - parent position) in the rest pose, meters.
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis (root, offset unused)
    [+0.09, 0.00, -0.06],  # left_hip
    [-0.09, 0.00, -0.06],  # right_hip
    [0.00, 0.00, +0.12],   # spine1
    [0.00, 0.00, -0.40],   # left_knee
    [0.00, 0.00, -0.40],   # right_knee
    [0.00, 0.00, +0.14],   # spine2
    [0.00, 0.00, -0.40],   # left_ankle
    [0.00, 0.00, -0.40],   # right_ankle
    [0.00, 0.00, +0.14],   # spine3
    [0.00, +0.14, -0.05],  # left_foot
    [0.00, +0.14, -0.05],  # right_foot
    [0.00, 0.00, +0.10],   # neck
    [+0.08, 0.00, +0.06],  # left_collar
    [-0.08, 0.00, +0.06],  # right_collar
    [0.00, 0.00, +0.12],   # head
    [+0.10, 0.00, 0.00],   # left_shoulder
    [-0.10, 0.00, 0.00],   # right_shoulder
    [+0.28, 0.00, 0.00],   # left_elbow
    [-0.28, 0.00, 0.00],   # right_elbow
    [+0.26, 0.00, 0.00],   # left_wrist
    [-0.26, 0.00, 0.00],   # right_wrist
], dtype=np.float64)

REST_PELVIS_HEIGHT = 0.86  # hip sockets at 0.80, full leg 0.80, ankle at ground pass

UPPER_LEG = 0.40
LOWER_LEG = 0.40
UPPER_ARM = 0.28
FOREARM = 0.26

# (joint_a, joint_b, radius) capsules approximating the body surface
BODY_CAPSULES = [
    (1, 4, 0.07), (2, 5, 0.07),      # thighs
    (4, 7, 0.05), (5, 8, 0.05),      # shins
    (7, 10, 0.035), (8, 11, 0.035),  # feet
    (0, 9, 0.11),                    # torso
    (12, 15, 0.065),                 # neck+head
    (13, 16, 0.05), (14, 17, 0.05),  # shoulders
    (16, 18, 0.045), (17, 19, 0.045),  # upper arms
    (18, 20, 0.04), (19, 21, 0.04),  # forearms
]


def default_capsule_body() -> CapsuleBody:
    return CapsuleBody(list(BODY_CAPSULES))


@dataclass
class BodyMotion:
    """Per-frame body parameters: 21 joint rotations, root orientation, and
    root translation (all axis-angle / meters)."""

    theta: np.ndarray        # (F, 21, 3)
    root_orient: np.ndarray  # (F, 3)
    trans: np.ndarray        # (F, 3)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 21, 3)
        f = len(self.theta)
        self.root_orient = np.asarray(self.root_orient, dtype=np.float64).reshape(f, 3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(f, 3)

    @property
    def num_frames(self) -> int:
        return len(self.theta)

    def joints(self) -> np.ndarray:
        return forward_kinematics(self.theta, self.root_orient, self.trans)


def forward_kinematics(theta: np.ndarray, root_orient: np.ndarray,
                       trans: np.ndarray) -> np.ndarray:
    """(F,21,3) axis-angle + (F,3) root orient + (F,3) trans -> joints (F,22,3).

    The root translation is the pelvis position.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 21, 3)
    root_orient = np.asarray(root_orient, dtype=np.float64).reshape(-1, 3)
    trans = np.asarray(trans, dtype=np.float64).reshape(-1, 3)
    f = len(theta)
    joints = np.zeros((f, 22, 3))
    globals_r = np.zeros((f, 22, 3, 3))
    for fi in range(f):
        globals_r[fi, 0] = so3_exp(root_orient[fi])
        joints[fi, 0] = trans[fi]
        for j in range(1, 22):
            p = PARENTS[j]
            local = so3_exp(theta[fi, j - 1])
            globals_r[fi, j] = globals_r[fi, p] @ local
            joints[fi, j] = joints[fi, p] + globals_r[fi, p] @ REST_OFFSETS[j]
    return joints


def global_rotations(theta: np.ndarray, root_orient: np.ndarray) -> np.ndarray:
    """(F, 22, 3, 3) global joint rotations."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 21, 3)
    root_orient = np.asarray(root_orient, dtype=np.float64).reshape(-1, 3)
    f = len(theta)
    out = np.zeros((f, 22, 3, 3))
    for fi in range(f):
        out[fi, 0] = so3_exp(root_orient[fi])
        for j in range(1, 22):
            out[fi, j] = out[fi, PARENTS[j]] @ so3_exp(theta[fi, j - 1])
    return out


_CHILDREN: list[list[int]] = [[] for _ in range(22)]
for _j in range(1, 22):
    _CHILDREN[PARENTS[_j]].append(_j)


def body_motion_from_joints(joints: np.ndarray) -> BodyMotion:
    """Recover canonical joint rotations from joint positions.

    Single-child joints get the minimal (twist-free) rotation aligning the
    rest bone to the observed bone; multi-child joints get the best-fit
    (Kabsch) rotation over their children. Leaves keep identity. Composing
    with `forward_kinematics` reproduces the input positions whenever bone
    lengths are consistent with the rest skeleton.
    """
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 22, 3)
    f = len(joints)
    theta = np.zeros((f, 21, 3))
    root_orient = np.zeros((f, 3))
    trans = joints[:, 0].copy()
    for fi in range(f):
        g = np.zeros((22, 3, 3))
        for j in range(22):
            kids = _CHILDREN[j]
            if not kids:
                g[j] = g[PARENTS[j]]
                continue
            if len(kids) == 1:
                k = kids[0]
                target = joints[fi, k] - joints[fi, j]
                nt = np.linalg.norm(target)
                rest = REST_OFFSETS[k]
                if nt < 1e-9:
                    rot = np.eye(3)
                else:
                    rot = rotation_between(rest, target)
            else:
                rest = np.stack([REST_OFFSETS[k] for k in kids])
                cur = np.stack([joints[fi, k] - joints[fi, j] for k in kids])
                rot = _kabsch(rest, cur)
            g[j] = rot
        root_orient[fi] = so3_log(g[0])
        for j in range(1, 22):
            local = g[PARENTS[j]].T @ g[j]
            theta[fi, j - 1] = so3_log(local)
    return BodyMotion(theta, root_orient, trans)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation best aligning row vectors src -> dst (no scaling)."""
    h = src.T @ dst
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    fix = np.diag([1.0, 1.0, d])
    return vt.T @ fix @ u.T


def canonicalize(body: BodyMotion) -> BodyMotion:
    """Round-trip through joint positions, normalizing away bone twists."""
    return body_motion_from_joints(body.joints())


def surface_points(joints_frame: np.ndarray, per_circle: int = 6,
                   rings: int = 4, body: CapsuleBody | None = None) -> np.ndarray:
    """Deterministic sample points on the capsule surface for one frame."""
    body = body or default_capsule_body()
    a, b, radii = body.segments(joints_frame)
    pts = []
    for k in range(len(radii)):
        axis = b[k] - a[k]
        length = np.linalg.norm(axis)
        if length < 1e-9:
            axis_dir = np.array([0.0, 0.0, 1.0])
        else:
            axis_dir = axis / length
        # orthonormal frame around the axis
        ref = np.array([1.0, 0.0, 0.0])
        if abs(np.dot(ref, axis_dir)) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis_dir, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis_dir, u)
        for ri in range(rings):
            frac = (ri + 0.5) / rings
            center = a[k] + frac * axis
            for ci in range(per_circle):
                ang = 2 * np.pi * (ci + (ri % 2) * 0.5) / per_circle
                pts.append(center + radii[k] * (np.cos(ang) * u + np.sin(ang) * v))
        pts.append(a[k] - axis_dir * radii[k])
        pts.append(b[k] + axis_dir * radii[k])
    return np.array(pts)


def surface_points_sequence(joints: np.ndarray, per_circle: int = 6,
                            rings: int = 4) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    body = default_capsule_body()
    return np.stack([
        surface_points(joints[f], per_circle, rings, body)
        for f in range(len(joints))
    ])


def validate_motion(body: BodyMotion) -> None:
    if not np.all(np.isfinite(body.theta)):
        raise ValidationError("BodyMotion: non-finite joint rotations")
    if not np.all(np.isfinite(body.trans)):
        raise ValidationError("BodyMotion: non-finite root translation")
