"""Recover 4D human-object samples from rendered observations.

Stages: per-frame object pose via PnP over tracked 2D points (frame 1 is
given), co-location of both sides into the shared camera frame, joint
depth-scale optimization of (s_h, s_o) against the metric depth clouds, a
scale fix that keeps the human metric and rescales the object by
s_o*/s_h*, and per-frame normalization into (body pose, object pose)
training pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import skeleton as sk
from .errors import NonConvergenceError, ValidationError
from .geometry import (
    RigidPose,
    TriMesh,
    d_n_closest_pairs,
    matrix_to_rot6d,
    pnp_solve,
    rot6d_to_matrix,
    so3_exp,
    so3_log,
    yaw_matrix,
    Pose9D,
)
from .optim import AdamState, CosineAdamState, adam_step
from .oracle import Observations

MIN_PNP_POINTS = 6


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class HOISample4D:
    """One synchronized human-motion + object-pose sequence."""

    body: sk.BodyMotion
    object_poses: list[RigidPose]   # model -> human-world frame
    mesh: TriMesh
    applied_scale: float
    category: str
    fps: float
    hand: str = "right"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.object_poses) != self.body.num_frames:
            raise ValidationError("HOISample4D: frame counts disagree")
        if self.applied_scale <= 0:
            raise ValidationError("HOISample4D: applied scale must be positive")

    @property
    def num_frames(self) -> int:
        return self.body.num_frames


@dataclass
class ScaleSolution:
    s_h: float
    s_o: float
    loss_h: float
    loss_o: float
    loss_hoi: float
    loss_col: float
    trace: np.ndarray | None = None  # per-step total loss

    def __post_init__(self):
        if self.s_h <= 0 or self.s_o <= 0:
            raise ValidationError("ScaleSolution scales must be positive")

    @property
    def ratio(self) -> float:
        return self.s_o / self.s_h


class NormalizedPair(NamedTuple):
    theta: np.ndarray       # (21, 3) body pose, unchanged by the normalization
    pose9: np.ndarray       # (9,) object 6D rotation columns + translation
    yaw: float              # world yaw removed (radians)
    pelvis: np.ndarray      # world pelvis position removed


class PoseTrack(NamedTuple):
    poses: list[RigidPose]      # model -> camera, emitted scale
    residuals: np.ndarray       # (F,) mean reprojection error, px
    interpolated: np.ndarray    # (F,) bool, frames recovered by interpolation


# ---------------------------------------------------------------------------
# Stage 1: object pose tracking (PnP per frame, frame 1 known)
# ---------------------------------------------------------------------------


def track_object_poses(obs: Observations, mesh: TriMesh, view: int = 0) -> PoseTrack:
    """Per-frame object pose in the view's camera frame.

    Frame 1 uses the given pose. Later frames solve PnP over the valid
    tracked vertices; frames with fewer than 6 valid tracks are flagged and
    filled by interpolating neighboring solved poses.
    """
    v = obs.views[view]
    f_count = len(v.tracks)
    pts3d_all = mesh.vertices[v.visible_idx]
    cam = v.camera

    poses: list[RigidPose | None] = [None] * f_count
    residuals = np.zeros(f_count)
    flagged = np.zeros(f_count, dtype=bool)
    poses[0] = RigidPose(v.init_pose.r.copy(), v.init_pose.t.copy())

    prev: RigidPose | None = poses[0]
    for fi in range(1, f_count):
        mask = v.valid[fi]
        if mask.sum() < MIN_PNP_POINTS:
            flagged[fi] = True
            prev = None
            continue
        try:
            result = pnp_solve(v.tracks[fi][mask], pts3d_all[mask],
                               cam.focal, cam.cx, cam.cy, initial=prev)
        except NonConvergenceError:
            flagged[fi] = True
            prev = None
            continue
        poses[fi] = result.pose
        residuals[fi] = result.residual
        prev = result.pose

    _interpolate_flagged(poses, flagged)
    return PoseTrack(poses, residuals, flagged)


def _interpolate_flagged(poses: list, flagged: np.ndarray) -> None:
    """Fill missing poses geodesically between the nearest solved neighbors."""
    f_count = len(poses)
    solved = [i for i in range(f_count) if poses[i] is not None]
    if not solved:
        raise ValidationError("track_object_poses: no frame could be solved")
    for i in range(f_count):
        if poses[i] is not None:
            continue
        prev = max((s for s in solved if s < i), default=None)
        nxt = min((s for s in solved if s > i), default=None)
        if prev is None:
            poses[i] = RigidPose(poses[nxt].r.copy(), poses[nxt].t.copy())
        elif nxt is None:
            poses[i] = RigidPose(poses[prev].r.copy(), poses[prev].t.copy())
        else:
            w = (i - prev) / (nxt - prev)
            pa, pb = poses[prev], poses[nxt]
            rel = so3_log(pa.r.T @ pb.r)
            r = pa.r @ so3_exp(w * rel)
            t = (1 - w) * pa.t + w * pb.t
            poses[i] = RigidPose(r, t)


# ---------------------------------------------------------------------------
# Stage 2: co-location into the shared camera frame
# ---------------------------------------------------------------------------


class Colocated(NamedTuple):
    human: np.ndarray   # (F, Nh, 3) body surface points, camera frame
    obj: np.ndarray     # (F, V, 3) object vertices (emitted scale), camera frame


def colocate(obs: Observations, object_poses: list[RigidPose],
             view: int = 0) -> Colocated:
    """Express both sides in the per-frame camera coordinates of one view."""
    v = obs.views[view]
    joints = obs.body.joints()
    surface = sk.surface_points_sequence(joints, obs.surface_per_circle,
                                         obs.surface_rings)
    f_count = obs.num_frames
    human = np.stack([
       v.cam_poses[fi].apply(surface[fi]) for fi in range(f_count)
    ])
    obj = np.stack([
        object_poses[fi].apply(obs.emitted_mesh.vertices) for fi in range(f_count)
    ])
    return Colocated(human, obj)


# ---------------------------------------------------------------------------
# Stage 3: depth-scale optimization
# ---------------------------------------------------------------------------


@dataclass
class ScaleOptConfig:
    lambda_h: float = 1.0
    lambda_o: float = 1.0
    lambda_hoi: float = 1.0
    lambda_col: float = 0.1
    steps: int = 500
    lr: float = 0.05
    lr_final: float = 1e-4  # cosine decay floor; kills the Adam limit cycle
    n_closest_fraction: float = 1.0 / 3.0  # n = ceil(|V_o| * fraction)


def optimize_depth_scale(
    human_f1: np.ndarray,
    obj_f1: np.ndarray,
    human_vis_idx: np.ndarray,
    obj_vis_idx: np.ndarray,
    depth_human: np.ndarray,
    depth_object: np.ndarray,
    capsule_segments: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    cfg: ScaleOptConfig | None = None,
) -> ScaleSolution:
    """Jointly optimize (s_h, s_o) at frame 1 by Adam over the autodiff graph.

    Objective: lambda_h * sum_i ||s_h H_i - P_h,i||^2
             + lambda_o * sum_j ||s_o O_j - P_o,j||^2
             + lambda_hoi * D_n({s_h H}, {s_o O})
             + lambda_col * capsule penetration of object vertices,
    with n the ceiling of one third of the object vertex count. Nearest
    pairs and capsule projections are refreshed from the current scales
    every step; gradients flow through the autodiff tape.
    """
    cfg = cfg or ScaleOptConfig()
    if len(human_vis_idx) == 0 or len(obj_vis_idx) == 0:
        raise ValidationError("optimize_depth_scale: empty visible sets")
    h_vis = np.asarray(human_f1[human_vis_idx], dtype=np.float64)
    o_vis = np.asarray(obj_f1[obj_vis_idx], dtype=np.float64)
    n_closest = int(np.ceil(len(obj_f1) * cfg.n_closest_fraction))

    params = {"s_h": np.array([1.0], dtype=np.float64),
              "s_o": np.array([1.0], dtype=np.float64)}
    state = CosineAdamState(lr=cfg.lr, total_steps=cfg.steps, lr_final=cfg.lr_final)
    trace = np.zeros(cfg.steps)
    parts = (0.0, 0.0, 0.0, 0.0)

    for step in range(cfg.steps):
        sh_v, so_v = float(params["s_h"][0]), float(params["s_o"][0])
        # refresh data-dependent index sets at current scales
        pairs = d_n_closest_pairs(sh_v * human_f1, so_v * obj_f1, n_closest)

        s_h = ad.parameter(params["s_h"], "s_h")
        s_o = ad.parameter(params["s_o"], "s_o")
        loss_h = ad.sum_(ad.power(ad.sub(ad.mul(s_h, ad.constant(h_vis)),
                                         ad.constant(depth_human)), 2.0))
        loss_o = ad.sum_(ad.power(ad.sub(ad.mul(s_o, ad.constant(o_vis)),
                                         ad.constant(depth_object)), 2.0))
        ha = ad.mul(s_h, ad.constant(human_f1[pairs[:, 0]]))
        ob = ad.mul(s_o, ad.constant(obj_f1[pairs[:, 1]]))
        diff = ad.sub(ha, ob)
        # epsilon keeps the gradient finite for exactly coincident pairs
        d2 = ad.add(ad.sum_(ad.mul(diff, diff), axis=1), ad.constant(1e-16))
        loss_hoi = ad.mean(ad.sqrt(d2))
        if capsule_segments is not None and cfg.lambda_col > 0:
            loss_col = _collision_term(s_h, s_o, capsule_segments, obj_f1, sh_v, so_v)
        else:
            loss_col = ad.constant(np.zeros(()))
        total = ad.add(
            ad.add(ad.mul(ad.constant(cfg.lambda_h), loss_h),
                   ad.mul(ad.constant(cfg.lambda_o), loss_o)),
            ad.add(ad.mul(ad.constant(cfg.lambda_hoi), loss_hoi),
                   ad.mul(ad.constant(cfg.lambda_col), loss_col)),
        )
        grads = ad.grad_dict(total, {"s_h": s_h, "s_o": s_o})
        adam_step(state, params, grads)
        for key in params:
            if params[key][0] <= 0:
                params[key][0] = 1e-3
        trace[step] = float(total.data)
        parts = (float(loss_h.data), float(loss_o.data),
                 float(loss_hoi.data), float(loss_col.data))

    if cfg.steps >= 100:
        recent = trace[-50:].mean()
        before = trace[-100:-50].mean()
        if recent > before * (1 + 1e-3) and recent > before + 1e-9:
            raise NonConvergenceError(
                "optimize_depth_scale: loss increased over the final 50 steps",
                trace=trace,
            )
    return ScaleSolution(float(params["s_h"][0]), float(params["s_o"][0]),
                         *parts, trace=trace)


def _collision_term(s_h, s_o, segments, obj_pts, sh_v, so_v):
    """Penetration of scaled object vertices into scaled body capsules.

    Segment projection parameters are frozen at the current scales; the
    distances themselves stay on the tape.
    """
    seg_a, seg_b, radii = segments
    # nearest capsule + projection parameter at current values
    from .geometry import point_segment_params

    t = point_segment_params(so_v * obj_pts, sh_v * seg_a, sh_v * seg_b)
    proj_unit = seg_a[None, :, :] + t[:, :, None] * (seg_b - seg_a)[None, :, :]
    d_now = np.linalg.norm(so_v * obj_pts[:, None, :] - sh_v * proj_unit, axis=2) \
        - sh_v * radii[None, :]
    nearest = d_now.argmin(axis=1)
    keep = d_now[np.arange(len(obj_pts)), nearest] < 0
    if not np.any(keep):
        return ad.constant(np.zeros(()))
    idx = np.nonzero(keep)[0]
    k = nearest[idx]
    anchors = proj_unit[idx, k]          # unscaled human-frame anchor points
    rads = radii[k]
    q = ad.mul(s_o, ad.constant(obj_pts[idx]))
    c = ad.mul(s_h, ad.constant(anchors))
    diff = ad.sub(q, c)
    d2 = ad.add(ad.sum_(ad.mul(diff, diff), axis=1), ad.constant(1e-16))
    sdf = ad.sub(ad.sqrt(d2), ad.mul(s_h, ad.constant(rads)))
    pen = ad.relu(ad.sub(ad.constant(np.zeros(1)), sdf))
    return ad.sum_(ad.mul(pen, pen))


# ---------------------------------------------------------------------------
# Stage 4: scale fix
# ---------------------------------------------------------------------------


def apply_scale(sample: HOISample4D, sol: ScaleSolution,
                cam_poses: list[RigidPose]) -> HOISample4D:
    """Scale the object by s_o*/s_h*, keeping the human metric.

    Translations are rescaled along the per-frame camera rays, which leaves
    every projection unchanged; the mesh is scaled by the same factor.
    """
    k = sol.ratio
    new_poses = []
    for pose, cam in zip(sample.object_poses, cam_poses):
        t_cam = cam.r @ pose.t + cam.t
        t_world = cam.r.T @ (k * t_cam - cam.t)
        new_poses.append(RigidPose(pose.r.copy(), t_world))
    return HOISample4D(
        body=sample.body,
        object_poses=new_poses,
        mesh=sample.mesh.scaled(k),
        applied_scale=sample.applied_scale * k,
        category=sample.category,
        fps=sample.fps,
        hand=sample.hand,
        flags=dict(sample.flags),
    )


# ---------------------------------------------------------------------------
# Stage 5: per-frame normalization
# ---------------------------------------------------------------------------


def facing_yaw(root_orient_aa: np.ndarray, prev_yaw: float | None = None) -> float:
    """Yaw angle of the body's horizontal facing direction (forward = +y)."""
    r = so3_exp(root_orient_aa)
    fwd = r @ np.array([0.0, 1.0, 0.0])
    horiz = np.hypot(fwd[0], fwd[1])
    if horiz < 1e-8:
        if prev_yaw is None:
            raise ValidationError("facing_yaw: vertical body axis on first frame")
        return prev_yaw
    return float(np.arctan2(fwd[1], fwd[0]) - np.pi / 2)


def normalize_frames(sample: HOISample4D) -> list[NormalizedPair]:
    """Per frame: pelvis to origin, facing to +y, same transform on the object.

    Returns pose pairs with the object pose encoded as the first two
    rotation columns plus translation (9 values), plus the removed yaw and
    pelvis for de-normalization.
    """
    pairs = []
    prev_yaw = None
    for fi in range(sample.num_frames):
        yaw = facing_yaw(sample.body.root_orient[fi], prev_yaw)
        prev_yaw = yaw
        pelvis = sample.body.trans[fi]
        rz = yaw_matrix(-yaw)
        obj = sample.object_poses[fi]
        r_n = rz @ obj.r
        t_n = rz @ (obj.t - pelvis)
        pose9 = matrix_to_rot6d(RigidPose(r_n, t_n)).as_vector()
        pairs.append(NormalizedPair(sample.body.theta[fi].copy(), pose9,
                                    yaw, pelvis.copy()))
    return pairs


def denormalize_pose(pose9: np.ndarray, yaw: float, pelvis: np.ndarray) -> RigidPose:
    """Invert normalize_frames for one object pose."""
    pose_n = rot6d_to_matrix(Pose9D.from_vector(pose9))
    rz = yaw_matrix(yaw)
    return RigidPose(rz @ pose_n.r, rz @ pose_n.t + pelvis)


def normalized_theta_sequence(sample: HOISample4D) -> np.ndarray:
    return sample.body.theta.copy()


def normalized_joints(sample: HOISample4D) -> np.ndarray:
    """Joint positions in each frame's normalized coordinates."""
    joints = sample.body.joints()
    out = np.zeros_like(joints)
    prev_yaw = None
    for fi in range(sample.num_frames):
        yaw = facing_yaw(sample.body.root_orient[fi], prev_yaw)
        prev_yaw = yaw
        rz = yaw_matrix(-yaw)
        out[fi] = (joints[fi] - sample.body.trans[fi]) @ rz.T
    return out


# ---------------------------------------------------------------------------
# Stage 6: datasets
# ---------------------------------------------------------------------------

FEATURE_DIM = 70  # 66 root-relative joint coords + v_xy (2) + yaw rate (1) + height (1)


@dataclass
class MotionClip:
    features: np.ndarray  # (F, 70) float32
    tags: tuple[str, ...]
    category: str
    fps: float


@dataclass
class MotionDataset:
    clips: list[MotionClip]
    mean: np.ndarray   # (70,)
    std: np.ndarray    # (70,)
    fps: float

    def normalized(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def denormalize(self, features: np.ndarray) -> np.ndarray:
        return features * self.std + self.mean


@dataclass
class PosePairDataset:
    theta: np.ndarray   # (N, 63)
    pose9: np.ndarray   # (N, 9)
    category: list[str]


@dataclass
class DatasetBundle:
    motion: MotionDataset
    pairs: PosePairDataset
    scale_range: tuple[float, float]


def motion_features(body: sk.BodyMotion, fps: float) -> np.ndarray:
    """Per-frame 70-dim features, exactly invertible back to joints.

    Layout: 66 joint coordinates relative to the pelvis in the facing-
    canonical frame, per-frame horizontal root velocity in that frame (2),
    per-frame yaw rate (1), and pelvis height (1). Velocities are per-frame
    deltas; the last frame repeats the previous delta.
    """
    joints = body.joints()
    f_count = body.num_frames
    yaws = np.zeros(f_count)
    prev = None
    for fi in range(f_count):
        yaws[fi] = facing_yaw(body.root_orient[fi], prev)
        prev = yaws[fi]
    pelvis = body.trans
    feats = np.zeros((f_count, FEATURE_DIM))
    for fi in range(f_count):
        rz_inv = yaw_matrix(-yaws[fi])
        local = (joints[fi] - pelvis[fi]) @ rz_inv.T
        feats[fi, :66] = local.reshape(-1)
        feats[fi, 69] = pelvis[fi, 2]
    dxy = np.diff(pelvis[:, :2], axis=0)
    dyaw = np.diff(np.unwrap(yaws))
    for fi in range(f_count - 1):
        rz_inv2 = yaw_matrix(-yaws[fi])
        v_local = rz_inv2[:2, :2] @ dxy[fi]
        feats[fi, 66:68] = v_local
        feats[fi, 68] = dyaw[fi]
    if f_count > 1:
        feats[-1, 66:69] = feats[-2, 66:69]
    return feats


def features_to_joints(feats: np.ndarray) -> np.ndarray:
    """Integrate features back to world joints (initial yaw/xy are canonical)."""
    feats = np.asarray(feats, dtype=np.float64)
    f_count = len(feats)
    joints = np.zeros((f_count, 22, 3))
    yaw = 0.0
    xy = np.zeros(2)
    for fi in range(f_count):
        rz = yaw_matrix(yaw)
        local = feats[fi, :66].reshape(22, 3)
        pelvis = np.array([xy[0], xy[1], feats[fi, 69]])
        joints[fi] = local @ rz.T + pelvis
        xy = xy + rz[:2, :2] @ feats[fi, 66:68]
        yaw = yaw + feats[fi, 68]
    return joints


def build_dataset(samples: list[HOISample4D]) -> DatasetBundle:
    """Assemble the motion-feature and pose-pair datasets plus the scale range."""
    if not samples:
        raise ValidationError("build_dataset: need at least one sample")
    fps = samples[0].fps
    for s in samples:
        if s.fps != fps:
            raise ValidationError("build_dataset: samples disagree on fps")
    clips = []
    theta_rows = []
    pose_rows = []
    categories = []
    for s in samples:
        feats = motion_features(s.body, fps).astype(np.float32)
        tags = _sample_tags(s)
        clips.append(MotionClip(feats, tags, s.category, fps))
        for pair in normalize_frames(s):
            theta_rows.append(pair.theta.reshape(-1))
            pose_rows.append(pair.pose9)
            categories.append(s.category)
    stacked = np.concatenate([c.features for c in clips], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-4)
    motion = MotionDataset(clips, mean.astype(np.float32), std.astype(np.float32), fps)
    pairs = PosePairDataset(np.array(theta_rows, dtype=np.float32),
                            np.array(pose_rows, dtype=np.float32), categories)
    scales = [s.applied_scale for s in samples]
    return DatasetBundle(motion, pairs, (float(min(scales)), float(max(scales))))


def _sample_tags(sample: HOISample4D) -> tuple[str, ...]:
    base = sample.flags.get("base_tag", "walk")
    return (base, f"{sample.hand}_{sample.category}")


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass
class UpliftReport:
    residuals: np.ndarray
    interpolated: np.ndarray
    solution: ScaleSolution


def uplift_sample(obs: Observations, category: str, hand: str,
                  view: int = 0, cfg: ScaleOptConfig | None = None,
                  base_tag: str = "walk") -> tuple[HOISample4D, UpliftReport]:
    """Full per-view uplift: track -> colocate -> scale -> world-frame sample."""
    v = obs.views[view]
    track = track_object_poses(obs, obs.emitted_mesh, view)
    co = colocate(obs, track.poses, view)

    joints = obs.body.joints()
    cam0 = v.cam_poses[0]
    body_caps = sk.default_capsule_body()
    seg_a, seg_b, radii = body_caps.segments(joints[0])
    segs_cam = (cam0.apply(seg_a), cam0.apply(seg_b), radii)

    sol = optimize_depth_scale(
        co.human[0], co.obj[0],
        v.human_visible_idx, v.visible_idx,
        v.depth_human, v.depth_object,
        capsule_segments=segs_cam, cfg=cfg,
    )

    world_poses = [
        cam.inverse().compose(pose)
        for pose, cam in zip(track.poses, v.cam_poses)
    ]
    sample = HOISample4D(
        body=obs.body,
        object_poses=world_poses,
        mesh=TriMesh(obs.emitted_mesh.vertices.copy(), obs.emitted_mesh.faces.copy()),
        applied_scale=1.0,
        category=category,
        fps=obs.fps,
        hand=hand,
        flags={"base_tag": base_tag,
               "interpolated_frames": int(track.interpolated.sum())},
    )
    sample = apply_scale(sample, sol, v.cam_poses)
    report = UpliftReport(track.residuals, track.interpolated, sol)
    return sample, report
