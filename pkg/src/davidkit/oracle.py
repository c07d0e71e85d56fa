"""Synthetic-scene oracle.

Scripts ground-truth human+object scenes (procedural gait over the 22-joint
skeleton with the object slaved to a grasping hand), then renders the
observations a real uplift pipeline would receive: per-camera 2D vertex
tracks with validity flags, as-recovered human and camera motion, and noisy
back-projected depth clouds at the first frame. Ground truth stays
available for verification.

The emitted object mesh is rescaled by 1/s_true, so consumers must recover
the scale; the human side is emitted at scale 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import (
    PinholeCamera,
    RigidPose,
    TriMesh,
    look_at,
    raycast_visible,
    rotation_between,
    so3_exp,
    so3_log,
    yaw_matrix,
)
from .rng import Rng
from . import skeleton as sk

SCENARIOS = ("pull-forward", "push-forward", "carry-overhead", "hold-static", "lift-lower")

GRASP_TOLERANCE = 0.02  # meters, scripted hand-to-object play

RIG_IMAGE_W = 1200
RIG_IMAGE_H = 800


# ---------------------------------------------------------------------------
# Scripts and scenes
# ---------------------------------------------------------------------------


@dataclass
class ScenarioScript:
    scenario: str
    category: str = "box"
    hand: str = "right"            # which wrist grasps the object
    speed: float = 1.0             # m/s along +x
    cadence: float = 1.0           # gait cycles per second
    grasp_offset: np.ndarray | None = None  # object-frame vector hand -> grasp point
    duration: int = 60             # frames
    fps: float = 30.0
    scale: float = 1.0             # s_true; object's metric scale in the scene
    base_tag: str | None = None    # generic motion tag for base-model training

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(
                f"unknown scenario {self.scenario!r}; known: {', '.join(SCENARIOS)}"
            )
        if self.hand not in ("left", "right"):
            raise ValidationError("script hand must be 'left' or 'right'")
        if self.fps <= 0:
            raise ValidationError("script fps must be positive")
        if self.duration < 8:
            raise ValidationError("script duration must be at least 8 frames")
        if self.speed < 0:
            raise ValidationError("script speed must be non-negative")
        if self.scale <= 0:
            raise ValidationError("script scale must be positive")
        if self.grasp_offset is not None:
            self.grasp_offset = np.asarray(self.grasp_offset, dtype=np.float64).reshape(3)

    def resolved_base_tag(self) -> str:
        if self.base_tag:
            return self.base_tag
        return "walk" if self.speed > 0 else "stand"

    def hand_tag(self) -> str:
        return f"{self.hand}_{self.category}"


@dataclass
class GroundTruthScene:
    body: sk.BodyMotion
    object_poses: list[RigidPose]  # model -> world, at the object's true scale
    mesh: TriMesh                  # at true (metric) scale
    s_true: float
    script: ScenarioScript
    contact: np.ndarray = field(default=None)  # (F,) bool, scripted contact frames

    @property
    def num_frames(self) -> int:
        return self.body.num_frames

    def joints(self) -> np.ndarray:
        return self.body.joints()


# ---------------------------------------------------------------------------
# Primitive object meshes
# ---------------------------------------------------------------------------


def box_mesh(size=(0.3, 0.3, 0.3), subdiv: int = 2) -> TriMesh:
    """Axis-aligned box centered at the origin with subdivided faces."""
    sx, sy, sz = (s / 2 for s in size)
    verts: list[tuple[float, float, float]] = []
    vid: dict[tuple[float, float, float], int] = {}
    faces: list[list[int]] = []

    def vert(p):
        key = (round(p[0], 9), round(p[1], 9), round(p[2], 9))
        if key not in vid:
            vid[key] = len(verts)
            verts.append(key)
        return vid[key]

    axes = [
        (np.array([0, 0, +sz]), np.array([1, 0, 0]), np.array([0, 1, 0]), (sx, sy)),
        (np.array([0, 0, -sz]), np.array([0, 1, 0]), np.array([1, 0, 0]), (sy, sx)),
        (np.array([+sx, 0, 0]), np.array([0, 1, 0]), np.array([0, 0, 1]), (sy, sz)),
        (np.array([-sx, 0, 0]), np.array([0, 0, 1]), np.array([0, 1, 0]), (sz, sy)),
        (np.array([0, +sy, 0]), np.array([0, 0, 1]), np.array([1, 0, 0]), (sz, sx)),
        (np.array([0, -sy, 0]), np.array([1, 0, 0]), np.array([0, 0, 1]), (sx, sz)),
    ]
    n = subdiv
    for center, u, v, (hu, hv) in axes:
        grid = np.empty((n + 1, n + 1), dtype=int)
        for i in range(n + 1):
            for j in range(n + 1):
                fu = -hu + 2 * hu * i / n
                fv = -hv + 2 * hv * j / n
                grid[i, j] = vert(center + fu * u + fv * v)
        for i in range(n):
            for j in range(n):
                a, b = grid[i, j], grid[i + 1, j]
                c, d = grid[i + 1, j + 1], grid[i, j + 1]
                faces.append([a, b, c])
                faces.append([a, c, d])
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces))


def cylinder_mesh(radius: float = 0.18, height: float = 0.55,
                  segments: int = 16, rings: int = 4) -> TriMesh:
    """Closed cylinder along +z, centered at origin; cap fans share a center
    vertex (handy as a grasp anchor)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for ri in range(rings + 1):
        z = -height / 2 + height * ri / rings
        for si in range(segments):
            ang = 2 * np.pi * si / segments
            verts.append([radius * np.cos(ang), radius * np.sin(ang), z])
    top_center = len(verts)
    verts.append([0.0, 0.0, height / 2])
    bot_center = len(verts)
    verts.append([0.0, 0.0, -height / 2])

    def vi(ri, si):
        return ri * segments + (si % segments)

    for ri in range(rings):
        for si in range(segments):
            a, b = vi(ri, si), vi(ri, si + 1)
            c, d = vi(ri + 1, si + 1), vi(ri + 1, si)
            faces.append([a, b, c])
            faces.append([a, c, d])
    for si in range(segments):
        faces.append([top_center, vi(rings, si), vi(rings, si + 1)])
        faces.append([bot_center, vi(0, si + 1), vi(0, si)])
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces))


def tbar_mesh(bar_len: float = 0.5, bar_side: float = 0.05,
              stem_len: float = 0.6, stem_side: float = 0.05,
              subdiv: int = 2) -> TriMesh:
    """T-bar handle: horizontal bar along x on top of a stem along -z."""
    bar = box_mesh((bar_len, bar_side, bar_side), subdiv=subdiv)
    stem = box_mesh((stem_side, stem_side, stem_len), subdiv=subdiv)
    stem_verts = stem.vertices + np.array([0, 0, -(stem_len + bar_side) / 2])
    verts = np.vstack([bar.vertices, stem_verts])
    faces = np.vstack([bar.faces, stem.faces + len(bar.vertices)])
    return TriMesh(verts, faces)


CATEGORY_MESHES = {
    "suitcase": lambda: cylinder_mesh(radius=0.10, height=0.55, segments=24, rings=6),
    "cart": lambda: tbar_mesh(),
    "box": lambda: box_mesh((0.24, 0.24, 0.24), subdiv=3),
}


def category_mesh(category: str) -> TriMesh:
    if category not in CATEGORY_MESHES:
        raise ValidationError(
            f"no built-in mesh for category {category!r}; known: {sorted(CATEGORY_MESHES)}"
        )
    return CATEGORY_MESHES[category]()


def default_grasp_offset(category: str, scenario: str = "hold-static") -> np.ndarray:
    """Object-frame grasp point, chosen to coincide with a mesh vertex."""
    if category == "suitcase":
        return np.array([0.0, 0.0, 0.275])   # top cap center
    if category == "cart":
        return np.array([0.0, 0.0, 0.0])     # bar center
    if scenario == "carry-overhead":
        return np.array([0.0, 0.0, -0.12])   # box bottom-face center (held from below)
    return np.array([0.0, 0.0, 0.12])        # box top-face center


# ---------------------------------------------------------------------------
# Camera rig
# ---------------------------------------------------------------------------


def camera_rig_default(radius: float, z_offset: float = 0.0) -> list[PinholeCamera]:
    """Eight cameras at 45-degree azimuth spacing, 5-degree elevation,
    looking at the origin. f = sqrt(h^2 + w^2), principal point centered.

    `z_offset` shifts the whole rig (cameras and look target) vertically so
    elevated objects stay in frame; the default keeps axes through the origin.
    """
    if radius <= 0:
        raise ValidationError("camera rig radius must be positive")
    w, h = RIG_IMAGE_W, RIG_IMAGE_H
    focal = float(np.sqrt(h * h + w * w))
    elev = np.deg2rad(5.0)
    target = np.array([0.0, 0.0, z_offset])
    cams = []
    for k in range(8):
        az = np.deg2rad(45.0 * k)
        center = radius * np.array([
            np.cos(az) * np.cos(elev),
            np.sin(az) * np.cos(elev),
            np.sin(elev),
        ]) + target
        pose = look_at(center, target)
        cams.append(PinholeCamera(focal, w / 2, h / 2, w, h, pose))
    return cams


# ---------------------------------------------------------------------------
# Scene generation: procedural gait + slaved object
# ---------------------------------------------------------------------------

ANKLE_CLEARANCE = 0.06    # ankle target height during stance
SWING_LIFT = 0.12         # peak extra foot lift during swing
PELVIS_WALK_HEIGHT = 0.86


def _smoothstep(s: np.ndarray | float):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _foot_target(time: float, cycle: float, phase0: float, step: float,
                 lateral: float, speed: float):
    """World ankle target for one leg at `time` (march frame, x = speed*t).

    Each leg alternates 50% stance (pinned anchor) / 50% swing (smooth
    advance to the next anchor with a sinusoidal lift). Anchors lead the
    hip by step/2 at stance start so the hip passes over them symmetrically.
    """
    if speed == 0 or step == 0:
        return np.array([0.0, lateral, ANKLE_CLEARANCE]), True
    t = time / cycle + phase0
    k = np.floor(t)
    frac = t - k
    anchor = (k - phase0) * 2 * step + step / 2
    if frac < 0.5:
        return np.array([anchor, lateral, ANKLE_CLEARANCE]), True
    s = (frac - 0.5) / 0.5
    x = anchor + 2 * step * _smoothstep(s)
    # steep takeoff/landing so the swing foot clears the ground-contact band fast
    z = ANKLE_CLEARANCE + SWING_LIFT * np.sqrt(max(np.sin(np.pi * s), 0.0))
    return np.array([x, lateral, z]), False


def _two_bone_ik(root: np.ndarray, target: np.ndarray, l1: float, l2: float,
                 bend_hint: np.ndarray):
    """Positions of the middle joint for a 2-bone chain root->mid->target.

    The middle joint is placed in the plane through the chain axis and the
    bend hint, on the hint side. The target is clamped to reach.
    """
    u = target - root
    d = np.linalg.norm(u)
    d = np.clip(d, abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6)
    uhat = u / np.linalg.norm(u)
    target = root + uhat * d
    a = (l1 * l1 - l2 * l2 + d * d) / (2 * d)
    r2 = max(l1 * l1 - a * a, 1e-12)
    w = bend_hint - np.dot(bend_hint, uhat) * uhat
    nw = np.linalg.norm(w)
    if nw < 1e-9:
        w = np.array([0.0, 0.0, 1.0]) - uhat[2] * uhat
        nw = np.linalg.norm(w)
    w = w / nw
    mid = root + a * uhat + np.sqrt(r2) * w
    return mid, target


def generate_scene(script: ScenarioScript, seed: int) -> GroundTruthScene:
    """Deterministic ground-truth scene for a scenario script."""
    rng = Rng(seed).split("scene")
    f_count = script.duration
    span = script.duration / script.fps
    times = np.linspace(0.0, span, f_count)

    mesh_true = category_mesh(script.category).scaled(script.scale)
    grasp = script.grasp_offset
    if grasp is None:
        grasp = default_grasp_offset(script.category, script.scenario) * script.scale
    else:
        grasp = grasp * script.scale

    yaw = -np.pi / 2  # rest faces +y; walking travels along +x
    r_root = yaw_matrix(yaw)
    root_aa = so3_log(r_root)

    step = script.speed / (2 * script.cadence) if script.speed > 0 else 0.0
    cycle = 1.0 / script.cadence

    theta = np.zeros((f_count, 21, 3))
    root_orient = np.tile(root_aa, (f_count, 1))
    trans = np.zeros((f_count, 3))

    # lateral foot anchors from yawed hip sockets
    hip_l_world = r_root @ sk.REST_OFFSETS[1]
    hip_r_world = r_root @ sk.REST_OFFSETS[2]

    obj_poses: list[RigidPose] = []
    grasp_side = script.hand
    wrist_idx = sk.L_WRIST if grasp_side == "left" else sk.R_WRIST

    # object orientation rides the body yaw
    obj_r = r_root.copy()

    # center the walk on the origin so the camera rig keeps the scene in frame
    center_shift = np.array([-script.speed * span / 2, 0.0, 0.0])

    for fi, t in enumerate(times):
        pelvis = np.array([script.speed * t, 0.0, PELVIS_WALK_HEIGHT]) + center_shift
        if script.speed > 0:
            pelvis[2] += 0.01 * np.sin(4 * np.pi * script.cadence * t)
        trans[fi] = pelvis

        hip_l = pelvis + hip_l_world
        hip_r = pelvis + hip_r_world
        tgt_l, _ = _foot_target(t, cycle, 0.0, step, hip_l_world[1], script.speed)
        tgt_r, _ = _foot_target(t, cycle, 0.5, step, hip_r_world[1], script.speed)
        tgt_l += center_shift
        tgt_r += center_shift
        if script.speed == 0:
            tgt_l[0] = hip_l[0]
            tgt_r[0] = hip_r[0]
            tgt_l[1] = hip_l[1]
            tgt_r[1] = hip_r[1]

        fwd = r_root @ np.array([0.0, 1.0, 0.0])
        joint_pos: dict[int, np.ndarray] = {0: pelvis, 1: hip_l, 2: hip_r}

        for hip_j, knee_j, ankle_j, foot_j, tgt in (
            (1, 4, 7, 10, tgt_l), (2, 5, 8, 11, tgt_r)
        ):
            knee, ankle = _two_bone_ik(joint_pos[hip_j], tgt,
                                       sk.UPPER_LEG, sk.LOWER_LEG, fwd)
            joint_pos[knee_j] = knee
            joint_pos[ankle_j] = ankle
            # foot flat, pointing forward
            foot_rest = sk.REST_OFFSETS[foot_j]
            foot_dir = r_root @ foot_rest
            joint_pos[foot_j] = ankle + foot_dir

        # torso chain stays upright
        g_spine = r_root
        for j in (3, 6, 9, 12, 15, 13, 14):
            p = sk.PARENTS[j]
            joint_pos[j] = joint_pos[p] + g_spine @ sk.REST_OFFSETS[j]
        for j in (16, 17):
            p = sk.PARENTS[j]
            joint_pos[j] = joint_pos[p] + g_spine @ sk.REST_OFFSETS[j]

        # arm targets
        wrist_targets = _wrist_targets(script, pelvis, r_root, t, rng_phase=0.0)
        for side, (sh_j, el_j, wr_j) in (("left", (16, 18, 20)),
                                         ("right", (17, 19, 21))):
            target = wrist_targets[side]
            outward = r_root @ np.array([1.0 if side == "left" else -1.0, -0.4, -0.2])
            mid, tgt_w = _two_bone_ik(joint_pos[sh_j], target,
                                      sk.UPPER_ARM, sk.FOREARM, outward)
            joint_pos[el_j] = mid
            joint_pos[wr_j] = tgt_w

        joints_frame = np.stack([joint_pos[j] for j in range(22)])
        body_frame = sk.body_motion_from_joints(joints_frame[None])
        theta[fi] = body_frame.theta[0]
        root_orient[fi] = body_frame.root_orient[0]
        trans[fi] = body_frame.trans[0]

        wrist_pos = joint_pos[wrist_idx]
        t_obj = wrist_pos - obj_r @ grasp
        obj_poses.append(RigidPose(obj_r.copy(), t_obj))

    body = sk.BodyMotion(theta, root_orient, trans)
    contact = np.ones(f_count, dtype=bool)
    return GroundTruthScene(body, obj_poses, mesh_true, script.scale, script, contact)


def _wrist_targets(script: ScenarioScript, pelvis: np.ndarray, r_root: np.ndarray,
                   t: float, rng_phase: float) -> dict[str, np.ndarray]:
    """Scripted world-space wrist targets; the grasping hand carries the object."""
    # rest-frame lateral sign: left = +x before yaw
    def local(side, vec):
        lateral = 1.0 if side == "left" else -1.0
        v = np.array([lateral * vec[0], vec[1], vec[2]])
        return pelvis + r_root @ v

    relaxed = {
        "left": local("left", (0.26, 0.05, -0.05)),
        "right": local("right", (0.26, 0.05, -0.05)),
    }
    g = script.hand
    if script.scenario == "pull-forward":
        relaxed[g] = local(g, (0.24, -0.20, -0.02))
    elif script.scenario == "push-forward":
        relaxed[g] = local(g, (0.20, 0.35, 0.15))
    elif script.scenario == "carry-overhead":
        relaxed[g] = local(g, (0.16, 0.28, 0.60))
    elif script.scenario == "hold-static":
        relaxed[g] = local(g, (0.20, 0.34, 0.14))
    elif script.scenario == "lift-lower":
        lift = 0.10 * np.sin(2 * np.pi * 0.5 * t)
        relaxed[g] = local(g, (0.20, 0.26, 0.10 + lift))
    return relaxed


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    track_px: float = 0.0    # Gaussian pixel noise on 2D tracks
    depth_rel: float = 0.0   # relative Gaussian noise on depth points
    hmr_jitter: float = 0.0  # additive jitter on recovered body parameters

    def __post_init__(self):
        if min(self.track_px, self.depth_rel, self.hmr_jitter) < 0:
            raise ValidationError("noise sigmas must be non-negative")


@dataclass
class CameraView:
    camera: PinholeCamera
    cam_poses: list[RigidPose]      # world->camera per frame (static rig: constant)
    visible_idx: np.ndarray         # (V,) object vertex indices tracked from frame 1
    tracks: np.ndarray              # (F, V, 2) pixel tracks
    valid: np.ndarray               # (F, V) bool
    init_pose: RigidPose            # emitted-scale object pose, model->camera, frame 1
    depth_object: np.ndarray        # (V, 3) camera-frame metric points, noisy
    human_visible_idx: np.ndarray   # (Nh,) indices into the body surface points
    depth_human: np.ndarray         # (Nh, 3) camera-frame metric points, noisy


@dataclass
class Observations:
    views: list[CameraView]
    body: sk.BodyMotion             # as-recovered human motion (scale 1)
    emitted_mesh: TriMesh           # object mesh rescaled by 1/s_true
    fps: float
    surface_per_circle: int = 6
    surface_rings: int = 4

    @property
    def num_frames(self) -> int:
        return self.body.num_frames


def render_observations(scene: GroundTruthScene, rig: list[PinholeCamera],
                        noise: NoiseSpec, seed: int,
                        views: list[int] | None = None) -> Observations:
    """Render tracked 2D observations + depth clouds from a ground-truth scene."""
    rng = Rng(seed).split("obs")
    f_count = scene.num_frames
    joints = scene.joints()
    surface = sk.surface_points_sequence(joints)

    s = scene.s_true
    emitted_mesh = scene.mesh.scaled(1.0 / s)

    if views is None:
        views = list(range(len(rig)))
    out_views = []
    for k in views:
        cam = rig[k]
        vrng = rng.split(f"view{k}")
        world_mesh_f1 = scene.mesh.transformed(scene.object_poses[0])
        occluders = _scene_occluder(world_mesh_f1)
        vis = raycast_visible(occluders, cam)
        if len(vis) == 0:
            vis = np.array([], dtype=np.int64)

        tracks = np.zeros((f_count, len(vis), 2))
        valid = np.zeros((f_count, len(vis)), dtype=bool)
        for fi in range(f_count):
            world_pts = scene.object_poses[fi].apply(scene.mesh.vertices[vis])
            xc = cam.pose.apply(world_pts)
            front = xc[:, 2] > 1e-9
            uv = np.zeros((len(vis), 2))
            uv[front] = cam.project_camera_points(xc[front])
            occ = _occluded_mask(scene.mesh.transformed(scene.object_poses[fi]),
                                 cam, vis)
            ok = front & cam.in_image(uv) & ~occ
            if noise.track_px > 0:
                uv = uv + vrng.normal(0.0, noise.track_px, uv.shape)
            inside_after = ok & cam.in_image(uv)
            tracks[fi] = uv
            valid[fi] = inside_after

        # emitted-scale first-frame pose (model -> camera)
        r_true = cam.pose.r @ scene.object_poses[0].r
        t_true = cam.pose.r @ scene.object_poses[0].t + cam.pose.t
        init_pose = RigidPose(r_true, t_true / s)

        # depth clouds at frame 1 (true camera-frame points, multiplicative noise)
        obj_cam = cam.pose.apply(scene.object_poses[0].apply(scene.mesh.vertices[vis]))
        eps_o = vrng.normal(0.0, noise.depth_rel, len(obj_cam)) if noise.depth_rel > 0 else np.zeros(len(obj_cam))
        depth_object = obj_cam * (1.0 + eps_o)[:, None]

        hum_cam = cam.pose.apply(surface[0])
        front = hum_cam[:, 2] > 1e-9
        uv_h = np.zeros((len(hum_cam), 2))
        uv_h[front] = cam.project_camera_points(hum_cam[front])
        h_vis = np.nonzero(front & cam.in_image(uv_h))[0]
        eps_h = vrng.normal(0.0, noise.depth_rel, len(h_vis)) if noise.depth_rel > 0 else np.zeros(len(h_vis))
        depth_human = hum_cam[h_vis] * (1.0 + eps_h)[:, None]

        out_views.append(CameraView(
            camera=cam,
            cam_poses=[RigidPose(cam.pose.r.copy(), cam.pose.t.copy())
                       for _ in range(f_count)],
            visible_idx=vis,
            tracks=tracks,
            valid=valid,
            init_pose=init_pose,
            depth_object=depth_object,
            human_visible_idx=h_vis,
            depth_human=depth_human,
        ))

    body_rec = _jittered_body(scene.body, noise.hmr_jitter, rng.split("hmr"))
    return Observations(out_views, body_rec, emitted_mesh, scene.script.fps)


def _scene_occluder(world_mesh: TriMesh) -> TriMesh:
    return world_mesh


def _occluded_mask(world_mesh: TriMesh, cam: PinholeCamera,
                   vertex_idx: np.ndarray) -> np.ndarray:
    """True where a tracked vertex is self-occluded at this frame."""
    visible_now = set(raycast_visible(world_mesh, cam).tolist())
    return np.array([i not in visible_now for i in vertex_idx], dtype=bool)


def _jittered_body(body: sk.BodyMotion, sigma: float, rng: Rng) -> sk.BodyMotion:
    if sigma <= 0:
        return sk.BodyMotion(body.theta.copy(), body.root_orient.copy(),
                             body.trans.copy())
    return sk.BodyMotion(
        body.theta + rng.normal(0.0, sigma, body.theta.shape),
        body.root_orient + rng.normal(0.0, sigma, body.root_orient.shape),
        body.trans + rng.normal(0.0, sigma, body.trans.shape),
    )
