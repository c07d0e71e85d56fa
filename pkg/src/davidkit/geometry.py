"""Rigid poses, cameras, meshes, and the point-set distances used throughout.

Conventions: world frame is right-handed with +z up (gravity -z); cameras
are right-handed with +x right, +y down, +z forward, and their pose maps
world to camera coordinates (X_cam = R @ X_world + t). All geometry here
runs in float64; the learned models downstream use float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateRotationError,
    InsufficientCorrespondencesError,
    NonConvergenceError,
    ValidationError,
)

# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: axis-angle 3-vector -> rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> axis-angle 3-vector (angle in [0, pi])."""
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2
    if np.pi - theta < 1e-6:
        # near pi: extract axis from R + I
        m = (r + np.eye(3)) / 2
        axis = np.sqrt(np.maximum(np.diagonal(m), 0))
        # fix signs using off-diagonals
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = m[i] / axis[i]
            axis = axis / np.linalg.norm(axis)
        return axis * theta
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis * theta / (2 * np.sin(theta))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit-ish vector a to unit-ish vector b."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = np.cross(a, b)
    d = float(np.dot(a, b))
    if d > 1 - 1e-12:
        return np.eye(3)
    if d < -1 + 1e-9:
        # 180 degrees: rotate about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return so3_exp(axis * np.pi)
    angle = np.arctan2(np.linalg.norm(c), d)
    return so3_exp(c / np.linalg.norm(c) * angle)


def yaw_matrix(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class RigidPose:
    """SE(3) transform X' = r @ X + t, translation in meters."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.r.T + self.t

    def inverse(self) -> "RigidPose":
        return RigidPose(self.r.T, -self.r.T @ self.t)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self @ other)(X) = self(other(X))."""
        return RigidPose(self.r @ other.r, self.r @ other.t + self.t)

    def validate(self, tol: float = 1e-6) -> None:
        if not np.allclose(self.r.T @ self.r, np.eye(3), atol=tol):
            raise ValidationError("RigidPose rotation is not orthonormal")
        if abs(np.linalg.det(self.r) - 1.0) > tol:
            raise ValidationError("RigidPose rotation has det != 1")

    def as_flat12(self) -> np.ndarray:
        return np.concatenate([self.r.reshape(9), self.t])

    @classmethod
    def from_flat12(cls, flat: np.ndarray) -> "RigidPose":
        flat = np.asarray(flat, dtype=np.float64).reshape(12)
        return cls(flat[:9].reshape(3, 3), flat[9:])


# ---------------------------------------------------------------------------
# 6D rotation codec (two 3-vectors + translation -> 9-D pose)
# ---------------------------------------------------------------------------


@dataclass
class Pose9D:
    """6D rotation (rx, ry = first two matrix columns before orthonormalization)
    plus translation; the 9-value object pose used by the pose diffusion model."""

    rx: np.ndarray
    ry: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.rx = np.asarray(self.rx, dtype=np.float64).reshape(3)
        self.ry = np.asarray(self.ry, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rx, self.ry, self.t])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Pose9D":
        v = np.asarray(v, dtype=np.float64).reshape(9)
        return cls(v[:3], v[3:6], v[6:9])


def rot6d_to_matrix(p: Pose9D) -> RigidPose:
    """Gram-Schmidt the two direction vectors into a rotation; copy translation.

    b1 = normalize(rx); b2 = normalize(ry - (ry.b1) b1); b3 = b1 x b2;
    columns of the result are [b1 b2 b3].
    """
    nx = np.linalg.norm(p.rx)
    if nx < 1e-9:
        raise DegenerateRotationError("rot6d: rx is (near) zero")
    b1 = p.rx / nx
    proj = p.ry - np.dot(p.ry, b1) * b1
    np_ = np.linalg.norm(proj)
    if np_ < 1e-9:
        raise DegenerateRotationError("rot6d: ry is (near) parallel to rx")
    b2 = proj / np_
    b3 = np.cross(b1, b2)
    return RigidPose(np.stack([b1, b2, b3], axis=1), p.t)


def matrix_to_rot6d(pose: RigidPose) -> Pose9D:
    """First two rotation columns + translation."""
    return Pose9D(pose.r[:, 0].copy(), pose.r[:, 1].copy(), pose.t.copy())


def rot6d_batch_to_matrices(p: np.ndarray) -> np.ndarray:
    """Vectorized Gram-Schmidt over (..., 9) pose vectors -> (..., 3, 3)."""
    p = np.asarray(p, dtype=np.float64)
    rx, ry = p[..., 0:3], p[..., 3:6]
    b1 = rx / np.linalg.norm(rx, axis=-1, keepdims=True)
    proj = ry - np.sum(ry * b1, axis=-1, keepdims=True) * b1
    b2 = proj / np.linalg.norm(proj, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------


@dataclass
class PinholeCamera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidPose  # world -> camera

    def __post_init__(self):
        if self.focal <= 0:
            raise ValidationError("camera focal length must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.pose.r.T @ self.pose.t

    def project(self, x_world: np.ndarray) -> np.ndarray:
        """World point -> pixel (u, v). Errors if the point is behind the camera."""
        xc = self.pose.apply(np.asarray(x_world, dtype=np.float64))
        if xc.ndim == 1:
            if xc[2] <= 1e-9:
                raise ValidationError("project: point behind camera (z <= 0)")
            return np.array([
                self.focal * xc[0] / xc[2] + self.cx,
                self.focal * xc[1] / xc[2] + self.cy,
            ])
        return self.project_camera_points(xc)

    def project_camera_points(self, xc: np.ndarray) -> np.ndarray:
        """(N,3) camera-frame points -> (N,2) pixels; caller checks depth."""
        z = xc[:, 2]
        return np.stack([
            self.focal * xc[:, 0] / z + self.cx,
            self.focal * xc[:, 1] / z + self.cy,
        ], axis=1)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= 0) & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)
        )


def look_at(center: np.ndarray, target: np.ndarray,
            world_up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World->camera pose for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(world_up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValidationError("look_at: view direction parallel to world up")
    x = x / nx
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=0)
    return RigidPose(r, -r @ center)


# ---------------------------------------------------------------------------
# Triangle meshes and raycast visibility
# ---------------------------------------------------------------------------


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    faces: np.ndarray     # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValidationError("TriMesh: face index out of range")
        if len(self.faces) and self.faces.min() < 0:
            raise ValidationError("TriMesh: negative face index")
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("TriMesh: non-finite vertex coordinates")

    def transformed(self, pose: RigidPose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.faces.copy())

    def scaled(self, s: float) -> "TriMesh":
        return TriMesh(self.vertices * float(s), self.faces.copy())

    def bbox_diagonal(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def load_obj(path: str | Path) -> TriMesh:
    """ASCII OBJ subset: 'v x y z' vertices and triangular 'f i j k' (1-based)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValidationError(f"{path}:{lineno}: malformed vertex line")
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValidationError(
                    f"{path}:{lineno}: only triangular faces are supported"
                )
            idx = []
            for tok in parts[1:]:
                if "/" in tok:
                    raise ValidationError(
                        f"{path}:{lineno}: texture/normal face indices not supported"
                    )
                idx.append(int(tok) - 1)
            faces.append(idx)
        # other directives ignored
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def save_obj(path: str | Path, mesh: TriMesh) -> None:
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"f {f[0]+1} {f[1]+1} {f[2]+1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def _moller_trumbore(origin: np.ndarray, direction: np.ndarray,
                     v0: np.ndarray, v1: np.ndarray, v2: np.ndarray):
    """Batched ray-triangle intersection. Returns (hit_mask, t) per triangle,
    where hits at parameter t along `direction` (not normalized)."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    eps = 1e-12
    parallel = np.abs(det) < eps
    inv_det = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.einsum("j,ij->i", direction, qvec) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    hit = (~parallel) & (u >= 0) & (v >= 0) & (u + v <= 1)
    return hit, t


def raycast_visible(mesh: TriMesh, cam: PinholeCamera) -> np.ndarray:
    """Indices of vertices visible from `cam`.

    A vertex counts as visible when it projects inside the image, lies in
    front of the camera, and the segment from the camera center to the
    vertex hits no triangle strictly before the vertex (tolerance 1e-6 of
    the segment length).
    """
    if len(mesh.vertices) == 0:
        raise ValidationError("raycast_visible: empty mesh")
    origin = cam.center()
    xc = cam.pose.apply(mesh.vertices)
    in_front = xc[:, 2] > 1e-9
    uv = np.full((len(mesh.vertices), 2), -1.0)
    uv[in_front] = cam.project_camera_points(xc[in_front])
    inside = in_front & cam.in_image(uv)

    tri = mesh.vertices[mesh.faces]  # (T, 3, 3)
    visible = []
    for i in np.nonzero(inside)[0]:
        direction = mesh.vertices[i] - origin
        o = np.broadcast_to(origin, tri[:, 0].shape)
        d = direction
        hit, t = _moller_trumbore(o, d, tri[:, 0], tri[:, 1], tri[:, 2])
        occluded = np.any(hit & (t > 1e-9) & (t < 1.0 - 1e-6))
        if not occluded:
            visible.append(i)
    return np.array(visible, dtype=np.int64)


# ---------------------------------------------------------------------------
# PnP: DLT initialization + Gauss-Newton refinement
# ---------------------------------------------------------------------------


class PnPResult(NamedTuple):
    pose: RigidPose          # world -> camera
    residual: float          # mean reprojection error, pixels
    iterations: int


def pnp_solve(pts2d: np.ndarray, pts3d: np.ndarray, focal: float,
              cx: float, cy: float, max_iter: int = 100,
              initial: "RigidPose | None" = None) -> PnPResult:
    """Recover the world->camera pose from 2D-3D correspondences.

    DLT on normalized image coordinates seeds a Gauss-Newton refinement of
    the pixel reprojection error over (rotation, translation). When an
    `initial` pose is supplied (e.g. the previous video frame), refinement
    also runs from it and the lower-residual solution wins; this
    disambiguates near-planar configurations where DLT is degenerate.
    Needs at least 6 correspondences. Divergence (residual increasing for
    10 consecutive iterations) raises NonConvergenceError carrying the
    best pose seen so far.
    """
    pts2d = np.asarray(pts2d, dtype=np.float64).reshape(-1, 2)
    pts3d = np.asarray(pts3d, dtype=np.float64).reshape(-1, 3)
    n = len(pts2d)
    if n != len(pts3d):
        raise ValidationError("pnp_solve: 2D/3D point counts differ")
    if n < 6:
        raise InsufficientCorrespondencesError(
            f"pnp_solve needs at least 6 correspondences, got {n}"
        )

    candidates: list[PnPResult] = []
    failure: NonConvergenceError | None = None
    seeds = []
    if initial is not None:
        seeds.append((initial.r.copy(), initial.t.copy()))
    xn = (pts2d - np.array([cx, cy])) / focal
    seeds.append(_pnp_dlt(xn, pts3d))
    for r0, t0 in seeds:
        try:
            pose, residual, iters = _pnp_gauss_newton(
                pts2d, pts3d, focal, cx, cy, r0, t0, max_iter
            )
            candidates.append(PnPResult(pose, residual, iters))
        except NonConvergenceError as exc:
            failure = exc
    if not candidates:
        raise failure
    # keep the seed-preferred candidate unless a later one is clearly better;
    # exact ties happen on coplanar point sets (two-fold planar ambiguity)
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.residual < 0.99 * best.residual - 1e-12:
            best = cand
    return best


def _pnp_dlt(xn: np.ndarray, pts3d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(xn)
    a = np.zeros((2 * n, 12))
    X = np.concatenate([pts3d, np.ones((n, 1))], axis=1)
    a[0::2, 0:4] = X
    a[0::2, 8:12] = -xn[:, 0:1] * X
    a[1::2, 4:8] = X
    a[1::2, 8:12] = -xn[:, 1:2] * X
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    m = p[:, :3]
    if np.linalg.det(m) < 0:
        p = -p
        m = p[:, :3]
    u, s, vtm = np.linalg.svd(m)
    r = u @ vtm
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vtm
    scale = s.mean()
    t = p[:, 3] / scale
    return r, t


def _pnp_gauss_newton(pts2d, pts3d, focal, cx, cy, r, t, max_iter):
    def residuals(r, t):
        xc = pts3d @ r.T + t
        z = xc[:, 2]
        u = focal * xc[:, 0] / z + cx
        v = focal * xc[:, 1] / z + cy
        return np.stack([u - pts2d[:, 0], v - pts2d[:, 1]], axis=1).reshape(-1), xc

    res, xc = residuals(r, t)
    cost = float(res @ res)
    best = (r.copy(), t.copy(), cost)
    worse_streak = 0
    it = 0
    for it in range(1, max_iter + 1):
        z = xc[:, 2]
        inv_z = 1.0 / z
        # d(pixel)/d(camera point)
        du = np.stack([focal * inv_z, np.zeros_like(z),
                       -focal * xc[:, 0] * inv_z**2], axis=1)
        dv = np.stack([np.zeros_like(z), focal * inv_z,
                       -focal * xc[:, 1] * inv_z**2], axis=1)
        # d(camera point)/d(omega, t): left-multiplied rotation update
        # X_c(delta) = exp([w]x) (R X) + t + dt  =>  dX/dw = -[R X]x, dX/dt = I
        n = len(pts3d)
        jac = np.zeros((2 * n, 6))
        rx = xc - t  # = R @ X
        cross_jac = np.zeros((n, 3, 3))
        cross_jac[:, 0, 1] = rx[:, 2]
        cross_jac[:, 0, 2] = -rx[:, 1]
        cross_jac[:, 1, 0] = -rx[:, 2]
        cross_jac[:, 1, 2] = rx[:, 0]
        cross_jac[:, 2, 0] = rx[:, 1]
        cross_jac[:, 2, 1] = -rx[:, 0]
        jac[0::2, 0:3] = np.einsum("nk,nkj->nj", du, cross_jac)
        jac[1::2, 0:3] = np.einsum("nk,nkj->nj", dv, cross_jac)
        jac[0::2, 3:6] = du
        jac[1::2, 3:6] = dv

        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            delta = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -res, rcond=None)[0]
        r_new = so3_exp(delta[:3]) @ r
        t_new = t + delta[3:]
        res_new, xc_new = residuals(r_new, t_new)
        cost_new = float(res_new @ res_new)

        if cost_new > cost:
            worse_streak += 1
            if worse_streak >= 10:
                pose = RigidPose(best[0], best[1])
                raise NonConvergenceError(
                    "pnp_solve: residual increased for 10 consecutive iterations",
                    best=PnPResult(pose, _mean_px(best[2], len(pts3d)), it),
                )
        else:
            worse_streak = 0
            if cost_new < best[2]:
                best = (r_new.copy(), t_new.copy(), cost_new)
        r, t, res, xc, cost = r_new, t_new, res_new, xc_new, cost_new
        if np.linalg.norm(delta) < 1e-14 or cost < 1e-24:
            break

    r, t, cost = best
    return RigidPose(r, t), _mean_px(cost, len(pts3d)), it


def _mean_px(sq_cost: float, n: int) -> float:
    return float(np.sqrt(sq_cost / n))


# ---------------------------------------------------------------------------
# Point-set distances
# ---------------------------------------------------------------------------


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(|A|, |B|) Euclidean distances, computed exactly."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def d_n_closest(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Mean of the n smallest pairwise distances between sets A and B."""
    if n <= 0:
        raise ValidationError("d_n_closest: n must be positive")
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("d_n_closest: empty point set")
    total = len(a) * len(b)
    if n > total:
        raise ValidationError(f"d_n_closest: n={n} exceeds |A||B|={total}")
    d = pairwise_distances(a, b).reshape(-1)
    smallest = np.sort(d)[:n]
    return float(np.mean(smallest))


def d_n_closest_pairs(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """(n, 2) index pairs (into A, B) of the n smallest distances."""
    d = pairwise_distances(a, b)
    flat = np.argsort(d, axis=None, kind="stable")[:n]
    return np.stack(np.unravel_index(flat, d.shape), axis=1)


class ChamferResult(NamedTuple):
    value: float
    active_pairs: int  # nearest-neighbor terms below the threshold


def nearest_neighbor_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point in A, the distance to its nearest point in B.

    Uses a uniform spatial grid when the sets are large; exact either way.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) > 1000 and len(b) > 1000:
        return _grid_nn(a, b)[0]
    return pairwise_distances(a, b).min(axis=1)


def nearest_neighbor_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) > 1000 and len(b) > 1000:
        return _grid_nn(a, b)[1]
    return pairwise_distances(a, b).argmin(axis=1)


def _grid_nn(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbors via a uniform voxel grid with ring expansion."""
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    span = max(float(np.max(hi - lo)), 1e-9)
    cell = span / max(1, int(np.cbrt(len(b))))
    keys_b = np.floor((b - lo) / cell).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for j, k in enumerate(map(tuple, keys_b)):
        buckets.setdefault(k, []).append(j)
    dists = np.empty(len(a))
    idx = np.empty(len(a), dtype=np.int64)
    keys_a = np.floor((a - lo) / cell).astype(np.int64)
    for i in range(len(a)):
        ka = keys_a[i]
        best_d2 = np.inf
        best_j = -1
        ring = 0
        while True:
            candidates: list[int] = []
            for dx in range(-ring, ring + 1):
                for dy in range(-ring, ring + 1):
                    for dz in range(-ring, ring + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != ring:
                            continue
                        cell_pts = buckets.get((ka[0] + dx, ka[1] + dy, ka[2] + dz))
                        if cell_pts:
                            candidates.extend(cell_pts)
            if candidates:
                cand = np.array(candidates)
                diff = b[cand] - a[i]
                d2 = np.einsum("ij,ij->i", diff, diff)
                k = int(np.argmin(d2))
                if d2[k] < best_d2:
                    best_d2 = float(d2[k])
                    best_j = int(cand[k])
            # safe to stop once the ring lower bound exceeds the best hit
            if best_j >= 0 and (ring * cell) ** 2 > best_d2:
                break
            ring += 1
            if ring > 2 * int(np.cbrt(len(b))) + 2:
                # degenerate spread; fall back to remaining brute force
                diff = b - a[i]
                d2 = np.einsum("ij,ij->i", diff, diff)
                best_j = int(np.argmin(d2))
                best_d2 = float(d2[best_j])
                break
        diff = b[best_j] - a[i]
        dists[i] = np.sqrt(np.dot(diff, diff))
        idx[i] = best_j
    return dists, idx


def chamfer_thresholded_full(a: np.ndarray, b: np.ndarray, tau: float) -> ChamferResult:
    """Symmetric nearest-neighbor distance keeping only terms below tau.

    Averages the surviving terms from both directions; 0 with zero active
    pairs when nothing is closer than tau.
    """
    if tau <= 0:
        raise ValidationError("chamfer_thresholded: tau must be positive")
    d_ab = nearest_neighbor_dists(a, b)
    d_ba = nearest_neighbor_dists(b, a)
    terms = np.concatenate([d_ab[d_ab < tau], d_ba[d_ba < tau]])
    if terms.size == 0:
        return ChamferResult(0.0, 0)
    return ChamferResult(float(np.mean(terms)), int(terms.size))


def chamfer_thresholded(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    return chamfer_thresholded_full(a, b, tau).value


# ---------------------------------------------------------------------------
# Capsule bodies (substitute for a full body-surface mesh)
# ---------------------------------------------------------------------------


@dataclass
class CapsuleBody:
    """Per-bone capsules over a skeleton: (joint_a, joint_b, radius) triples."""

    bones: list[tuple[int, int, float]]

    def __post_init__(self):
        for a, b, r in self.bones:
            if r <= 0:
                raise ValidationError("CapsuleBody: capsule radius must be positive")

    def segments(self, joints: np.ndarray):
        """joints (22,3) -> (starts (K,3), ends (K,3), radii (K,))."""
        joints = np.asarray(joints, dtype=np.float64)
        a = np.stack([joints[i] for i, _, _ in self.bones])
        b = np.stack([joints[j] for _, j, _ in self.bones])
        r = np.array([r for _, _, r in self.bones])
        return a, b, r


def point_segment_params(points: np.ndarray, seg_a: np.ndarray,
                         seg_b: np.ndarray) -> np.ndarray:
    """(N, K) clamped projection parameters of points onto segments."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = seg_b - seg_a  # (K,3)
    len2 = np.maximum(np.einsum("kj,kj->k", d, d), 1e-18)
    ap = points[:, None, :] - seg_a[None, :, :]  # (N,K,3)
    t = np.einsum("nkj,kj->nk", ap, d) / len2
    return np.clip(t, 0.0, 1.0)


def capsule_sdf(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray,
                radii: np.ndarray) -> np.ndarray:
    """Signed distance of each point to the capsule union (negative inside)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = point_segment_params(points, seg_a, seg_b)
    proj = seg_a[None, :, :] + t[:, :, None] * (seg_b - seg_a)[None, :, :]
    diff = points[:, None, :] - proj
    dist = np.sqrt(np.einsum("nkj,nkj->nk", diff, diff))
    return (dist - radii[None, :]).min(axis=1)


def capsule_penetration(body: CapsuleBody, joints: np.ndarray,
                        query_points: np.ndarray) -> float:
    """Sum over query points of max(0, -sdf)^2 against the posed capsules."""
    a, b, r = body.segments(joints)
    sdf = capsule_sdf(query_points, a, b, r)
    pen = np.maximum(-sdf, 0.0)
    return float(np.sum(pen * pen))
