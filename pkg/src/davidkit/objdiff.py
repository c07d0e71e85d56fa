"""Conditional score-based object-pose diffusion with Temporal Guidance Sampling.

A small MLP score network models the conditional distribution of the 9-D
object pose (6D rotation + translation) given the 63-D body pose. Training
is denoising score matching under a variance-exploding geometric sigma
schedule; sampling integrates the probability-flow ODE from t=1 down to
t~0 with adaptive RK45, optionally adding smoothness and thresholded-
Chamfer contact guidance over the whole frame sequence (frames become
coupled through the guidance term).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .dkt import params_hash
from .errors import NumericalError, ValidationError
from .geometry import rot6d_batch_to_matrices
from .optim import AdamState, adam_step
from .rng import Rng
from .uplift import PosePairDataset


# ---------------------------------------------------------------------------
# Sigma schedule
# ---------------------------------------------------------------------------


@dataclass
class SigmaSchedule:
    """Geometric noise schedule sigma(t) = sigma_min * (sigma_max/sigma_min)^t."""

    sigma_min: float = 0.1
    sigma_max: float = 50.0
    eps_t: float = 1e-5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValidationError("SigmaSchedule requires 0 < sigma_min < sigma_max")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValidationError("sigma(t) requires t in [0, 1]")
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def sigma_dsigma(self, t):
        """sigma(t) * d sigma/dt = sigma(t)^2 * ln(sigma_max/sigma_min)."""
        s = self.sigma(t)
        return s * s * np.log(self.sigma_max / self.sigma_min)


# ---------------------------------------------------------------------------
# Score network
# ---------------------------------------------------------------------------


@dataclass
class ScoreNetConfig:
    pose_dim: int = 9
    cond_dim: int = 63
    pose_hidden: int = 128
    t_hidden: int = 128
    cond_hidden: int = 256
    trunk_hidden: int = 256


class ScoreNet:
    """MLP encoders for pose/time/condition, a concat trunk, and three heads
    emitting the score for the two rotation columns and the translation.

    Outputs are divided by sigma(t) so the network regresses a unit-scale
    target across noise levels.
    """

    def __init__(self, cfg: ScoreNetConfig, params: dict[str, np.ndarray],
                 sched: SigmaSchedule):
        self.cfg = cfg
        self.params = params
        self.sched = sched
        self._t_freqs = np.exp(
            np.linspace(np.log(0.5), np.log(1000.0), cfg.t_hidden // 2)
        ).astype(np.float32)

    @classmethod
    def init(cls, cfg: ScoreNetConfig, sched: SigmaSchedule, rng: Rng) -> "ScoreNet":
        p: dict[str, np.ndarray] = {}

        def w(name, nin, nout):
            p[name] = rng.normal(0.0, nin ** -0.5, (nin, nout), dtype=np.float32)
            p[name + "_b"] = np.zeros(nout, dtype=np.float32)

        w("pe1", cfg.pose_dim, cfg.pose_hidden)
        w("pe2", cfg.pose_hidden, cfg.pose_hidden)
        w("te1", cfg.t_hidden, cfg.t_hidden)
        w("ce1", cfg.cond_dim, cfg.cond_hidden)
        w("ce2", cfg.cond_hidden, cfg.cond_hidden)
        total = cfg.pose_hidden + cfg.t_hidden + cfg.cond_hidden
        w("tr1", total, cfg.trunk_hidden)
        w("tr2", cfg.trunk_hidden, cfg.trunk_hidden)
        w("head_rx", cfg.trunk_hidden, 3)
        w("head_ry", cfg.trunk_hidden, 3)
        w("head_t", cfg.trunk_hidden, 3)
        return cls(cfg, p, sched)

    def weight_hash(self) -> str:
        return params_hash(self.params)

    def t_features(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float32).reshape(-1, 1)
        ang = t * self._t_freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward(self, p: np.ndarray, t: np.ndarray, theta: np.ndarray,
                param_tensors: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        """Score of the perturbed conditional pose distribution, (N, 9)."""
        pt = param_tensors or {k: ad.constant(v) for k, v in self.params.items()}
        p = np.asarray(p).reshape(-1, self.cfg.pose_dim)
        theta = np.asarray(theta).reshape(-1, self.cfg.cond_dim)
        t = np.asarray(t, dtype=np.float64).reshape(-1)

        def mlp2(x, w1, w2):
            h = ad.silu(ad.linear(x, pt[w1], pt[w1 + "_b"]))
            return ad.silu(ad.linear(h, pt[w2], pt[w2 + "_b"]))

        pe = mlp2(ad.constant(p), "pe1", "pe2")
        te = ad.silu(ad.linear(ad.constant(self.t_features(t)), pt["te1"],
                               pt["te1_b"]))
        ce = mlp2(ad.constant(theta), "ce1", "ce2")
        h = ad.concat([pe, te, ce], axis=1)
        h = mlp2(h, "tr1", "tr2")
        rx = ad.linear(h, pt["head_rx"], pt["head_rx_b"])
        ry = ad.linear(h, pt["head_ry"], pt["head_ry_b"])
        tr = ad.linear(h, pt["head_t"], pt["head_t_b"])
        out = ad.concat([rx, ry, tr], axis=1)
        inv_sigma = (1.0 / self.sched.sigma(t)).astype(np.float32)[:, None]
        return ad.mul(out, ad.constant(inv_sigma))

    def score(self, p, t, theta) -> np.ndarray:
        return self.forward(p, t, theta).data.astype(np.float64)


# ---------------------------------------------------------------------------
# DSM training
# ---------------------------------------------------------------------------


def dsm_loss(net: ScoreNet, p0: np.ndarray, theta: np.ndarray, t: np.ndarray,
             z: np.ndarray,
             param_tensors: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Denoising score-matching loss with lambda(t) = sigma(t)^2 weighting.

    p_t = p0 + sigma(t) z; the target is (p0 - p_t)/sigma^2 = -z/sigma, and
    the sigma^2 weight makes each term a unit-scale regression.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < net.sched.eps_t) or np.any(t > 1):
        raise ValidationError("dsm_loss requires t in [eps_t, 1]")
    sigma = net.sched.sigma(t)
    p0 = np.asarray(p0, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    p_t = p0 + sigma[:, None].astype(np.float32) * z
    target = (-z / sigma[:, None]).astype(np.float32)
    psi = net.forward(p_t, t, theta, param_tensors)
    diff = ad.sub(psi, ad.constant(target))
    per_sample = ad.sum_(ad.mul(diff, diff), axis=1)
    weighted = ad.mul(per_sample, ad.constant(
        (sigma * sigma).astype(np.float32)))
    return ad.mean(weighted)


def train_score(pairs: PosePairDataset, sched: SigmaSchedule | None = None,
                steps: int = 2000, lr: float = 5e-3, decay: float = 1.0,
                batch_size: int = 128, seed: int = 0,
                cfg: ScoreNetConfig | None = None,
                log_every: int = 50) -> tuple[ScoreNet, np.ndarray]:
    """Adam-train the score net on normalized (theta, pose) pairs."""
    n = len(pairs.pose9)
    if n == 0:
        raise ValidationError("train_score: empty dataset")
    sched = sched or SigmaSchedule()
    cfg = cfg or ScoreNetConfig()
    rng = Rng(seed)
    net = ScoreNet.init(cfg, sched, rng.split("init"))
    state = AdamState(lr=lr, decay=decay)
    curve = []
    for step in range(steps):
        srng = rng.split(step)
        idx = srng.integers(0, n, size=min(batch_size, n))
        p0 = pairs.pose9[idx]
        theta = pairs.theta[idx]
        t = srng.uniform(sched.eps_t, 1.0, size=len(idx))
        z = srng.normal(0.0, 1.0, p0.shape, dtype=np.float32)
        tape = {k: ad.parameter(v, k) for k, v in net.params.items()}
        loss = dsm_loss(net, p0, theta, t, z, tape)
        grads = ad.grad_dict(loss, tape)
        adam_step(state, net.params, grads)
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, float(loss.data)))
    return net, np.array(curve)


# ---------------------------------------------------------------------------
# Temporal Guidance Sampling
# ---------------------------------------------------------------------------


@dataclass
class TGSConfig:
    lambda_s: float = 1.0       # smoothness weight
    lambda_c: float = 0.1       # contact weight
    rho: float = 0.02           # contact threshold, meters
    rtol: float = 1e-3
    atol: float = 1e-3
    guide_t_lo: float = 0.0     # guidance active for guide_t_lo <= t < guide_t_hi
    guide_t_hi: float = 0.5

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_c < 0:
            raise ValidationError("TGS weights must be non-negative")
        if self.rho < 0:
            raise ValidationError("TGS contact threshold must be non-negative")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValidationError("RK45 tolerances must be positive")


def _posed_vertices(p_t: ad.Tensor, verts: np.ndarray, n_seq: int,
                    n_frames: int) -> ad.Tensor:
    """Differentiable object vertices for pose tensors (S*F, 9) -> (S*F, V, 3).

    Gram-Schmidt is expressed with table ops so gradients flow to the 6D
    rotation and translation components.
    """
    total = n_seq * n_frames
    rx = ad.slice_(p_t, (slice(None), slice(0, 3)))
    ry = ad.slice_(p_t, (slice(None), slice(3, 6)))
    tr = ad.slice_(p_t, (slice(None), slice(6, 9)))
    eps = ad.constant(np.float32(1e-12))

    def normalize(v):
        n2 = ad.add(ad.sum_(ad.mul(v, v), axis=1, keepdims=True), eps)
        return ad.div(v, ad.sqrt(n2))

    b1 = normalize(rx)
    proj = ad.sum_(ad.mul(ry, b1), axis=1, keepdims=True)
    b2 = normalize(ad.sub(ry, ad.mul(proj, b1)))

    def cross(a, b):
        ax = ad.slice_(a, (slice(None), slice(0, 1)))
        ay = ad.slice_(a, (slice(None), slice(1, 2)))
        az = ad.slice_(a, (slice(None), slice(2, 3)))
        bx = ad.slice_(b, (slice(None), slice(0, 1)))
        by = ad.slice_(b, (slice(None), slice(1, 2)))
        bz = ad.slice_(b, (slice(None), slice(2, 3)))
        cx = ad.sub(ad.mul(ay, bz), ad.mul(az, by))
        cy = ad.sub(ad.mul(az, bx), ad.mul(ax, bz))
        cz = ad.sub(ad.mul(ax, by), ad.mul(ay, bx))
        return ad.concat([cx, cy, cz], axis=1)

    b3 = cross(b1, b2)
    # rotation matrix rows stacked: columns [b1 b2 b3] => R[i,j]: row-major
    r = ad.concat([
        ad.reshape(b1, (total, 3, 1)),
        ad.reshape(b2, (total, 3, 1)),
        ad.reshape(b3, (total, 3, 1)),
    ], axis=2)  # (N, 3, 3) with columns b1,b2,b3
    vt = ad.constant(np.asarray(verts, dtype=np.float32))  # (V, 3)
    posed = ad.matmul(ad.broadcast_to(ad.reshape(vt, (1, len(verts), 3)),
                                      (total, len(verts), 3)),
                      ad.transpose(r, (0, 2, 1)))
    return ad.add(posed, ad.reshape(tr, (total, 1, 3)))


class TGSValue(NamedTuple):
    value: float
    smooth: float
    contact: float
    grad: np.ndarray  # same shape as the pose input


def tgs_loss(p_seq: np.ndarray, body_points: np.ndarray, verts: np.ndarray,
             cfg: TGSConfig) -> TGSValue:
    """Guidance loss and gradient for pose sequences.

    p_seq: (F, 9) or (S, F, 9); body_points: matching (F, Nh, 3) or
    (S, F, Nh, 3) human surface points per frame; verts: (V, 3) object
    vertices in the object frame. The smoothness term sums squared
    frame-to-frame pose differences per sequence; the contact term is the
    per-frame thresholded symmetric Chamfer distance, summed over frames.
    """
    p_arr = np.asarray(p_seq, dtype=np.float64)
    single = p_arr.ndim == 2
    if single:
        p_arr = p_arr[None]
        body_points = np.asarray(body_points)[None]
    s_count, f_count = p_arr.shape[:2]
    if f_count < 2:
        raise ValidationError("tgs_loss requires at least two frames")
    body_points = np.asarray(body_points, dtype=np.float64)

    p_t = ad.parameter(p_arr.reshape(s_count * f_count, 9).astype(np.float64),
                       "p_seq")

    # smoothness: ||p[1:] - p[:-1]||^2 within each sequence
    p3 = ad.reshape(p_t, (s_count, f_count, 9))
    d = ad.sub(ad.slice_(p3, (slice(None), slice(1, None), slice(None))),
               ad.slice_(p3, (slice(None), slice(0, f_count - 1), slice(None))))
    smooth = ad.sum_(ad.mul(d, d))

    # contact: active nearest-neighbor pairs at current poses
    rot = rot6d_batch_to_matrices(p_arr.reshape(-1, 9))
    trans = p_arr.reshape(-1, 9)[:, 6:9]
    posed_now = np.einsum("vj,nij->nvi", verts, rot) + trans[:, None, :]

    flat_obj_idx: list[int] = []
    h_points: list[np.ndarray] = []
    weights: list[float] = []
    active_total = 0
    for n in range(s_count * f_count):
        h = body_points.reshape(s_count * f_count, *body_points.shape[2:])[n]
        o = posed_now[n]
        diff = h[:, None, :] - o[None, :, :]
        dist = np.sqrt(np.einsum("hvj,hvj->hv", diff, diff))
        nn_ho = dist.argmin(axis=1)
        d_ho = dist[np.arange(len(h)), nn_ho]
        nn_oh = dist.argmin(axis=0)
        d_oh = dist[nn_oh, np.arange(len(o))]
        act_h = np.nonzero(d_ho < cfg.rho)[0]
        act_o = np.nonzero(d_oh < cfg.rho)[0]
        n_terms = len(act_h) + len(act_o)
        if n_terms == 0:
            continue
        active_total += n_terms
        for hi in act_h:
            flat_obj_idx.append(n * len(o) + nn_ho[hi])
            h_points.append(h[hi])
            weights.append((n, n_terms))
        for oi in act_o:
            flat_obj_idx.append(n * len(o) + oi)
            h_points.append(h[nn_oh[oi]])
            weights.append((n, n_terms))

    if flat_obj_idx and cfg.lambda_c > 0:
        posed = _posed_vertices(p_t, verts, s_count, f_count)
        posed_flat = ad.reshape(posed, (s_count * f_count * len(verts), 3))
        gathered = ad.slice_(posed_flat, (np.array(flat_obj_idx),))
        hp = ad.constant(np.array(h_points))
        dv = ad.sub(gathered, hp)
        d2 = ad.add(ad.sum_(ad.mul(dv, dv), axis=1), ad.constant(1e-16))
        dists = ad.sqrt(d2)
        w = ad.constant(np.array([1.0 / nt for _, nt in weights]))
        contact = ad.sum_(ad.mul(dists, w))
    else:
        contact = ad.constant(np.zeros(()))

    total = ad.add(ad.mul(ad.constant(float(cfg.lambda_s)), smooth),
                   ad.mul(ad.constant(float(cfg.lambda_c)), contact))
    grads = ad.grad_dict(total, {"p_seq": p_t})
    grad = grads["p_seq"].reshape(p_arr.shape)
    if single:
        grad = grad[0]
    return TGSValue(float(total.data), float(smooth.data), float(contact.data),
                    grad)


# ---------------------------------------------------------------------------
# RK45 (Dormand-Prince 4(5)) adaptive integrator
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])


class RK45Result(NamedTuple):
    y: np.ndarray
    t: float
    n_accepted: int
    n_rejected: int


def solve_rk45(f: Callable[[float, np.ndarray], np.ndarray], y0: np.ndarray,
               t0: float, t1: float, rtol: float = 1e-3, atol: float = 1e-6,
               max_steps: int = 100_000, min_step: float = 1e-12) -> RK45Result:
    """Adaptive Dormand-Prince 4(5) from t0 to t1 (either direction)."""
    if rtol <= 0 or atol <= 0:
        raise ValidationError("solve_rk45 requires positive tolerances")
    y = np.asarray(y0, dtype=np.float64).copy()
    t = float(t0)
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    h = direction * span / 100.0
    accepted = rejected = 0
    for _ in range(max_steps):
        if (t - t1) * direction >= 0:
            return RK45Result(y, t, accepted, rejected)
        if abs(h) > abs(t1 - t):
            h = t1 - t
        k = [np.zeros_like(y) for _ in range(7)]
        k[0] = f(t, y)
        for i in range(1, 7):
            yi = y + h * sum(a * k[j] for j, a in enumerate(_DP_A[i]))
            k[i] = f(t + _DP_C[i] * h, yi)
        y5 = y + h * sum(b * k[i] for i, b in enumerate(_DP_B5) if b != 0.0)
        y4 = y + h * sum(b * k[i] for i, b in enumerate(_DP_B4) if b != 0.0)
        err = y5 - y4
        if not np.all(np.isfinite(y5)):
            raise NumericalError("solve_rk45: non-finite state")
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            t = t1 if abs(t + h - t1) < 1e-15 else t + h
            y = y5
            accepted += 1
            factor = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
            h *= max(0.2, factor)
        else:
            rejected += 1
            h *= max(0.2, 0.9 * err_norm ** -0.2)
        if abs(h) < min_step:
            raise NumericalError(
                f"solve_rk45: step underflow at t={t:.6g}",
            )
    raise NumericalError("solve_rk45: max step count exceeded")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_object_motion(net: ScoreNet, theta_seq: np.ndarray,
                         body_points: np.ndarray, verts: np.ndarray,
                         cfg: TGSConfig, seed: int = 0) -> np.ndarray:
    """Sample a pose sequence p^(1:F) coupled by temporal guidance.

    theta_seq: (F, 21, 3) normalized body poses; body_points: (F, Nh, 3)
    normalized body surface points; verts: (V, 3) object vertices. The
    probability-flow ODE dp/dt = -sigma sigma' Psi + grad L_TGS runs from
    t=1 to eps_t; with the downward integration the added gradient term
    decreases L_TGS along the trajectory.
    """
    out = sample_object_motion_batch(net, theta_seq[None], body_points[None],
                                     verts, cfg, seed)
    return out[0]


def sample_object_motion_batch(net: ScoreNet, theta_seq: np.ndarray,
                               body_points: np.ndarray, verts: np.ndarray,
                               cfg: TGSConfig, seed: int = 0) -> np.ndarray:
    """Batched variant over (S, F, ...) sequences; one joint ODE solve."""
    theta_seq = np.asarray(theta_seq, dtype=np.float64)
    s_count, f_count = theta_seq.shape[:2]
    theta_flat = theta_seq.reshape(s_count * f_count, -1)
    sched = net.sched
    rng = Rng(seed).split("objdiff-sample")
    y0 = rng.normal(0.0, sched.sigma(1.0), (s_count, f_count, 9)).reshape(-1)
    guided = cfg.lambda_s > 0 or cfg.lambda_c > 0

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        p = y.reshape(s_count * f_count, 9)
        score = net.score(p, np.full(len(p), t), theta_flat)
        drift = -sched.sigma_dsigma(t) * score
        if guided and cfg.guide_t_lo <= t < cfg.guide_t_hi:
            tgs = tgs_loss(p.reshape(s_count, f_count, 9), body_points, verts, cfg)
            drift = drift + tgs.grad.reshape(-1, 9)
        return drift.reshape(-1)

    result = solve_rk45(rhs, y0, 1.0, sched.eps_t, cfg.rtol, cfg.atol)
    return result.y.reshape(s_count, f_count, 9)


def sample_object_scale(scale_range: tuple[float, float], rng: Rng) -> float:
    lo, hi = scale_range
    if lo > hi:
        raise ValidationError("sample_object_scale: min > max")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))
