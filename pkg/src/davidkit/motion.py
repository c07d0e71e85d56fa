"""Text(tag)-conditioned motion diffusion transformer with LoRA adapters.

A small transformer encoder denoises 70-dim per-frame motion features with
x0-prediction under a cosine DDPM schedule. Conditioning is one token:
sinusoidal timestep embedding plus the mean of learned tag embeddings
(vocabulary built from dataset categories; index 0 is the null tag used
for classifier-free dropout).

LoRA adapters add trainable down/up projection pairs (A then B, no
nonlinearity) on every attention q/k/v/out projection; B starts at zero so
an untrained adapter is an exact no-op, and merging is a weighted sum of
A@B deltas folded into the base weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dkt import params_hash
from .errors import ValidationError
from .optim import AdamState, adam_step
from .rng import Rng
from .uplift import MotionDataset, features_to_joints

NULL_TAG = "<null>"


@dataclass
class DenoiserConfig:
    feat_dim: int = 70
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 196
    vocab: tuple[str, ...] = (NULL_TAG,)
    timesteps: int = 1000
    cond_dropout: float = 0.1
    guidance: float = 2.5

    def __post_init__(self):
        if self.vocab[0] != NULL_TAG:
            raise ValidationError("vocab must start with the null tag")
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must divide evenly into heads")


@dataclass
class DiffusionSchedule:
    """Cosine alpha-bar schedule for T discrete steps."""

    timesteps: int = 1000
    alphas_bar: np.ndarray = field(init=False)
    betas: np.ndarray = field(init=False)

    def __post_init__(self):
        t = np.arange(self.timesteps + 1, dtype=np.float64)
        s = 0.008
        f = np.cos((t / self.timesteps + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 0.0, 0.999)
        alphas = 1 - betas
        self.alphas_bar = np.cumprod(alphas)
        self.betas = betas
        if not np.all(np.diff(self.alphas_bar) < 0):
            raise ValidationError("alpha-bar schedule must be strictly decreasing")


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((n, dim), dtype=np.float32)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class MotionDenoiser:
    """x0-prediction transformer denoiser over motion feature sequences."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, np.ndarray],
                 feature_mean: np.ndarray, feature_std: np.ndarray):
        self.cfg = cfg
        self.params = params
        self.feature_mean = np.asarray(feature_mean, dtype=np.float32)
        self.feature_std = np.asarray(feature_std, dtype=np.float32)
        self._pos = sinusoidal_table(cfg.max_len + 1, cfg.d_model)
        self._tsin = sinusoidal_table(cfg.timesteps, cfg.d_model)

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, cfg: DenoiserConfig, feature_mean, feature_std,
             rng: Rng) -> "MotionDenoiser":
        d, ff, v = cfg.d_model, cfg.d_ff, len(cfg.vocab)
        p: dict[str, np.ndarray] = {}

        def w(name, shape, scale):
            p[name] = rng.normal(0.0, scale, shape, dtype=np.float32)

        def b(name, n):
            p[name] = np.zeros(n, dtype=np.float32)

        w("tok_w", (cfg.feat_dim, d), cfg.feat_dim ** -0.5)
        b("tok_b", d)
        w("t1_w", (d, d), d ** -0.5)
        b("t1_b", d)
        w("t2_w", (d, d), d ** -0.5)
        b("t2_b", d)
        w("tag_table", (v, d), 0.02)
        for i in range(cfg.n_layers):
            for proj in ("q", "k", "v", "o"):
                w(f"l{i}.{proj}_w", (d, d), d ** -0.5)
                b(f"l{i}.{proj}_b", d)
            p[f"l{i}.ln1_g"] = np.ones(d, dtype=np.float32)
            b(f"l{i}.ln1_b", d)
            p[f"l{i}.ln2_g"] = np.ones(d, dtype=np.float32)
            b(f"l{i}.ln2_b", d)
            w(f"l{i}.ff1_w", (d, ff), d ** -0.5)
            b(f"l{i}.ff1_b", ff)
            w(f"l{i}.ff2_w", (ff, d), ff ** -0.5)
            b(f"l{i}.ff2_b", d)
        p["lnf_g"] = np.ones(d, dtype=np.float32)
        b("lnf_b", d)
        w("out_w", (d, cfg.feat_dim), d ** -0.5)
        b("out_b", cfg.feat_dim)
        return cls(cfg, p, feature_mean, feature_std)

    def clone(self) -> "MotionDenoiser":
        return MotionDenoiser(self.cfg, {k: v.copy() for k, v in self.params.items()},
                              self.feature_mean.copy(), self.feature_std.copy())

    def weight_hash(self) -> str:
        return params_hash(self.params)

    # -- tags ----------------------------------------------------------------

    def tag_ids(self, tags: tuple[str, ...] | list[str]) -> list[int]:
        ids = []
        for tag in tags:
            if tag not in self.cfg.vocab:
                raise ValidationError(
                    f"unknown tag {tag!r}; known tags: {', '.join(self.cfg.vocab)}"
                )
            ids.append(self.cfg.vocab.index(tag))
        return ids or [0]

    # -- forward -------------------------------------------------------------

    def forward(self, x: np.ndarray, t_idx: np.ndarray,
                cond_ids: list[list[int]],
                param_tensors: dict[str, ad.Tensor] | None = None,
                adapters: list[tuple["LoRAAdapter", float,
                                     dict[str, ad.Tensor] | None]] | None = None
                ) -> ad.Tensor:
        """Denoise a batch: x (B, F, feat) normalized features at step t.

        `param_tensors` substitutes tape-connected parameters for training;
        `adapters` applies LoRA deltas on the attention projections, each
        entry (adapter, weight, optional tape tensors for its matrices).
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float32)
        bsz, f_len, _ = x.shape
        if f_len > cfg.max_len:
            raise ValidationError(f"sequence length {f_len} exceeds max {cfg.max_len}")
        pt = param_tensors or {k: ad.constant(v) for k, v in self.params.items()}

        def lora(name: str, h: ad.Tensor, base: ad.Tensor) -> ad.Tensor:
            out = base
            if adapters:
                for adapter, weight, tensors in adapters:
                    if weight == 0.0:
                        continue
                    a_t, b_t = adapter.tensors(name, tensors)
                    delta = ad.matmul(ad.matmul(h, a_t), b_t)
                    out = ad.add(out, ad.mul(ad.constant(
                        np.float32(weight * adapter.alpha / adapter.rank)), delta))
            return out

        t_emb = ad.constant(self._tsin[np.asarray(t_idx, dtype=int)])  # (B, d)
        t_h = ad.silu(ad.linear(t_emb, pt["t1_w"], pt["t1_b"]))
        t_h = ad.linear(t_h, pt["t2_w"], pt["t2_b"])

        flat_ids = []
        weights = np.zeros((bsz, sum(len(c) for c in cond_ids)), dtype=np.float32)
        col = 0
        for bi, ids in enumerate(cond_ids):
            for j in ids:
                flat_ids.append(j)
                weights[bi, col] = 1.0 / len(ids)
                col += 1
        tag_rows = ad.embedding(pt["tag_table"], np.array(flat_ids, dtype=int))
        cond = ad.matmul(ad.constant(weights), tag_rows)  # (B, d)

        cond_tok = ad.add(t_h, cond)
        cond_tok = ad.add(cond_tok, ad.constant(self._pos[0]))
        cond_tok = ad.reshape(cond_tok, (bsz, 1, cfg.d_model))

        frames = ad.linear(ad.constant(x), pt["tok_w"], pt["tok_b"])
        frames = ad.add(frames, ad.constant(self._pos[1:f_len + 1]))
        h = ad.concat([cond_tok, frames], axis=1)  # (B, L, d)
        l_len = f_len + 1

        dh = cfg.d_model // cfg.n_heads
        scale = np.float32(1.0 / np.sqrt(dh))
        for i in range(cfg.n_layers):
            hn = ad.layer_norm(h, pt[f"l{i}.ln1_g"], pt[f"l{i}.ln1_b"])
            q = lora(f"l{i}.q", hn, ad.linear(hn, pt[f"l{i}.q_w"], pt[f"l{i}.q_b"]))
            k = lora(f"l{i}.k", hn, ad.linear(hn, pt[f"l{i}.k_w"], pt[f"l{i}.k_b"]))
            v = lora(f"l{i}.v", hn, ad.linear(hn, pt[f"l{i}.v_w"], pt[f"l{i}.v_b"]))

            def heads(z):
                z = ad.reshape(z, (bsz, l_len, cfg.n_heads, dh))
                return ad.transpose(z, (0, 2, 1, 3))

            qh, kh, vh = heads(q), heads(k), heads(v)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), scale)
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, vh)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)),
                             (bsz, l_len, cfg.d_model))
            proj = lora(f"l{i}.o", ctx,
                        ad.linear(ctx, pt[f"l{i}.o_w"], pt[f"l{i}.o_b"]))
            h = ad.add(h, proj)

            hn2 = ad.layer_norm(h, pt[f"l{i}.ln2_g"], pt[f"l{i}.ln2_b"])
            ff = ad.silu(ad.linear(hn2, pt[f"l{i}.ff1_w"], pt[f"l{i}.ff1_b"]))
            ff = ad.linear(ff, pt[f"l{i}.ff2_w"], pt[f"l{i}.ff2_b"])
            h = ad.add(h, ff)

        h = ad.layer_norm(h, pt["lnf_g"], pt["lnf_b"])
        frames_out = ad.slice_(h, (slice(None), slice(1, None), slice(None)))
        return ad.linear(frames_out, pt["out_w"], pt["out_b"])

    def predict_x0(self, x, t_idx, cond_ids, adapters=None) -> np.ndarray:
        return self.forward(x, t_idx, cond_ids, adapters=adapters).data


@dataclass
class LoRAAdapter:
    """Low-rank deltas for attention projections: per (layer, proj) a pair
    (A: d_model x r, B: r x d_model). B is zero at init."""

    rank: int
    alpha: float
    mats: dict[str, np.ndarray]
    base_hash: str

    @classmethod
    def init(cls, base: MotionDenoiser, rank: int = 8, alpha: float = 16.0,
             rng: Rng | None = None) -> "LoRAAdapter":
        rng = rng or Rng(0)
        d = base.cfg.d_model
        mats = {}
        for i in range(base.cfg.n_layers):
            for proj in ("q", "k", "v", "o"):
                mats[f"l{i}.{proj}.A"] = rng.normal(
                    0.0, 1.0 / rank, (d, rank), dtype=np.float32)
                mats[f"l{i}.{proj}.B"] = np.zeros((rank, d), dtype=np.float32)
        return cls(rank, alpha, mats, base.weight_hash())

    def tensors(self, name: str,
                tape: dict[str, ad.Tensor] | None) -> tuple[ad.Tensor, ad.Tensor]:
        if tape is not None:
            return tape[f"{name}.A"], tape[f"{name}.B"]
        return ad.constant(self.mats[f"{name}.A"]), ad.constant(self.mats[f"{name}.B"])

    def params(self) -> dict[str, np.ndarray]:
        return self.mats


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch(dataset: MotionDataset, model: MotionDenoiser, idx: np.ndarray):
    feats = np.stack([
        dataset.normalized(dataset.clips[i].features) for i in idx
    ])
    ids = [model.tag_ids(dataset.clips[i].tags) for i in idx]
    return feats.astype(np.float32), ids


def _diffuse(x0: np.ndarray, t_idx: np.ndarray, sched: DiffusionSchedule,
             noise: np.ndarray) -> np.ndarray:
    ab = sched.alphas_bar[t_idx].astype(np.float32)[:, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise


def train_base(dataset: MotionDataset, cfg: DenoiserConfig | None = None,
               sched: DiffusionSchedule | None = None, steps: int = 2000,
               lr: float = 3e-4, batch_size: int = 8, seed: int = 0,
               log_every: int = 50) -> tuple[MotionDenoiser, np.ndarray]:
    """Train the base denoiser on (normalized) motion features.

    Returns the model and the logged loss curve (step, loss) rows.
    """
    if not dataset.clips:
        raise ValidationError("train_base: empty dataset")
    _check_equal_lengths(dataset)
    vocab = build_vocab(dataset)
    cfg = cfg or DenoiserConfig()
    if cfg.vocab == (NULL_TAG,):
        cfg = _with_vocab(cfg, vocab)
    sched = sched or DiffusionSchedule(cfg.timesteps)
    rng = Rng(seed)
    model = MotionDenoiser.init(cfg, dataset.mean, dataset.std, rng.split("init"))
    curve = _train_loop(model, None, dataset, sched, steps, lr, batch_size,
                        rng.split("train"), cfg.cond_dropout, log_every)
    return model, curve


def train_lora(base: MotionDenoiser, dataset: MotionDataset, rank: int = 8,
               alpha: float = 16.0, steps: int = 500, lr: float = 1e-4,
               batch_size: int = 8, seed: int = 0,
               log_every: int = 50) -> tuple[LoRAAdapter, np.ndarray]:
    """Train a LoRA adapter on HOI clips with the base frozen.

    The base weights are hash-checked before and after; any change is an
    integrity error.
    """
    if not dataset.clips:
        raise ValidationError("train_lora: empty dataset")
    _check_equal_lengths(dataset)
    rng = Rng(seed)
    adapter = LoRAAdapter.init(base, rank, alpha, rng.split("lora-init"))
    hash_before = base.weight_hash()
    curve = _train_loop(base, adapter, dataset, None, steps, lr, batch_size,
                        rng.split("train"), base.cfg.cond_dropout, log_every)
    if base.weight_hash() != hash_before:
        raise ValidationError("train_lora: base weights changed during adaptation")
    return adapter, curve


def _train_loop(model: MotionDenoiser, adapter: LoRAAdapter | None,
                dataset: MotionDataset, sched: DiffusionSchedule | None,
                steps: int, lr: float, batch_size: int, rng: Rng,
                cond_dropout: float, log_every: int) -> np.ndarray:
    sched = sched or DiffusionSchedule(model.cfg.timesteps)
    trainable = adapter.params() if adapter is not None else model.params
    state = AdamState(lr=lr)
    curve = []
    n = len(dataset.clips)
    for step in range(steps):
        srng = rng.split(step)
        idx = srng.integers(0, n, size=min(batch_size, n))
        x0, cond_ids = _batch(dataset, model, idx)
        t_idx = srng.integers(0, sched.timesteps, size=len(idx))
        noise = srng.normal(0.0, 1.0, x0.shape, dtype=np.float32)
        drop = srng.uniform(0.0, 1.0, len(idx))
        cond_ids = [([0] if d < cond_dropout else ids)
                    for ids, d in zip(cond_ids, drop)]
        x_t = _diffuse(x0, t_idx, sched, noise)

        tape = {k: ad.parameter(v, k) for k, v in trainable.items()}
        if adapter is None:
            pred = model.forward(x_t, t_idx, cond_ids, param_tensors=tape)
        else:
            pred = model.forward(x_t, t_idx, cond_ids,
                                 adapters=[(adapter, 1.0, tape)])
        loss = ad.squared_error(pred, ad.constant(x0))
        grads = ad.grad_dict(loss, tape)
        adam_step(state, trainable, grads)
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, float(loss.data)))
    return np.array(curve)


def _check_equal_lengths(dataset: MotionDataset) -> None:
    lengths = {len(c.features) for c in dataset.clips}
    if len(lengths) > 1:
        raise ValidationError(
            f"clips must share one length at desk scale, got {sorted(lengths)}"
        )


def build_vocab(dataset: MotionDataset) -> tuple[str, ...]:
    tags = sorted({t for c in dataset.clips for t in c.tags})
    return (NULL_TAG, *tags)


def _with_vocab(cfg: DenoiserConfig, vocab: tuple[str, ...]) -> DenoiserConfig:
    return DenoiserConfig(cfg.feat_dim, cfg.d_model, cfg.n_layers, cfg.n_heads,
                          cfg.d_ff, cfg.max_len, vocab, cfg.timesteps,
                          cfg.cond_dropout, cfg.guidance)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def merge_loras(base: MotionDenoiser,
                adapters: list[tuple[LoRAAdapter, float]]) -> MotionDenoiser:
    """Materialize W' = W + sum_k w_k (alpha_k/r_k) A_k B_k into a new model."""
    merged = base.clone()
    for adapter, weight in adapters:
        for i in range(base.cfg.n_layers):
            for proj in ("q", "k", "v", "o"):
                a = adapter.mats[f"l{i}.{proj}.A"]
                b = adapter.mats[f"l{i}.{proj}.B"]
                key = f"l{i}.{proj}_w"
                if a.shape[0] != merged.params[key].shape[0]:
                    raise ValidationError("merge_loras: adapter shape mismatch")
                delta = (weight * adapter.alpha / adapter.rank) * (a @ b)
                merged.params[key] = merged.params[key] + delta.astype(np.float32)
    return merged


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_motion(model: MotionDenoiser, tags: list[str], frames: int,
                  guidance: float | None = None, seed: int = 0,
                  sched: DiffusionSchedule | None = None,
                  adapters: list[tuple[LoRAAdapter, float]] | None = None,
                  num_steps: int | None = None,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """DDPM ancestral sampling with x0-parameterization and CFG.

    `num_steps` strides the trained schedule (standard respacing); the
    default walks all T steps. Returns (joints (F,22,3), de-normalized
    features (F,70)).
    """
    cfg = model.cfg
    if frames > cfg.max_len:
        raise ValidationError(f"requested {frames} frames > max {cfg.max_len}")
    sched = sched or DiffusionSchedule(cfg.timesteps)
    if guidance is None:
        guidance = cfg.guidance
    rng = Rng(seed).split("sample")
    cond = [model.tag_ids(tags)]
    null = [[0]]
    ad_args = [(a, w, None) for a, w in adapters] if adapters else None

    if num_steps is None or num_steps >= sched.timesteps:
        t_seq = list(range(sched.timesteps - 1, -1, -1))
    else:
        t_seq = sorted({int(round(v)) for v in
                        np.linspace(sched.timesteps - 1, 0, num_steps)},
                       reverse=True)

    x = rng.normal(0.0, 1.0, (1, frames, cfg.feat_dim), dtype=np.float32)
    ab = sched.alphas_bar
    for pos, t in enumerate(t_seq):
        t_idx = np.array([t])
        x0_c = model.forward(x, t_idx, cond, adapters=ad_args).data
        if guidance != 1.0:
            x0_u = model.forward(x, t_idx, null, adapters=ad_args).data
            x0 = x0_u + guidance * (x0_c - x0_u)
        else:
            x0 = x0_c
        if t == t_seq[-1]:
            x = x0
            break
        t_prev = t_seq[pos + 1]
        ab_t = ab[t]
        ab_prev = ab[t_prev]
        beta_eff = 1 - ab_t / ab_prev
        mu = (np.sqrt(ab_prev) * beta_eff * x0
              + np.sqrt(ab_t / ab_prev) * (1 - ab_prev) * x) / (1 - ab_t)
        var = beta_eff * (1 - ab_prev) / (1 - ab_t)
        z = rng.normal(0.0, 1.0, x.shape, dtype=np.float32)
        x = (mu + np.sqrt(var) * z).astype(np.float32)

    feats = x[0] * model.feature_std + model.feature_mean
    joints = features_to_joints(feats)
    return joints, feats
