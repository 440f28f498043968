"""The conditioned velocity network.

Pipeline per forward pass:

1. lyric grid -> token embedding -> conv (residual, SiLU) -> strided conv
   down to the latent frame rate;
2. style vector and sinusoidal duration features (through a learned linear
   map) are broadcast over frames;
3. ``[z_t | lyric | style | duration]`` is fused by one linear layer, a
   depthwise convolutional positional term is added, then a linear map of
   sinusoidal time features;
4. pre-norm transformer blocks (rotary attention + SwiGLU). The first half
   of the blocks also receive ``W_l(c_lyric + b_pad * pad_mask)``;
5. a linear output projection back to latent channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from jamflow import autograd as ag
from jamflow.autograd import Tensor
from jamflow.lyricalign import AlignStrategy, build_grid, pad_flags

P_STYLE = 0.10
P_LYRIC = 0.50


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    latent_channels: int = 32
    lyric_dim: int = 32
    style_dim: int = 8
    dur_dim: int = 16
    vocab: int = 26
    upsample: int = 2
    lyric_kernel: int = 3
    pos_kernel: int = 7
    time_features: int = 32
    dur_features: int = 16
    use_pad_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name not in ("use_pad_bias", "seed") and v <= 0:
                raise ValueError(f"model.{f.name} must be positive, got {v}")
        if self.hidden % self.heads or (self.hidden // self.heads) % 2:
            raise ValueError("hidden / heads must be an even integer (rotary embedding)")
        if self.lyric_kernel % 2 == 0 or self.pos_kernel % 2 == 0:
            raise ValueError("convolution kernels must be odd")

    @property
    def residual_layers(self) -> int:
        return self.n_layers // 2


# ---------------------------------------------------------------- conditioning bundle


@dataclass(frozen=True, eq=False)
class CondSet:
    """Batched conditioning inputs; leading axis is the batch.

    ``grid`` holds raw phoneme-grid tokens (the lyric encoder is part of the
    network, so embeddings are produced inside the forward pass).
    """

    grid: np.ndarray  # (B, r*l) int
    style: np.ndarray  # (B, c_s)
    t_target: np.ndarray  # (B,)
    pad_mask: np.ndarray  # (B, l) bool
    lyric_present: np.ndarray  # (B,) bool
    style_present: np.ndarray  # (B,) bool

    def __post_init__(self):
        B = len(self.t_target)
        for name in ("grid", "style", "pad_mask", "lyric_present", "style_present"):
            if len(getattr(self, name)) != B:
                raise ValueError(f"CondSet.{name} has batch {len(getattr(self, name))}, expected {B}")

    @property
    def batch(self) -> int:
        return len(self.t_target)

    @property
    def frames(self) -> int:
        return self.pad_mask.shape[1]

    def with_presence(self, style: bool | None = None, lyric: bool | None = None) -> "CondSet":
        kw = {}
        if style is not None:
            kw["style_present"] = np.full(self.batch, style)
        if lyric is not None:
            kw["lyric_present"] = np.full(self.batch, lyric)
        return replace(self, **kw)

    def take(self, idx) -> "CondSet":
        idx = np.atleast_1d(np.asarray(idx))
        return CondSet(*(getattr(self, f.name)[idx] for f in fields(self)))

    def repeat(self, k: int) -> "CondSet":
        return self.take(np.repeat(np.arange(self.batch), k))

    @staticmethod
    def concat(items: Sequence["CondSet"]) -> "CondSet":
        return CondSet(*(np.concatenate([getattr(c, f.name) for c in items]) for f in fields(CondSet)))


def make_cond(
    grid_tokens: np.ndarray,
    style: np.ndarray,
    t_target: float,
    frame_rate: float,
    frames: int,
) -> CondSet:
    """Single-sample CondSet (batch of one) with every condition present."""
    return CondSet(
        grid=np.asarray(grid_tokens, dtype=np.int64)[None],
        style=np.asarray(style, dtype=np.float64)[None],
        t_target=np.array([t_target], dtype=np.float64),
        pad_mask=pad_flags(t_target, frame_rate, frames)[None],
        lyric_present=np.ones(1, dtype=bool),
        style_present=np.ones(1, dtype=bool),
    )


def cond_from_song(song, upsample: int, strategy: AlignStrategy = AlignStrategy.AVERAGE_SPARSE) -> CondSet:
    lat = song.latent
    grid = build_grid(song.lyrics, lat.frame_rate, upsample, lat.frames, strategy)
    return make_cond(grid.tokens, song.style.values, song.duration.t_target, lat.frame_rate, lat.frames)


# ---------------------------------------------------------------- dropout


def draw_dropout(rng: np.random.Generator, n: int, p_style: float = P_STYLE, p_lyric: float = P_LYRIC):
    """Two-stage drop masks: style w.p. p_style, lyrics w.p. p_lyric only if style dropped."""
    drop_style = rng.random(n) < p_style
    drop_lyric = drop_style & (rng.random(n) < p_lyric)
    return drop_style, drop_lyric


def dropout_conditions(
    rng: np.random.Generator, cond: CondSet, p_style: float = P_STYLE, p_lyric: float = P_LYRIC
) -> CondSet:
    drop_style, drop_lyric = draw_dropout(rng, cond.batch, p_style, p_lyric)
    return replace(
        cond,
        style_present=cond.style_present & ~drop_style,
        lyric_present=cond.lyric_present & ~drop_lyric,
    )


# ---------------------------------------------------------------- guidance


def cfg_velocity(field, z_t, t, cond: CondSet, alpha_s: float, alpha_l: float) -> np.ndarray:
    """Multi-condition guidance from three field evaluations.

    Written as ``(1-a_s) v00 + (a_s-a_l) v10 + a_l v11`` (algebraically the
    usual telescoped form) so the special scales reproduce a single branch
    bit-for-bit.
    """
    v00 = np.asarray(getattr(r := field(z_t, t, cond.with_presence(style=False, lyric=False)), "data", r))
    v10 = np.asarray(getattr(r := field(z_t, t, cond.with_presence(lyric=False)), "data", r))
    v11 = np.asarray(getattr(r := field(z_t, t, cond), "data", r))
    dt = v11.dtype.type
    return dt(1 - alpha_s) * v00 + dt(alpha_s - alpha_l) * v10 + dt(alpha_l) * v11


class GuidedField:
    """Wrap a field so each call returns the CFG-combined velocity."""

    def __init__(self, field, alpha_s: float, alpha_l: float):
        self.field = field
        self.alpha_s = alpha_s
        self.alpha_l = alpha_l

    def __call__(self, z_t, t, cond):
        return cfg_velocity(self.field, z_t, t, cond, self.alpha_s, self.alpha_l)


# ---------------------------------------------------------------- features


def sinusoidal(x: np.ndarray, dim: int, min_period: float, max_period: float) -> np.ndarray:
    """(N,) -> (N, dim) sin/cos features with geometric periods."""
    half = dim // 2
    periods = np.geomspace(min_period, max_period, half)
    ang = 2 * np.pi * np.asarray(x, dtype=np.float64)[:, None] / periods[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def time_features(t, dim: int) -> np.ndarray:
    return sinusoidal(np.atleast_1d(t), dim, 0.02, 8.0)


def duration_features(t_target, dim: int) -> np.ndarray:
    return sinusoidal(np.atleast_1d(t_target), dim, 2.0, 1000.0)


def rotary_tables(frames: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = 1.0 / (10000 ** (np.arange(half) / half))
    ang = np.arange(frames)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


# ---------------------------------------------------------------- network


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))

    def lin(fan_in, *shape, gain=1.0):
        return gain * rng.standard_normal(shape) / math.sqrt(fan_in)

    h, cl, cs, cd = cfg.hidden, cfg.lyric_dim, cfg.style_dim, cfg.dur_dim
    p = {
        "lyric.embed": rng.standard_normal((cfg.vocab, cl)),
        "lyric.conv.w": lin(cl * cfg.lyric_kernel, cfg.lyric_kernel, cl, cl, gain=0.5),
        "lyric.conv.b": np.zeros(cl),
        "lyric.down.w": lin(cl * cfg.upsample, cfg.upsample, cl, cl),
        "lyric.down.b": np.zeros(cl),
        "null.lyric": 0.1 * rng.standard_normal(cl),
        "null.style": 0.1 * rng.standard_normal(cs),
        "dur.w": lin(cfg.dur_features, cfg.dur_features, cd),
        "dur.b": np.zeros(cd),
        "fuse.w": lin(cfg.latent_channels + cl + cs + cd, cfg.latent_channels + cl + cs + cd, h),
        "fuse.b": np.zeros(h),
        "pos.w": lin(cfg.pos_kernel, cfg.pos_kernel, h, gain=0.5),
        "pos.b": np.zeros(h),
        "time.w": lin(cfg.time_features, cfg.time_features, h),
        "time.b": np.zeros(h),
    }
    if cfg.use_pad_bias:
        p["pad_bias"] = np.zeros(cl)
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "attn_norm"] = np.ones(h)
        for name in ("wq", "wk", "wv"):
            p[b + name] = lin(h, h, h)
        p[b + "wo"] = lin(h, h, h, gain=0.5)
        p[b + "ffn_norm"] = np.ones(h)
        p[b + "w1"] = lin(h, h, cfg.ffn_hidden)
        p[b + "w3"] = lin(h, h, cfg.ffn_hidden)
        p[b + "w2"] = lin(cfg.ffn_hidden, cfg.ffn_hidden, h, gain=0.5)
    for i in range(cfg.residual_layers):
        p[f"inject.{i}.w"] = lin(cl, cl, h, gain=0.5)
    p["out.w"] = lin(h, h, cfg.latent_channels, gain=0.5)
    p["out.b"] = np.zeros(cfg.latent_channels)
    return p


@dataclass(eq=False)
class ConditionEmbeds:
    lyric: Tensor  # (B, l, c_l), after null substitution
    style: Tensor  # (B, c_s), after null substitution
    duration: Tensor  # (B, c_d)
    pad_mask: np.ndarray  # (B, l)


class JamModel:
    """Velocity field ``u(z_t, t, cond; params)``."""

    def __init__(self, config: ModelConfig = ModelConfig(), dtype=np.float32, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        raw = _init_params(config) if params is None else params
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=self.dtype), requires_grad=True) for k, v in raw.items()
        }
        self._rope_cache: dict[int, tuple] = {}

    # -- parameter management
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def clone(self, dtype=None) -> "JamModel":
        return JamModel(self.config, dtype or self.dtype, {k: v.data.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "JamModel":
        return self.clone(dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.data.size for v in self.params.values())

    # -- encoders
    def encode_lyrics(self, grid: np.ndarray) -> Tensor:
        grid = np.atleast_2d(np.asarray(grid, dtype=np.int64))
        r = self.config.upsample
        if grid.shape[1] % r:
            raise ValueError(f"grid length {grid.shape[1]} is not divisible by upsample rate {r}")
        if grid.min(initial=0) < 0 or grid.max(initial=0) >= self.config.vocab:
            raise ValueError("grid token outside the embedding vocabulary")
        p = self.params
        h = ag.embedding(p["lyric.embed"], grid)
        k = self.config.lyric_kernel
        conv = ag.conv1d(ag.pad_time(h, k // 2, k // 2, "edge"), p["lyric.conv.w"], p["lyric.conv.b"])
        h = h + ag.silu(conv)
        return ag.conv1d(h, p["lyric.down.w"], p["lyric.down.b"], stride=r)

    def encode_duration(self, t_target) -> Tensor:
        feats = duration_features(t_target, self.config.dur_features).astype(self.dtype)
        return ag.matmul(feats, self.params["dur.w"]) + self.params["dur.b"]

    def embed_conditions(self, cond: CondSet) -> ConditionEmbeds:
        p = self.params
        lyric = self.encode_lyrics(cond.grid)
        lyric = ag.where(cond.lyric_present[:, None, None], lyric, p["null.lyric"])
        style = ag.where(cond.style_present[:, None], cond.style.astype(self.dtype), p["null.style"])
        return ConditionEmbeds(lyric, style, self.encode_duration(cond.t_target), np.asarray(cond.pad_mask, bool))

    # -- trunk pieces
    def fuse(self, z_t, emb: ConditionEmbeds) -> Tensor:
        z_t = ag.lift(np.asarray(z_t, dtype=self.dtype) if not isinstance(z_t, Tensor) else z_t)
        B, l, c = z_t.shape
        if c != self.config.latent_channels:
            raise ValueError(f"latent has {c} channels, model expects {self.config.latent_channels}")
        if emb.lyric.shape[:2] != (B, l):
            raise ValueError(f"lyric embedding shape {emb.lyric.shape[:2]} does not match latent {(B, l)}")
        style = ag.broadcast_to(ag.reshape(emb.style, (B, 1, -1)), (B, l, emb.style.shape[-1]))
        dur = ag.broadcast_to(ag.reshape(emb.duration, (B, 1, -1)), (B, l, emb.duration.shape[-1]))
        x = ag.matmul(ag.concat([z_t, emb.lyric, style, dur], axis=-1), self.params["fuse.w"]) + self.params["fuse.b"]
        return x + ag.depthwise_conv1d(x, self.params["pos.w"], self.params["pos.b"])

    def lyric_residual_input(self, emb: ConditionEmbeds) -> Tensor:
        if not self.config.use_pad_bias:
            return emb.lyric
        mask = emb.pad_mask[:, :, None].astype(self.dtype)
        return emb.lyric + self.params["pad_bias"] * mask

    def residual_inject(self, res_in: Tensor, layer: int) -> Tensor | None:
        """Injection added after block ``layer`` (1-based); None past the first half."""
        if not 1 <= layer <= self.config.n_layers:
            raise ValueError(f"layer {layer} outside [1, {self.config.n_layers}]")
        if layer > self.config.residual_layers:
            return None
        return ag.matmul(res_in, self.params[f"inject.{layer - 1}.w"])

    def _rope(self, frames: int):
        if frames not in self._rope_cache:
            self._rope_cache[frames] = rotary_tables(frames, self.config.hidden // self.config.heads, self.dtype)
        return self._rope_cache[frames]

    def block(self, x: Tensor, i: int) -> Tensor:
        p, cfg = self.params, self.config
        b = f"blocks.{i}."
        B, T, H = x.shape
        nh, hd = cfg.heads, H // cfg.heads
        cos, sin = self._rope(T)

        h = ag.rms_norm(x, p[b + "attn_norm"])

        def heads(w):
            return ag.transpose(ag.reshape(ag.matmul(h, p[b + w]), (B, T, nh, hd)), (0, 2, 1, 3))

        q = ag.rope(heads("wq"), cos, sin)
        k = ag.rope(heads("wk"), cos, sin)
        v = heads("wv")
        att = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd)))
        o = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, T, H))
        x = x + ag.matmul(o, p[b + "wo"])

        h = ag.rms_norm(x, p[b + "ffn_norm"])
        ff = ag.silu(ag.matmul(h, p[b + "w1"])) * ag.matmul(h, p[b + "w3"])
        return x + ag.matmul(ff, p[b + "w2"])

    def velocity(self, z_t, t, emb: ConditionEmbeds) -> Tensor:
        p = self.params
        x = self.fuse(z_t, emb)
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        temb = ag.matmul(time_features(t, self.config.time_features).astype(self.dtype), p["time.w"]) + p["time.b"]
        x = x + ag.reshape(temb, (B, 1, -1))
        res_in = self.lyric_residual_input(emb)
        for i in range(self.config.n_layers):
            x = self.block(x, i)
            r = self.residual_inject(res_in, i + 1)
            if r is not None:
                x = x + r
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite activations after layer {i + 1}")
        return ag.matmul(x, p["out.w"]) + p["out.b"]

    def __call__(self, z_t, t, cond: CondSet) -> Tensor:
        return self.velocity(z_t, t, self.embed_conditions(cond))

    forward = __call__


def sample_latents(model, cond: CondSet, z0: np.ndarray, steps: int, alpha_s: float = 1.0, alpha_l: float = 1.0):
    """Euler-sample latents from noise ``z0`` (B, l, c) under guidance scales."""
    from jamflow.flowcore import euler_sample

    # unit scales reduce to the conditional branch exactly, so skip the extra evaluations
    field = model if (alpha_s, alpha_l) == (1.0, 1.0) else GuidedField(model, alpha_s, alpha_l)
    return euler_sample(field, np.asarray(z0, dtype=model.dtype), steps, cond)
