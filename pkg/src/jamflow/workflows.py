"""End-to-end workflows behind the command line: dataset synthesis, the
flow-matching training loop with checkpoint/resume, sampling, preference
rounds and evaluation.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from jamflow import checkpoint
from jamflow.condnet import CondSet, JamModel, ModelConfig, dropout_conditions, make_cond, sample_latents
from jamflow.config import RunConfig, from_flat, to_flat
from jamflow.evalkit import evaluate_model
from jamflow.flowcore import fm_loss, sample_timestep
from jamflow.lyricalign import AlignStrategy, build_grid
from jamflow.optim import AdamW, lr_at
from jamflow.prefalign import SyntheticOracle, dpo_round, pairs_to_jsonl
from jamflow.songworld import (
    ManifestEntry,
    SyntheticSong,
    TimedLyrics,
    decode_tokens,
    frames_for,
    make_duration_spec,
    make_manifest,
    make_style,
    read_manifest,
    song_from_entry,
    write_lyrics_jsonl,
)

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "jamflow-model"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------- datasets


def synth_dataset(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write ``manifest.jsonl`` plus one lyric file per song; returns the manifest path."""
    out = Path(out_dir)
    (out / "lyrics").mkdir(parents=True, exist_ok=True)
    entries = make_manifest(cfg.n_songs, cfg.data_seed, cfg.world)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, entry in enumerate(entries):
            fh.write(entry.to_json() + "\n")
            write_lyrics_jsonl(song_from_entry(entry, cfg.world).lyrics, out / "lyrics" / f"{i:05d}.jsonl")
    return manifest


def load_songs(manifest: str | Path | Sequence[ManifestEntry], cfg: RunConfig) -> list[SyntheticSong]:
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    return [song_from_entry(e, cfg.world) for e in entries]


@dataclass
class SongBank:
    """Stacked training arrays for fast batch assembly."""

    latents: np.ndarray  # (N, l, c)
    grids: np.ndarray  # (N, r*l)
    styles: np.ndarray  # (N, c_s)
    t_target: np.ndarray  # (N,)
    n_valid: np.ndarray  # (N,)
    frame_rate: float
    upsample: int

    @classmethod
    def from_songs(cls, songs: Sequence[SyntheticSong], upsample: int, strategy=AlignStrategy.AVERAGE_SPARSE, dtype=np.float32):
        if not songs:
            raise ValueError("dataset is empty")
        f = songs[0].latent.frame_rate
        grids = [build_grid(s.lyrics, f, upsample, s.latent.frames, strategy).tokens for s in songs]
        return cls(
            latents=np.stack([s.latent.values for s in songs]).astype(dtype),
            grids=np.stack(grids),
            styles=np.stack([s.style.values for s in songs]),
            t_target=np.array([s.duration.t_target for s in songs]),
            n_valid=np.array([s.valid_frames for s in songs]),
            frame_rate=f,
            upsample=upsample,
        )

    def __len__(self):
        return len(self.latents)

    def batch(self, idx: np.ndarray, offsets: np.ndarray | None = None, clip: int | None = None) -> tuple[np.ndarray, CondSet]:
        """Full-length rows, or ``clip``-frame windows starting at ``offsets``."""
        idx = np.asarray(idx)
        n = len(idx)
        if clip is None:
            z1 = self.latents[idx]
            grid = self.grids[idx]
            t_target = self.t_target[idx]
            n_valid = self.n_valid[idx]
            frames = z1.shape[1]
        else:
            r = self.upsample
            z1 = np.stack([self.latents[i, o : o + clip] for i, o in zip(idx, offsets)])
            grid = np.stack([self.grids[i, r * o : r * (o + clip)] for i, o in zip(idx, offsets)])
            n_valid = np.minimum(self.n_valid[idx] - offsets, clip)
            t_target = np.minimum(self.t_target[idx] - offsets / self.frame_rate, clip / self.frame_rate)
            frames = clip
        cond = CondSet(
            grid=grid,
            style=self.styles[idx],
            t_target=t_target,
            pad_mask=np.arange(frames)[None, :] >= n_valid[:, None],
            lyric_present=np.ones(n, dtype=bool),
            style_present=np.ones(n, dtype=bool),
        )
        return z1, cond


# ---------------------------------------------------------------- checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_model(path: str | Path, model: JamModel, meta: dict | None = None, optimizer: AdamW | None = None) -> bytes:
    arrays = {f"param.{k}": v for k, v in model.state().items()}
    if optimizer is not None:
        arrays.update({f"optim.{k}": v for k, v in optimizer.state().items()})
    full = {"kind": CHECKPOINT_KIND, "model_config": dataclasses.asdict(model.config), **(meta or {})}
    return checkpoint.save(path, arrays, full)


def load_model(path: str | Path, dtype=np.float32) -> tuple[JamModel, dict, dict[str, np.ndarray]]:
    """Returns the model, the header metadata and the full array table."""
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise checkpoint.CheckpointError(f"{path}: not a model checkpoint")
    config = ModelConfig(**meta["model_config"])
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    return JamModel(config, dtype, params), meta, arrays


def init_from_checkpoint(config: ModelConfig, path: str | Path, dtype=np.float32) -> JamModel:
    """Warm-start ``config`` from another checkpoint.

    Shared parameters are copied; parameters the source lacks keep their fresh
    initialisation and extra source parameters are ignored (this is how a
    model without the padding bias is derived from one with it).
    """
    source, _, _ = load_model(path, dtype)
    model = JamModel(config, dtype)
    src = source.state()
    for name, p in model.params.items():
        if name in src:
            if src[name].shape != p.data.shape:
                raise checkpoint.CheckpointError(f"{path}: parameter {name} has shape {src[name].shape}, expected {p.data.shape}")
            p.data = src[name].astype(dtype)
    return model


# ---------------------------------------------------------------- training


class Trainer:
    """Flow-matching loop: logit-normal t, condition dropout, AdamW."""

    def __init__(self, cfg: RunConfig, bank: SongBank, model: JamModel | None = None):
        self.cfg = cfg
        self.bank = bank
        self.model = model if model is not None else JamModel(cfg.model)
        self.opt = AdamW(self.model.params, cfg.optim)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 53]))
        self.step = 0
        self.clip = None
        if cfg.stage == "pretrain":
            clip = frames_for(cfg.train.clip_seconds, bank.frame_rate)
            self.clip = clip if clip < bank.latents.shape[1] else None

    def train_step(self) -> float:
        cfg, rng, model = self.cfg, self.rng, self.model
        B = cfg.optim.batch_size
        model.zero_grad()
        total = 0.0
        for _ in range(cfg.optim.grad_accum):
            idx = rng.integers(0, len(self.bank), size=B)
            offsets = None
            if self.clip is not None:
                hi = np.maximum(self.bank.n_valid[idx] - self.clip, 0)
                offsets = rng.integers(0, hi + 1)
            z1, cond = self.bank.batch(idx, offsets, self.clip)
            cond = dropout_conditions(rng, cond, cfg.train.p_style, cfg.train.p_lyric)
            t = sample_timestep(rng, B)
            z0 = rng.standard_normal(z1.shape, dtype=np.float32)
            loss = fm_loss(model, z1, z0, t.astype(np.float32), cond)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(self.step, value)
            (loss * (1.0 / cfg.optim.grad_accum)).backward()
            total += value / cfg.optim.grad_accum
        self.opt.step(model.grads())
        self.step += 1
        return total

    def run(self, stop_at: int | None = None, log_path: str | Path | None = None) -> list[float]:
        """Train until ``stop_at`` (default: the configured step count)."""
        end = self.cfg.optim.steps if stop_at is None else min(stop_at, self.cfg.optim.steps)
        losses = []
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.step < end:
                lr = lr_at(self.step, self.cfg.optim)
                loss = self.train_step()
                losses.append(loss)
                if fh:
                    fh.write(json.dumps({"step": self.step, "loss": loss, "lr": lr}) + "\n")
                if self.step % self.cfg.train.log_every == 0:
                    log.info("step %d loss %.5f", self.step, loss)
        finally:
            if fh:
                fh.close()
        return losses

    def save(self, path: str | Path) -> bytes:
        meta = {
            "run_config": to_flat(self.cfg),
            "stage": self.cfg.stage,
            "step": self.step,
            "optim_step": self.opt.step_count,
            "rng_state": _rng_state(self.rng),
        }
        return save_model(path, self.model, meta, self.opt)

    @classmethod
    def resume(cls, path: str | Path, bank: SongBank, cfg: RunConfig | None = None) -> "Trainer":
        model, meta, arrays = load_model(path)
        cfg = cfg or from_flat(meta["run_config"])
        if dataclasses.asdict(cfg.model) != meta["model_config"]:
            raise checkpoint.CheckpointError(f"{path}: model config differs from the run config")
        trainer = cls(cfg, bank, model)
        trainer.opt.load_state({k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}, meta["optim_step"])
        trainer.rng = _restore_rng(meta["rng_state"])
        trainer.step = int(meta["step"])
        return trainer


# ---------------------------------------------------------------- sampling


def sample_song(
    model: JamModel,
    lyrics: TimedLyrics,
    cfg: RunConfig,
    duration: float,
    style_seed: int,
    seed: int,
    steps: int = 32,
    alpha_s: float = 1.0,
    alpha_l: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One guided Euler sample; returns the latent trimmed to the target and its decoded tokens."""
    world = cfg.world
    spec = make_duration_spec(duration, world.t_max)
    if lyrics.end > spec.t_target:
        raise ValueError(f"lyrics end at {lyrics.end:g} s, beyond the target duration {spec.t_target:g} s")
    frames = world.max_frames
    grid = build_grid(lyrics, world.frame_rate, model.config.upsample, frames, AlignStrategy(cfg.train.strategy))
    cond = make_cond(grid.tokens, make_style(style_seed, world).values, spec.t_target, world.frame_rate, frames)
    z0 = np.random.default_rng(np.random.SeedSequence([int(seed), 59])).standard_normal((1, frames, world.channels))
    z = sample_latents(model, cond, z0, steps, alpha_s, alpha_l)[0]
    z = z[: frames_for(spec.t_target, world.frame_rate)]
    return z, decode_tokens(z, world)


# ---------------------------------------------------------------- preference rounds and evaluation


def run_dpo(model: JamModel, songs: Sequence[SyntheticSong], cfg: RunConfig, oracle=None) -> tuple[JamModel, list]:
    """Run ``cfg.dpo.rounds`` rounds; each round's output is the next round's reference."""
    oracle = oracle or SyntheticOracle(cfg.world)
    strategy = AlignStrategy(cfg.train.strategy)
    rounds = []
    for i in range(cfg.dpo.rounds):
        result = dpo_round(model, songs, oracle, cfg.dpo, cfg.world, cfg.seed, i, strategy)
        model = result.policy
        rounds.append(result)
    return model, rounds


def dpo_checkpoint(in_path: str | Path, out_path: str | Path, songs: Sequence[SyntheticSong], cfg: RunConfig) -> list[dict]:
    """DPO on a checkpoint. With zero rounds the output is byte-identical to the input."""
    model, meta, arrays = load_model(in_path)
    model, rounds = run_dpo(model, songs, cfg)
    out_path = Path(out_path)
    if not rounds:
        checkpoint.save(out_path, arrays, meta)
        return []
    stats = [r.stats for r in rounds]
    meta = {k: v for k, v in meta.items() if k not in ("optim_step", "rng_state", "model_config", "kind")}
    meta.update({"stage": "dpo", "dpo_run_config": to_flat(cfg), "dpo_rounds": stats})
    save_model(out_path, model, meta)
    for r in rounds:
        Path(f"{out_path}.round{r.stats['round']}.pairs.jsonl").write_text(pairs_to_jsonl(r.pairs, cfg.dpo), encoding="utf-8")
    Path(f"{out_path}.rounds.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats


def evaluate_checkpoint(ckpt: str | Path, songs: Sequence[SyntheticSong], cfg: RunConfig, run_id: str = "eval") -> dict:
    model, _, _ = load_model(ckpt)
    return evaluate_model(
        model, songs, SyntheticOracle(cfg.world), cfg.world, cfg.eval, run_id=run_id,
        checkpoint=Path(ckpt).name, strategy=AlignStrategy(cfg.train.strategy),
    )
