"""Preference alignment: candidate generation, reward scoring, pair selection,
flow-matching DPO losses and the round driver.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from jamflow import autograd as ag
from jamflow import kernels
from jamflow.condnet import CondSet, JamModel, cond_from_song, sample_latents
from jamflow.evalkit import edit_distance, latent_rms
from jamflow.flowcore import fm_loss, per_sample_fm_error
from jamflow.lyricalign import PHONEME_OFFSET, AlignStrategy
from jamflow.optim import AdamW, OptimConfig
from jamflow.songworld import SILENCE_ID, LatentSeq, WorldConfig, decode_tokens, style_basis

log = logging.getLogger(__name__)

N_CRITERIA = 5
SCORE_MIN, SCORE_MAX = 1.0, 5.0


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 2000.0
    lam: float = 0.2
    candidates: int = 5
    margin: float = 0.15
    rounds: int = 3
    steps: int = 200
    lr: float = 1e-5
    warmup: int = 10
    batch_size: int = 8
    grad_accum: int = 4
    sample_steps: int = 32
    alpha_s: float = 1.0
    alpha_l: float = 1.0
    gen_batch: int = 8

    def __post_init__(self):
        if self.beta <= 0 or self.lam < 0 or self.candidates < 2:
            raise ValueError("need beta > 0, lam >= 0, candidates >= 2")


class RewardOracle(Protocol):
    def score(self, latent: LatentSeq, cond: CondSet) -> np.ndarray:
        """Five criterion scores in [1, 5] for one latent and its single-sample conditions."""


def aggregate_score(criteria) -> float:
    c = np.asarray(criteria, dtype=np.float64)
    if c.shape != (N_CRITERIA,):
        raise ValueError(f"expected {N_CRITERIA} criterion scores, got shape {c.shape}")
    if np.any(c < SCORE_MIN) or np.any(c > SCORE_MAX) or not np.all(np.isfinite(c)):
        raise ValueError(f"criterion scores must lie in [{SCORE_MIN}, {SCORE_MAX}], got {c.tolist()}")
    return float(c.mean())


def _to_scale(x: float) -> float:
    """Map a quality in [0, 1] onto the five-point scale."""
    return float(np.clip(SCORE_MIN + (SCORE_MAX - SCORE_MIN) * x, SCORE_MIN, SCORE_MAX))


class SyntheticOracle:
    """Deterministic five-criterion scorer for songworld latents.

    1. lyric adherence: phoneme edit distance of the decoded latent;
    2. smoothness: mean squared frame-to-frame difference;
    3. silence compliance: RMS past the target duration;
    4. style adherence: cosine between the latent's style-subspace projection
       and the conditioning style;
    5. energy regularity: spread of frame norms over sung frames.
    """

    def __init__(self, world: WorldConfig, smooth_scale: float = 0.02, tail_scale: float = 0.01, cv_scale: float = 0.2):
        self.world = world
        self.smooth_scale = smooth_scale
        self.tail_scale = tail_scale
        self.cv_scale = cv_scale

    def score(self, latent, cond: CondSet) -> np.ndarray:
        x = latent.values if isinstance(latent, LatentSeq) else np.asarray(latent, dtype=np.float64)
        if cond.batch != 1:
            raise ValueError("oracle scores one sample at a time")
        n_valid = int((~cond.pad_mask[0]).sum())
        grid = cond.grid[0]
        ref = (grid[grid >= PHONEME_OFFSET] - PHONEME_OFFSET).tolist()
        decoded = decode_tokens(x, self.world)
        runs = kernels.collapse_runs(decoded)
        hyp = runs[runs != SILENCE_ID].tolist()

        adherence = 1.0 - edit_distance(ref, hyp) / max(1, len(ref))
        head = x[:n_valid]
        msd = float(np.mean(np.diff(head, axis=0) ** 2)) if n_valid > 1 else 0.0
        a = self.world.amplitude
        smooth = 1.0 / (1.0 + msd / (self.smooth_scale * a * a))
        tail = x[n_valid:]
        silence = math.exp(-latent_rms(tail) / (self.tail_scale * a)) if tail.shape[0] else 1.0
        proj = head.mean(axis=0) @ style_basis(self.world).T if n_valid else np.zeros(self.world.style_dim)
        s = cond.style[0]
        denom = np.linalg.norm(proj) * np.linalg.norm(s)
        cos = float(proj @ s / denom) if denom > 0 else 0.0
        sung = np.linalg.norm(head, axis=1)[decoded[:n_valid] != SILENCE_ID]
        if sung.size >= 2:
            regular = math.exp(-float(sung.std() / sung.mean()) / self.cv_scale)
        else:
            regular = 0.0 if ref else 1.0
        return np.array(
            [_to_scale(max(0.0, adherence)), _to_scale(smooth), _to_scale(silence), _to_scale((1 + cos) / 2), _to_scale(regular)]
        )


class ConstantOracle:
    def __init__(self, value: float = 3.0):
        self.value = value

    def score(self, latent, cond) -> np.ndarray:
        return np.full(N_CRITERIA, self.value)


# ---------------------------------------------------------------- candidates and pairs


def candidate_noise(seed: int, frames: int, channels: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 31])).standard_normal((frames, channels))


def generate_candidates(
    policy: JamModel,
    cond: CondSet,
    k: int,
    rng: np.random.Generator,
    steps: int = 32,
    alpha_s: float = 1.0,
    alpha_l: float = 1.0,
) -> tuple[np.ndarray, list[int]]:
    """k Euler samples for one prompt, each from its own seeded noise.

    Returns the (k, l, c) latents and the per-candidate noise seeds.
    """
    if k < 2:
        raise ValueError("need at least two candidates")
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=k)]
    noise = np.stack([candidate_noise(s, cond.frames, policy.config.latent_channels) for s in seeds])
    return sample_latents(policy, cond.repeat(k), noise, steps, alpha_s, alpha_l), seeds


@dataclass(eq=False)
class PreferencePair:
    win: np.ndarray
    loss: np.ndarray
    cond: CondSet
    win_score: float
    loss_score: float
    sample_id: int = 0
    win_seed: int | None = None
    loss_seed: int | None = None
    gt: np.ndarray | None = None


def select_pair(scores: Sequence[float], margin: float) -> tuple[int, int] | None:
    """(win, loss) indices by max / min score, first index on ties; None below margin."""
    s = np.asarray(scores, dtype=np.float64)
    win, lose = int(np.argmax(s)), int(np.argmin(s))
    if s[win] - s[lose] < margin:
        return None
    return win, lose


def build_pair(
    candidates, oracle: RewardOracle, cond: CondSet, margin: float = 0.15, seeds: Sequence[int] | None = None, frame_rate: float = 5.0
) -> PreferencePair | None:
    cands = np.asarray(candidates)
    if cands.shape[0] < 2:
        raise ValueError("need at least two candidates")
    scores = [aggregate_score(oracle.score(LatentSeq(c, frame_rate), cond)) for c in cands]
    picked = select_pair(scores, margin)
    if picked is None:
        return None
    w, l = picked
    return PreferencePair(
        win=cands[w],
        loss=cands[l],
        cond=cond,
        win_score=scores[w],
        loss_score=scores[l],
        win_seed=None if seeds is None else seeds[w],
        loss_seed=None if seeds is None else seeds[l],
    )


# ---------------------------------------------------------------- losses


def dpo_objective(err_w, err_l, ref_w, ref_l, beta: float) -> ag.Tensor:
    """mean(-log sigmoid(-beta * [(err_w - err_l) - (ref_w - ref_l)])).

    ``-log sigmoid(-x)`` is evaluated as ``softplus(x)``.
    """
    margin = (ag.lift(err_w) - err_l) - (np.asarray(ref_w) - np.asarray(ref_l))
    return ag.softplus(margin * beta).mean()


def _stack_pairs(pairs: Sequence[PreferencePair]):
    win = np.stack([p.win for p in pairs])
    loss = np.stack([p.loss for p in pairs])
    cond = CondSet.concat([p.cond for p in pairs])
    return win, loss, cond


def dpo_fm_loss(policy, reference, pairs: Sequence[PreferencePair], t, noise_w, noise_l, beta: float) -> ag.Tensor:
    """Flow-matching DPO loss over a batch of pairs.

    One ``t`` per pair; each branch has its own noise, shared between the
    policy and reference evaluations of that branch.
    """
    win, loss, cond = _stack_pairs(pairs)
    P = len(pairs)
    dtype = policy.dtype
    z1 = np.concatenate([win, loss]).astype(dtype)
    z0 = np.concatenate([noise_w, noise_l]).astype(dtype)
    tt = np.concatenate([np.asarray(t, dtype=np.float64)] * 2)
    both = CondSet.concat([cond, cond])
    err = per_sample_fm_error(policy, z1, z0, tt, both)
    with ag.no_grad():
        ref = per_sample_fm_error(reference, z1, z0, tt, both).data
    return dpo_objective(err[:P], err[P:], ref[:P], ref[P:], beta)


def dpo_gt_loss(policy, reference, pairs, gt, gt_cond: CondSet, t, noise_w, noise_l, noise_gt, beta: float, lam: float) -> ag.Tensor:
    """``lam * L_FM(ground truth) + L_DPO-FM(pairs)``."""
    dpo = dpo_fm_loss(policy, reference, pairs, t, noise_w, noise_l, beta)
    if lam == 0:
        return dpo
    dtype = policy.dtype
    recon = fm_loss(policy, np.asarray(gt, dtype=dtype), np.asarray(noise_gt, dtype=dtype), t, gt_cond)
    return recon * lam + dpo


# ---------------------------------------------------------------- round driver


class EmptyPairSetError(RuntimeError):
    pass


@dataclass
class RoundResult:
    policy: JamModel
    pairs: list[PreferencePair]
    stats: dict = field(default_factory=dict)


def build_preference_set(
    policy: JamModel, songs: Sequence, oracle: RewardOracle, cfg: DpoConfig, rng: np.random.Generator,
    world: WorldConfig, strategy: AlignStrategy = AlignStrategy.AVERAGE_SPARSE,
) -> tuple[list[PreferencePair], int]:
    """Generate candidates for every song and keep the pairs that clear the margin."""
    pairs, rejected = [], 0
    r = policy.config.upsample
    k = cfg.candidates
    for lo in range(0, len(songs), cfg.gen_batch):
        chunk = songs[lo : lo + cfg.gen_batch]
        conds = [cond_from_song(s, r, strategy) for s in chunk]
        seeds = [[int(x) for x in rng.integers(0, 2**31 - 1, size=k)] for _ in chunk]
        noise = np.stack([candidate_noise(s, conds[0].frames, world.channels) for row in seeds for s in row])
        batch = CondSet.concat(conds).repeat(k)
        z = sample_latents(policy, batch, noise, cfg.sample_steps, cfg.alpha_s, cfg.alpha_l).astype(np.float64)
        for j, song in enumerate(chunk):
            pair = build_pair(z[j * k : (j + 1) * k], oracle, conds[j], cfg.margin, seeds[j], world.frame_rate)
            if pair is None:
                rejected += 1
                continue
            pair.sample_id = lo + j
            pair.gt = song.latent.values
            pairs.append(pair)
    return pairs, rejected


def dpo_round(
    policy: JamModel,
    songs: Sequence,
    oracle: RewardOracle,
    cfg: DpoConfig,
    world: WorldConfig,
    seed: int = 0,
    round_index: int = 0,
    strategy: AlignStrategy = AlignStrategy.AVERAGE_SPARSE,
) -> RoundResult:
    """One generate / score / optimise round; the input policy becomes the frozen reference."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41, int(round_index)]))
    reference = policy.clone()
    pairs, rejected = build_preference_set(reference, songs, oracle, cfg, rng, world, strategy)
    stats = {
        "round": round_index,
        "pairs_kept": len(pairs),
        "pairs_rejected": rejected,
        "mean_win_score": float(np.mean([p.win_score for p in pairs])) if pairs else None,
        "mean_loss_score": float(np.mean([p.loss_score for p in pairs])) if pairs else None,
    }
    if not pairs:
        raise EmptyPairSetError(f"round {round_index}: no candidate pair cleared the {cfg.margin} score margin")

    new = policy.clone()
    opt = AdamW(
        new.params,
        OptimConfig(lr=cfg.lr, warmup=cfg.warmup, steps=cfg.steps, batch_size=cfg.batch_size, grad_accum=cfg.grad_accum),
    )
    frames, channels = pairs[0].win.shape
    losses = []
    for _ in range(cfg.steps):
        new.zero_grad()
        total = 0.0
        for _ in range(cfg.grad_accum):
            idx = rng.integers(0, len(pairs), size=cfg.batch_size)
            batch = [pairs[i] for i in idx]
            n = len(batch)
            t = rng.uniform(0.0, 1.0, size=n)
            nw = rng.standard_normal((n, frames, channels))
            nl = rng.standard_normal((n, frames, channels))
            if cfg.lam > 0:
                ng = rng.standard_normal((n, frames, channels))
                gt = np.stack([p.gt for p in batch])
                gt_cond = CondSet.concat([p.cond for p in batch])
                loss = dpo_gt_loss(new, reference, batch, gt, gt_cond, t, nw, nl, ng, cfg.beta, cfg.lam)
            else:
                loss = dpo_fm_loss(new, reference, batch, t, nw, nl, cfg.beta)
            (loss * (1.0 / cfg.grad_accum)).backward()
            total += float(loss) / cfg.grad_accum
        if not math.isfinite(total):
            raise FloatingPointError(f"round {round_index}: non-finite DPO loss at step {len(losses)}")
        opt.step(new.grads())
        losses.append(total)
    stats["steps"] = cfg.steps
    stats["loss_first"] = losses[0]
    stats["loss_last"] = losses[-1]
    stats["loss_mean"] = float(np.mean(losses))
    log.info("dpo round %d: %d pairs (%d rejected), loss %.4f -> %.4f", round_index, len(pairs), rejected, losses[0], losses[-1])
    return RoundResult(new, pairs, stats)


def pairs_to_jsonl(pairs: Sequence[PreferencePair], cfg: DpoConfig) -> str:
    lines = []
    for p in pairs:
        lines.append(
            json.dumps(
                {
                    "sample_id": p.sample_id,
                    "win_seed": p.win_seed,
                    "loss_seed": p.loss_seed,
                    "win_score": p.win_score,
                    "loss_score": p.loss_score,
                    "cfg_scales": [cfg.alpha_s, cfg.alpha_l],
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
