"""Objective evaluation: tail RMS after the target duration, proxy WER/PER,
and the JSON evaluation report.
"""
from __future__ import annotations

import json
import math
from importlib import resources
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from jamflow import kernels
from jamflow.songworld import SILENCE_ID, DurationSpec, LatentSeq, TimedLyrics, WorldConfig, decode_tokens

RMS_OFFSETS = (0.0, 1.0, 3.0, 10.0)


# ---------------------------------------------------------------- RMS


def latent_rms(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(values * values))) if values.size else float("nan")


@dataclass
class RmsReport:
    reference_rms: float
    # offset seconds -> (absolute rms, percent of reference); None where undefined
    tail: dict[float, tuple[float | None, float | None]]
    note: str | None = None

    def to_json(self) -> dict:
        return {
            "reference": self.reference_rms,
            "tail": {f"{o:g}": {"rms": a, "percent": p} for o, (a, p) in self.tail.items()},
            "note": self.note,
        }


def rms_after_duration(
    latent: LatentSeq | np.ndarray, spec: DurationSpec, offsets: Sequence[float] = RMS_OFFSETS, frame_rate: float | None = None
) -> RmsReport:
    """Compare loudness after ``t_target + offset`` with loudness inside the target."""
    if isinstance(latent, LatentSeq):
        values, f = latent.values, latent.frame_rate
    else:
        values, f = np.asarray(latent, dtype=np.float64), frame_rate
        if f is None:
            raise ValueError("frame_rate is required for a raw latent array")
    n_valid = math.floor(spec.t_target * f)
    ref = latent_rms(values[:n_valid])
    note = None
    if not ref > 0:
        note = "reference RMS is zero or undefined; percentages omitted"
    tail = {}
    for o in offsets:
        start = math.floor((spec.t_target + o) * f)
        seg = values[start:]
        if seg.shape[0] == 0:
            tail[float(o)] = (None, None)
            continue
        a = latent_rms(seg)
        tail[float(o)] = (a, 100.0 * a / ref if note is None else None)
    return RmsReport(ref, tail, note)


# ---------------------------------------------------------------- edit distance


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    vocab: dict = {}
    a = np.array([vocab.setdefault(x, len(vocab)) for x in ref], dtype=np.int64)
    b = np.array([vocab.setdefault(x, len(vocab)) for x in hyp], dtype=np.int64)
    return kernels.levenshtein(a, b)


@dataclass(frozen=True)
class ErrorRates:
    wer: float
    per: float


def transcribe(latent: LatentSeq | np.ndarray, config: WorldConfig) -> list[tuple[int, ...]]:
    """Decode frames, merge repeated tokens and split words at silence."""
    runs = kernels.collapse_runs(decode_tokens(latent, config))
    words, cur = [], []
    for tok in runs.tolist():
        if tok == SILENCE_ID:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        words.append(tuple(cur))
    return words


def reference_words(lyrics: TimedLyrics) -> list[tuple[int, ...]]:
    return [tuple(kernels.collapse_runs(np.array(w.phonemes)).tolist()) for w in lyrics]


def error_rates(ref_words: list[tuple[int, ...]], hyp_words: list[tuple[int, ...]]) -> ErrorRates:
    if not ref_words:
        raise ValueError("reference lyrics are empty; error rates are undefined")
    ref_ph = [p for w in ref_words for p in w]
    hyp_ph = [p for w in hyp_words for p in w]
    return ErrorRates(
        wer=edit_distance(ref_words, hyp_words) / len(ref_words),
        per=edit_distance(ref_ph, hyp_ph) / len(ref_ph),
    )


def proxy_error_rates(generated: LatentSeq | np.ndarray, lyrics: TimedLyrics, config: WorldConfig) -> ErrorRates:
    return error_rates(reference_words(lyrics), transcribe(generated, config))


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class EvalConfig:
    steps: int = 32
    alpha_s: float = 1.0
    alpha_l: float = 1.0
    seed: int = 0
    batch_size: int = 16


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def aggregate_report(per_sample: list[dict]) -> dict:
    ok = [s for s in per_sample if "error" not in s]
    crit = np.array([s["oracle_criteria"] for s in ok]) if ok else np.zeros((0, 5))
    offsets = sorted({o for s in ok for o in s["rms"]["tail"]}, key=float)
    rms = {
        "reference": _mean([s["rms"]["reference"] for s in ok]),
        "tail": {
            o: {
                "rms": _mean([s["rms"]["tail"][o]["rms"] for s in ok]),
                "percent": _mean([s["rms"]["tail"][o]["percent"] for s in ok]),
            }
            for o in offsets
        },
    }
    return {
        "n_samples": len(per_sample),
        "n_failed": len(per_sample) - len(ok),
        "wer": _mean([s["wer"] for s in ok]),
        "per": _mean([s["per"] for s in ok]),
        "oracle_mean": _mean([s["oracle_mean"] for s in ok]),
        "oracle_criteria": crit.mean(axis=0).tolist() if ok else [None] * 5,
        "rms": rms,
    }


def evaluate_model(policy, eval_set: Sequence, oracle, world: WorldConfig, config: EvalConfig = EvalConfig(),
                   run_id: str = "eval", checkpoint: str | None = None, strategy=None) -> dict:
    """Generate one latent per evaluation song and score it.

    ``policy`` is a :class:`~jamflow.condnet.JamModel`; ``eval_set`` holds
    ``SyntheticSong`` objects whose lyrics, style and duration are the prompts.
    Per-sample failures are recorded in the report instead of aborting.
    """
    from jamflow.condnet import CondSet, cond_from_song, sample_latents
    from jamflow.lyricalign import AlignStrategy
    from jamflow.prefalign import aggregate_score

    strategy = strategy or AlignStrategy.AVERAGE_SPARSE
    r = policy.config.upsample
    per_sample: list[dict] = []
    songs = list(eval_set)
    for lo in range(0, len(songs), config.batch_size):
        chunk = songs[lo : lo + config.batch_size]
        conds, keep, entries = [], [], {}
        for i, song in enumerate(chunk):
            try:
                conds.append(cond_from_song(song, r, strategy))
                keep.append(i)
            except ValueError as exc:
                entries[i] = {"error": str(exc)}
        if conds:
            cond = CondSet.concat(conds)
            shape = (cond.batch, cond.frames, world.channels)
            noise = np.stack(
                [np.random.default_rng([config.seed, chunk[i].seed]).standard_normal(shape[1:]) for i in keep]
            )
            z = sample_latents(policy, cond, noise, config.steps, config.alpha_s, config.alpha_l)
            for j, i in enumerate(keep):
                song = chunk[i]
                try:
                    gen = LatentSeq(z[j].astype(np.float64), world.frame_rate)
                    crit = np.asarray(oracle.score(gen, cond.take(j)), dtype=np.float64)
                    er = proxy_error_rates(gen, song.lyrics, world)
                    entries[i] = {
                        "oracle_criteria": crit.tolist(),
                        "oracle_mean": aggregate_score(crit),
                        "wer": er.wer,
                        "per": er.per,
                        "rms": rms_after_duration(gen, song.duration).to_json(),
                    }
                except (ValueError, FloatingPointError) as exc:
                    entries[i] = {"error": str(exc)}
        for i, song in enumerate(chunk):
            per_sample.append({"sample_id": lo + i, "seed": song.seed, **entries[i]})
    return {
        "run_id": run_id,
        "model_checkpoint": checkpoint,
        "per_sample": per_sample,
        "aggregate": aggregate_report(per_sample),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_schema() -> dict:
    """The published JSON schema for evaluation reports."""
    text = resources.files("jamflow").joinpath("schemas/eval_report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)
