"""Synthetic song world: domain types, a seeded song generator and its codec.

The generator stands in for a VAE-encoded corpus. Every frame is a codebook
vector for the phoneme being sung (or nothing), a style-dependent offset, and
small Gaussian noise; everything at or beyond the target duration is the
all-zero silence latent. Because the codebook is orthonormal the latent can be
decoded back to phoneme ids by nearest-neighbour search.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from jamflow import kernels

SILENCE_ID = kernels.SILENCE_ID


@dataclass(frozen=True)
class WorldConfig:
    frame_rate: float = 5.0
    channels: int = 32
    n_phonemes: int = 24
    style_dim: int = 8
    t_max: float = 30.0
    amplitude: float = 8.0  # norm of a phoneme code; style and noise scale with it
    noise_sigma: float = 0.05
    style_gain: float = 0.25
    duration_range: tuple[float, float] = (6.0, 32.0)
    word_frames: tuple[int, int] = (2, 6)
    gap_frames: tuple[int, int] = (1, 6)
    lead_frames: tuple[int, int] = (0, 10)
    outro_frames: tuple[int, int] = (0, 40)
    max_phonemes: int = 4
    max_words: int | None = None
    codebook_seed: int = 0

    def __post_init__(self):
        if self.frame_rate <= 0 or self.t_max <= 0 or self.amplitude <= 0:
            raise ValueError("frame_rate, t_max and amplitude must be positive")
        if self.n_phonemes + self.style_dim > self.channels:
            raise ValueError(
                f"channels={self.channels} cannot hold {self.n_phonemes} phoneme codes "
                f"plus a {self.style_dim}-dim style basis orthogonally"
            )
        if self.n_phonemes > 26:
            raise ValueError("the letter phonemizer supports at most 26 phonemes")
        if self.word_frames[0] < 1 or self.gap_frames[0] < 1:
            raise ValueError("word and gap lengths must be at least one frame")

    @property
    def max_frames(self) -> int:
        return frames_for(self.t_max, self.frame_rate)


def frames_for(seconds: float, frame_rate: float) -> int:
    return int(math.ceil(seconds * frame_rate))


# ---------------------------------------------------------------- domain types


@dataclass(frozen=True, eq=False)
class LatentSeq:
    """A latent sequence ``values`` of shape (frames, channels)."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"latent must be 2-D (frames, channels), got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("latent contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def seconds(self) -> float:
        return self.frames / self.frame_rate

    def __eq__(self, other):
        if not isinstance(other, LatentSeq):
            return NotImplemented
        return self.frame_rate == other.frame_rate and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class Word:
    text: str
    phonemes: tuple[int, ...]
    t_start: float
    t_end: float

    def __post_init__(self):
        object.__setattr__(self, "phonemes", tuple(int(p) for p in self.phonemes))
        if not self.phonemes:
            raise ValueError(f"word {self.text!r} has no phonemes")
        if not (0 <= self.t_start < self.t_end):
            raise ValueError(
                f"word {self.text!r}: need 0 <= t_start < t_end, got [{self.t_start}, {self.t_end}]"
            )


@dataclass(frozen=True)
class TimedLyrics:
    words: tuple[Word, ...] = ()

    def __post_init__(self):
        words = tuple(self.words)
        object.__setattr__(self, "words", words)
        for prev, cur in zip(words, words[1:]):
            if cur.t_start < prev.t_start:
                raise ValueError("words must be sorted by t_start")
            if cur.t_start < prev.t_end:
                raise ValueError(
                    f"words {prev.text!r} and {cur.text!r} overlap "
                    f"([{prev.t_start}, {prev.t_end}) vs [{cur.t_start}, {cur.t_end}))"
                )

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    @property
    def end(self) -> float:
        return self.words[-1].t_end if self.words else 0.0


@dataclass(frozen=True)
class DurationSpec:
    t_real: float
    t_max: float
    t_target: float

    def __post_init__(self):
        if min(self.t_real, self.t_max, self.t_target) <= 0:
            raise ValueError("durations must be strictly positive")
        if self.t_target != min(self.t_real, self.t_max):
            raise ValueError("t_target must equal min(t_real, t_max)")


def make_duration_spec(t_real: float, t_max: float) -> DurationSpec:
    if t_real <= 0 or t_max <= 0:
        raise ValueError(f"durations must be positive, got t_real={t_real}, t_max={t_max}")
    return DurationSpec(float(t_real), float(t_max), float(min(t_real, t_max)))


@dataclass(frozen=True, eq=False)
class StyleVec:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValueError("style vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, StyleVec):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class SyntheticSong:
    latent: LatentSeq
    lyrics: TimedLyrics
    style: StyleVec
    duration: DurationSpec
    seed: int
    style_seed: int = 0

    @property
    def valid_frames(self) -> int:
        return int(math.floor(self.duration.t_target * self.latent.frame_rate))


# ---------------------------------------------------------------- phonemizer


def letter_phonemes(text: str, n_phonemes: int = 24) -> tuple[int, ...]:
    """Default phonemizer: one phoneme per ASCII letter, wrapped into the alphabet."""
    return tuple((ord(ch) - ord("a")) % n_phonemes for ch in text.lower() if "a" <= ch <= "z")


def phonemes_to_text(phonemes: Iterable[int]) -> str:
    return "".join(chr(ord("a") + int(p)) for p in phonemes)


# ---------------------------------------------------------------- codebook


_CODEBOOKS: dict[tuple[int, int], np.ndarray] = {}


def _orthonormal(channels: int, seed: int) -> np.ndarray:
    key = (channels, seed)
    if key not in _CODEBOOKS:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
        q = q * np.sign(np.diag(r))
        q.flags.writeable = False
        _CODEBOOKS[key] = q.T
    return _CODEBOOKS[key]


def phoneme_codebook(config: WorldConfig) -> np.ndarray:
    """Mutually orthogonal code vectors of norm ``amplitude``, one row per phoneme."""
    return config.amplitude * _orthonormal(config.channels, config.codebook_seed)[: config.n_phonemes]


def style_basis(config: WorldConfig) -> np.ndarray:
    """(style_dim, channels) basis orthogonal to every phoneme code."""
    q = _orthonormal(config.channels, config.codebook_seed)
    return q[config.n_phonemes : config.n_phonemes + config.style_dim]


def style_offset(style: StyleVec, config: WorldConfig) -> np.ndarray:
    return config.amplitude * config.style_gain * (style.values @ style_basis(config))


def silence_threshold(config: WorldConfig) -> float:
    return 0.5 * float(np.linalg.norm(phoneme_codebook(config), axis=1).min())


# ---------------------------------------------------------------- generator


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def make_style(style_seed: int, config: WorldConfig) -> StyleVec:
    v = _rng(style_seed, 13).standard_normal(config.style_dim)
    return StyleVec(v / np.linalg.norm(v))


def draw_duration(seed: int, config: WorldConfig) -> float:
    lo, hi = config.duration_range
    return round(float(_rng(seed, 19).uniform(lo, hi)), 3)


def _draw_lyrics(rng: np.random.Generator, n_valid: int, config: WorldConfig) -> TimedLyrics:
    f = config.frame_rate
    words = []
    cursor = int(rng.integers(config.lead_frames[0], config.lead_frames[1] + 1))
    outro = int(rng.integers(config.outro_frames[0], config.outro_frames[1] + 1))
    # words end strictly inside the valid region so t_end < t_target
    limit = n_valid - 1 - outro
    while config.max_words is None or len(words) < config.max_words:
        span = int(rng.integers(config.word_frames[0], config.word_frames[1] + 1))
        if cursor + span > limit:
            break
        m = int(rng.integers(1, min(config.max_phonemes, span) + 1))
        phon = [int(rng.integers(config.n_phonemes))]
        while len(phon) < m:
            p = int(rng.integers(config.n_phonemes - 1))
            phon.append(p if p < phon[-1] else p + 1)  # no immediate repeats
        # quarter-frame offsets keep floor(t * f * r) away from rounding edges
        words.append(Word(phonemes_to_text(phon), tuple(phon), (cursor + 0.25) / f, (cursor + span + 0.25) / f))
        cursor += span + int(rng.integers(config.gap_frames[0], config.gap_frames[1] + 1))
    return TimedLyrics(tuple(words))


def frame_phonemes(lyrics: TimedLyrics, config: WorldConfig, frames: int) -> np.ndarray:
    """Active phoneme id per latent frame (SILENCE_ID where nothing is sung).

    Uses the average-sparse grid at r=1; a phoneme stays active over the
    vocal-filler cells that follow it inside its word.
    """
    from jamflow.lyricalign import AlignStrategy, build_grid

    grid = build_grid(lyrics, config.frame_rate, 1, frames, AlignStrategy.AVERAGE_SPARSE)
    tok = grid.tokens
    ids = np.where(tok >= kernels.PHONEME_OFFSET, tok - kernels.PHONEME_OFFSET, SILENCE_ID)
    src = np.where(tok == kernels.VOCAL_FILLER, 0, np.arange(tok.size))
    return ids[np.maximum.accumulate(src)] if tok.size else ids


def render_latent(
    lyrics: TimedLyrics, style: StyleVec, duration: DurationSpec, config: WorldConfig, noise_seed: int | None
) -> np.ndarray:
    frames = config.max_frames
    n_valid = min(frames, int(math.floor(duration.t_target * config.frame_rate)))
    ids = frame_phonemes(lyrics, config, frames)
    z = np.zeros((frames, config.channels))
    codes = phoneme_codebook(config)
    sung = ids >= 0
    z[sung] = codes[ids[sung]]
    z[:n_valid] += style_offset(style, config)
    if config.noise_sigma > 0 and noise_seed is not None:
        z[:n_valid] += config.amplitude * config.noise_sigma * _rng(noise_seed, 17).standard_normal((n_valid, config.channels))
    z[n_valid:] = 0.0
    return z


def synth_song(
    seed: int, config: WorldConfig = WorldConfig(), duration: float | None = None, style_seed: int | None = None
) -> SyntheticSong:
    """Generate one song deterministically from ``seed``.

    The latent always spans ``ceil(t_max * f)`` frames: a song longer than
    ``t_max`` is represented by its first ``t_max`` seconds.
    """
    t_real = draw_duration(seed, config) if duration is None else float(duration)
    style_seed = int(seed) if style_seed is None else int(style_seed)
    spec = make_duration_spec(t_real, config.t_max)
    n_valid = min(config.max_frames, int(math.floor(spec.t_target * config.frame_rate)))
    lyrics = _draw_lyrics(_rng(seed, 11), n_valid, config)
    style = make_style(style_seed, config)
    z = render_latent(lyrics, style, spec, config, noise_seed=seed)
    return SyntheticSong(LatentSeq(z, config.frame_rate), lyrics, style, spec, int(seed), style_seed)


# ---------------------------------------------------------------- codec


def decode_tokens(latent: LatentSeq | np.ndarray, config: WorldConfig) -> np.ndarray:
    """Nearest phoneme code per frame, or SILENCE_ID for quiet frames."""
    values = latent.values if isinstance(latent, LatentSeq) else np.asarray(latent, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != config.channels:
        raise ValueError(f"latent shape {values.shape} does not match codebook dimension {config.channels}")
    return kernels.nearest_code(values, phoneme_codebook(config), silence_threshold(config))


def pad_or_crop(latent: LatentSeq, t_max: float, offset: float = 0.0) -> LatentSeq:
    """Crop ``t_max`` seconds starting at ``offset``, right-padding with silence."""
    if offset < 0:
        raise ValueError("offset must be non-negative")
    n = frames_for(t_max, latent.frame_rate)
    start = int(math.floor(offset * latent.frame_rate + 1e-9))
    chunk = latent.values[start : start + n]
    out = np.zeros((n, latent.channels))
    out[: chunk.shape[0]] = chunk
    return LatentSeq(out, latent.frame_rate)


# ---------------------------------------------------------------- file formats


def write_lyrics_jsonl(lyrics: TimedLyrics, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in lyrics:
            fh.write(json.dumps({"w": w.text, "s": w.t_start, "e": w.t_end}) + "\n")


def read_lyrics_jsonl(
    path: str | Path, phonemizer: Callable[[str], Sequence[int]] | None = None, n_phonemes: int = 24
) -> TimedLyrics:
    phonemizer = phonemizer or (lambda text: letter_phonemes(text, n_phonemes))
    words = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                words.append(Word(obj["w"], tuple(phonemizer(obj["w"])), float(obj["s"]), float(obj["e"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad word record: {exc}") from exc
    return TimedLyrics(tuple(words))


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    duration: float
    style_seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "duration": self.duration, "style_seed": self.style_seed})


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                entries.append(ManifestEntry(int(obj["seed"]), float(obj["duration"]), int(obj["style_seed"])))
    return entries


def song_from_entry(entry: ManifestEntry, config: WorldConfig) -> SyntheticSong:
    return synth_song(entry.seed, config, duration=entry.duration, style_seed=entry.style_seed)


def make_manifest(n: int, seed: int, config: WorldConfig) -> list[ManifestEntry]:
    seeds = np.random.default_rng(np.random.SeedSequence([int(seed), 23])).integers(0, 2**31 - 1, size=n)
    out = []
    for s in seeds:
        s = int(s)
        out.append(ManifestEntry(s, draw_duration(s, config), int(_rng(s, 29).integers(0, 2**31 - 1))))
    return out
