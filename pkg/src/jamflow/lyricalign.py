"""Word-level phoneme grids, padding masks and beat quantization.

Grid cells are small integers: ``SONG_FILLER`` (0) where nothing is sung,
``VOCAL_FILLER`` (1) inside a word between phonemes, and ``phoneme + 2`` for
a phoneme onset. Spans are 0-indexed and half-open.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from jamflow import kernels
from jamflow.songworld import DurationSpec, TimedLyrics, Word

SONG_FILLER = kernels.SONG_FILLER
VOCAL_FILLER = kernels.VOCAL_FILLER
PHONEME_OFFSET = kernels.PHONEME_OFFSET

DEFAULT_UPSAMPLE = 2


class AlignStrategy(enum.Enum):
    AVERAGE_SPARSE = "average_sparse"
    PAD_RIGHT = "pad_right"


class DegenerateSpanError(ValueError):
    """A word covers less than one grid cell."""


class ShortSpanWarning(UserWarning):
    """A word has more phonemes than grid cells; the overflow was dropped."""


def phoneme_token(p: int) -> int:
    return int(p) + PHONEME_OFFSET


def glyph(token: int) -> str:
    if token == SONG_FILLER:
        return "s"
    if token == VOCAL_FILLER:
        return "v"
    return str(token - PHONEME_OFFSET)


@dataclass(frozen=True, eq=False)
class PhonemeGrid:
    tokens: np.ndarray
    upsample_rate: int
    latent_len: int
    frame_rate: float

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.shape != (self.upsample_rate * self.latent_len,):
            raise ValueError(
                f"grid length {tokens.shape} != r * l = {self.upsample_rate} * {self.latent_len}"
            )
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)

    def __len__(self):
        return self.tokens.size

    def render(self) -> str:
        return " ".join(glyph(int(t)) for t in self.tokens)

    def phoneme_sequence(self) -> list[int]:
        return [int(t) - PHONEME_OFFSET for t in self.tokens if t >= PHONEME_OFFSET]


@dataclass(frozen=True, eq=False)
class PadMask:
    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.size and np.any(flags[:-1] & ~flags[1:]):
            raise ValueError("pad mask must be a suffix (false* true*)")
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)


def word_frame_span(word: Word, f: float, r: int) -> tuple[int, int]:
    start = math.floor(word.t_start * f * r)
    end = math.floor(word.t_end * f * r)
    if end <= start:
        raise DegenerateSpanError(
            f"word {word.text!r} [{word.t_start}, {word.t_end}) s spans no grid cell at f={f}, r={r}"
        )
    return start, end


def build_grid(
    lyrics: TimedLyrics,
    f: float,
    r: int,
    l: int,
    strategy: AlignStrategy = AlignStrategy.AVERAGE_SPARSE,
) -> PhonemeGrid:
    length = r * l
    starts, ends, phon, offsets = [], [], [], [0]
    prev_end = 0
    for word in lyrics:
        s, e = word_frame_span(word, f, r)
        if e > length:
            raise ValueError(f"word {word.text!r} ends at cell {e}, beyond grid length {length}")
        if s < prev_end:
            raise ValueError(f"word {word.text!r} overlaps the previous word on the grid")
        m = len(word.phonemes)
        if e - s < m:
            warnings.warn(
                f"word {word.text!r}: {m} phonemes in {e - s} cells; keeping the first {e - s}",
                ShortSpanWarning,
                stacklevel=2,
            )
        starts.append(s)
        ends.append(e)
        phon.extend(word.phonemes)
        offsets.append(len(phon))
        prev_end = e
    tokens = kernels.fill_grid(
        length, starts, ends, phon, offsets, strategy is AlignStrategy.AVERAGE_SPARSE
    )
    return PhonemeGrid(tokens, r, l, f)


def build_pad_mask(spec: DurationSpec, f: float, l: int) -> PadMask:
    n_valid = math.floor(spec.t_target * f)
    if l < n_valid:
        raise ValueError(f"sequence of {l} frames is shorter than the target duration ({n_valid} frames)")
    return PadMask(np.arange(l) >= n_valid)


def pad_flags(t_target: float, f: float, l: int) -> np.ndarray:
    """Mask flags without the length precondition (for cropped windows)."""
    return np.arange(l) >= math.floor(t_target * f)


# ---------------------------------------------------------------- quantization

MAX_BPM = 120.0


def effective_bpm(bpm: float) -> float:
    if not bpm > 0:
        raise ValueError(f"bpm must be positive, got {bpm}")
    while bpm > MAX_BPM:
        bpm /= 2.0
    return bpm


def quarter_beat(bpm: float) -> float:
    """Seconds per quarter-beat after the tempo cap."""
    return 60.0 / effective_bpm(bpm) / 4.0


def _beat_count(t: float, bpm: float) -> int:
    """Largest ``n`` with ``n * q <= t`` in floating point."""
    q = quarter_beat(bpm)
    n = math.floor(t / (60.0 / effective_bpm(bpm)) * 4)
    while n * q > t:
        n -= 1
    while (n + 1) * q <= t:
        n += 1
    return n


def quantize_time(t: float, bpm: float) -> float:
    """Snap ``t`` down onto the quarter-beat grid; grid values map to themselves."""
    return _beat_count(t, bpm) * quarter_beat(bpm)


def quantize_timestamps(lyrics: TimedLyrics, bpm: float) -> TimedLyrics:
    # work in whole quarter-beat counts so every output time is exactly n * q
    q = quarter_beat(bpm)
    out = []
    prev_end = 0
    for w in lyrics:
        s = _beat_count(w.t_start, bpm)
        e = max(_beat_count(w.t_end, bpm), s + 1)
        if s < prev_end:
            # two words collapsed into one quarter-beat: keep them in order
            s, e = prev_end, prev_end + 1
        out.append(Word(w.text, w.phonemes, s * q, e * q))
        prev_end = e
    return TimedLyrics(tuple(out))
