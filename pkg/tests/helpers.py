"""Shared test utilities: the alignment oracle, finite-difference checks and DPO fixtures."""
import math

import numpy as np

from jamflow.lyricalign import PHONEME_OFFSET, SONG_FILLER, VOCAL_FILLER, AlignStrategy
from jamflow.prefalign import PreferencePair
from jamflow.songworld import TimedLyrics, Word

AVG = AlignStrategy.AVERAGE_SPARSE


def reference_grid(lyrics, f, r, l, strategy):
    """Word-level phoneme alignment, executed line by line on a Python list."""
    P = ["SONG_FILLER"] * (r * l)
    for word in lyrics:
        start_frame = math.floor(word.t_start * f * r)
        end_frame = math.floor(word.t_end * f * r)
        word_frames = end_frame - start_frame
        V = ["VOCAL_FILLER"] * word_frames
        m = len(word.phonemes)
        if word_frames < m:
            for j in range(word_frames):
                V[j] = word.phonemes[j]
        elif strategy is AVG:
            avg = word_frames // m
            for j in range(m):
                V[j * avg] = word.phonemes[j]
        else:
            for j in range(m):
                V[j] = word.phonemes[j]
        for i in range(word_frames):
            P[start_frame + i] = V[i]
    code = {"SONG_FILLER": SONG_FILLER, "VOCAL_FILLER": VOCAL_FILLER}
    return [code[x] if isinstance(x, str) else x + PHONEME_OFFSET for x in P]


def random_lyrics(rng, f, r, l, n_phonemes=24, allow_short=True):
    """Random non-overlapping words at quarter-cell offsets, all inside the grid."""
    cells = r * l
    words, cursor = [], int(rng.integers(0, 4))
    while True:
        span = int(rng.integers(1, 9))
        if cursor + span > cells:
            break
        hi = 6 if allow_short else min(6, span)
        m = int(rng.integers(1, hi + 1))
        ph = tuple(int(p) for p in rng.integers(0, n_phonemes, size=m))
        cell = 1.0 / (f * r)
        words.append(Word("w", ph, (cursor + 0.25) * cell, (cursor + span + 0.25) * cell))
        cursor += span + int(rng.integers(0, 4))
        if cursor >= cells:
            break
    # the last word may claim a quarter cell past the end; pull it back in
    if words and math.floor(words[-1].t_end * f * r) > cells:
        words.pop()
    return TimedLyrics(tuple(words))



def _perturb(model, direction, step):
    for k, d in direction.items():
        model.params[k].data = model.params[k].data + step * d


def directional_errors(model, loss_fn, rng, n_dirs=50, h=1e-6, groups=None):
    """Relative error of analytic vs central-difference directional derivatives.

    Each direction is a random unit vector over the parameters named in
    ``groups`` (all parameters by default).
    """
    names = list(groups or model.params)
    model.zero_grad()
    loss_fn().backward()
    grads = model.grads()
    errs = []
    for _ in range(n_dirs):
        d = {k: rng.standard_normal(model.params[k].data.shape) for k in names}
        norm = np.sqrt(sum(float((v * v).sum()) for v in d.values()))
        d = {k: v / norm for k, v in d.items()}
        analytic = sum(float((grads[k] * d[k]).sum()) for k in names)
        _perturb(model, d, h)
        up = float(loss_fn())
        _perturb(model, d, -2 * h)
        down = float(loss_fn())
        _perturb(model, d, h)
        fd = (up - down) / (2 * h)
        scale = max(abs(fd), abs(analytic), 1e-12)
        errs.append(abs(fd - analytic) / scale)
    return np.array(errs)


def make_pairs(rng, cond, channels, scale=1.0):
    """One synthetic preference pair per row of ``cond``."""
    frames = cond.frames
    return [
        PreferencePair(
            win=scale * rng.standard_normal((frames, channels)),
            loss=scale * rng.standard_normal((frames, channels)),
            cond=cond.take(i),
            win_score=4.0,
            loss_score=3.0,
            gt=scale * rng.standard_normal((frames, channels)),
        )
        for i in range(cond.batch)
    ]
