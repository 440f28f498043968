"""Loop-heavy kernels with paired numba / numpy implementations.

Each public kernel dispatches to ``*_nb`` (numba) or ``*_np`` (numpy) based on
:data:`jamflow._accel.USE_NUMBA`. Both variants are importable directly so the
parity tests and the benchmark can exercise them side by side.
"""
import numpy as np

from jamflow._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- levenshtein


@njit
def levenshtein_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            cur[j] = best
        prev, cur = cur, prev
    return prev[m]


def levenshtein_np(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return int(max(n, m))
    offsets = np.arange(m + 1)
    prev = offsets.copy()
    for i in range(1, n + 1):
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = i
        cand[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]))
        # insertion chain: cur[j] = min_k<=j cand[k] + (j - k)
        prev = np.minimum.accumulate(cand - offsets) + offsets
    return int(prev[m])


# ---------------------------------------------------------------- grid fill

SONG_FILLER = 0
VOCAL_FILLER = 1
PHONEME_OFFSET = 2


@njit
def fill_grid_nb(length, starts, ends, phonemes, offsets, sparse):
    out = np.zeros(length, dtype=np.int64)
    for w in range(starts.shape[0]):
        s = starts[w]
        e = ends[w]
        for i in range(s, e):
            out[i] = 1
        frames = e - s
        m = offsets[w + 1] - offsets[w]
        if sparse and frames >= m:
            step = frames // m
        else:
            step = 1
        count = m if m < frames else frames
        for j in range(count):
            out[s + j * step] = phonemes[offsets[w] + j] + 2
    return out


def fill_grid_np(length, starts, ends, phonemes, offsets, sparse):
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    phonemes = np.asarray(phonemes, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    out = np.zeros(length, dtype=np.int64)
    if starts.size == 0:
        return out
    edges = np.zeros(length + 1, dtype=np.int64)
    np.add.at(edges, starts, 1)
    np.add.at(edges, ends, -1)
    out[np.cumsum(edges[:-1]) > 0] = VOCAL_FILLER
    frames = ends - starts
    counts = np.diff(offsets)
    if sparse:
        step = np.where(frames >= counts, frames // np.maximum(counts, 1), 1)
    else:
        step = np.ones_like(frames)
    word_of = np.repeat(np.arange(starts.size), counts)
    j = np.arange(phonemes.size) - offsets[word_of]
    keep = j < frames[word_of]
    pos = starts[word_of] + j * step[word_of]
    out[pos[keep]] = phonemes[keep] + PHONEME_OFFSET
    return out


# ---------------------------------------------------------------- codebook decode

SILENCE_ID = -1


@njit
def nearest_code_nb(x, codebook, threshold):
    n, c = x.shape
    k = codebook.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        norm = 0.0
        for d in range(c):
            norm += x[i, d] * x[i, d]
        if np.sqrt(norm) < threshold:
            out[i] = -1
            continue
        best = 0
        best_d = np.inf
        for j in range(k):
            dist = 0.0
            for d in range(c):
                diff = x[i, d] - codebook[j, d]
                dist += diff * diff
            if dist < best_d:
                best_d = dist
                best = j
        out[i] = best
    return out


def nearest_code_np(x, codebook, threshold):
    x = np.asarray(x, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    d2 = ((x[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    out = np.argmin(d2, axis=1).astype(np.int64)
    out[np.sqrt((x * x).sum(-1)) < threshold] = SILENCE_ID
    return out


# ---------------------------------------------------------------- run collapse


@njit
def collapse_runs_nb(seq):
    n = seq.shape[0]
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if i == 0 or seq[i] != seq[i - 1]:
            out[k] = seq[i]
            k += 1
    return out[:k]


def collapse_runs_np(seq):
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        return seq.copy()
    keep = np.ones(seq.size, dtype=bool)
    keep[1:] = seq[1:] != seq[:-1]
    return seq[keep]


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    _lev, _fill, _near, _collapse = levenshtein_nb, fill_grid_nb, nearest_code_nb, collapse_runs_nb
else:
    _lev, _fill, _near, _collapse = levenshtein_np, fill_grid_np, nearest_code_np, collapse_runs_np


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two integer sequences."""
    return int(_lev(np.ascontiguousarray(a, dtype=np.int64), np.ascontiguousarray(b, dtype=np.int64)))


def fill_grid(length, starts, ends, phonemes, offsets, sparse) -> np.ndarray:
    """Write filler and phoneme tokens for pre-validated word spans.

    ``phonemes[offsets[w]:offsets[w+1]]`` are word ``w``'s phoneme ids. Under
    ``sparse`` phoneme ``j`` lands at ``start + j * (frames // m)``; otherwise
    (or when the span is shorter than ``m``) phonemes are packed from the
    start and any overflow is dropped.
    """
    return _fill(
        int(length),
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(ends, dtype=np.int64),
        np.ascontiguousarray(phonemes, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        bool(sparse),
    )


def nearest_code(x, codebook, threshold) -> np.ndarray:
    return _near(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(codebook, dtype=np.float64),
        float(threshold),
    )


def collapse_runs(seq) -> np.ndarray:
    return _collapse(np.ascontiguousarray(seq, dtype=np.int64))
