"""Numba vs numpy timings for the loop kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is called once before timing so numba compilation is excluded.
Both backends are checked to agree before their timings are reported.
"""
import argparse
import json
import time

import numpy as np

from jamflow import kernels
from jamflow._accel import HAS_NUMBA
from jamflow.songworld import WorldConfig, make_manifest, phoneme_codebook, silence_threshold, song_from_entry


def _best(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    world = WorldConfig()
    a = rng.integers(0, 24, size=400)
    b = rng.integers(0, 24, size=420)
    song = song_from_entry(make_manifest(1, 0, world)[0], world)
    latent = song.latent.values
    codes = phoneme_codebook(world)
    thr = silence_threshold(world)

    starts, ends, phon, offsets = [], [], [], [0]
    cell = 0
    for _ in range(2000):
        span = int(rng.integers(2, 12))
        m = int(rng.integers(1, 5))
        starts.append(cell)
        ends.append(cell + span)
        phon.extend(rng.integers(0, 24, size=m).tolist())
        offsets.append(len(phon))
        cell += span + int(rng.integers(0, 4))
    grid_args = (cell, np.array(starts), np.array(ends), np.array(phon), np.array(offsets), True)
    runs = np.repeat(rng.integers(-1, 24, size=5000), rng.integers(1, 6, size=5000))
    return {
        "levenshtein (400x420)": ("levenshtein", (a, b)),
        "fill_grid (2000 words)": ("fill_grid", grid_args),
        f"nearest_code ({latent.shape[0]}x{latent.shape[1]})": ("nearest_code", (latent, codes, thr)),
        f"collapse_runs ({runs.size})": ("collapse_runs", (runs,)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json")
    args = parser.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rows = []
    for label, (name, fargs) in cases(np.random.default_rng(0)).items():
        nb, npf = getattr(kernels, f"{name}_nb"), getattr(kernels, f"{name}_np")
        out_nb, out_np = nb(*fargs), npf(*fargs)
        if not np.array_equal(np.asarray(out_nb), np.asarray(out_np)):
            raise SystemExit(f"{name}: backends disagree")
        t_nb, t_np = _best(nb, fargs, args.repeat), _best(npf, fargs, args.repeat)
        rows.append({"kernel": label, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})

    print(f"{'kernel':32s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:32s} {r['numba_s'] * 1e6:9.1f}us {r['numpy_s'] * 1e6:9.1f}us {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
