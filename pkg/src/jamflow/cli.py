"""``jamflow`` command line.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
(bad arguments or config, missing input files, invalid lyric timings).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from jamflow import checkpoint
from jamflow.config import ConfigError, RunConfig, from_flat, load_config
from jamflow.lyricalign import AlignStrategy, build_grid, quantize_timestamps
from jamflow.songworld import frames_for, make_duration_spec, read_lyrics_jsonl, write_lyrics_jsonl

log = logging.getLogger("jamflow")


class UsageError(Exception):
    pass


def _config(args, **extra) -> RunConfig:
    overrides = {"seed": args.seed, **extra}
    return load_config(args.config, **overrides)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _checkpoint_config(args, ckpt: Path, **extra) -> RunConfig:
    """The run config stored in a checkpoint, with --config and flags applied on top."""
    from jamflow.workflows import load_model

    _, meta, _ = load_model(ckpt)
    flat = dict(meta.get("run_config", {}))
    if args.config:
        try:
            flat.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
    flat.update({k: v for k, v in {"seed": args.seed, **extra}.items() if v is not None})
    return from_flat(flat)


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    from jamflow.workflows import synth_dataset

    cfg = load_config(args.config, data_seed=args.seed, n_songs=args.n)
    manifest = synth_dataset(cfg, args.out)
    print(f"wrote {cfg.n_songs} songs to {manifest}")
    return 0


def cmd_train(args) -> int:
    from jamflow.workflows import SongBank, Trainer, init_from_checkpoint, load_songs

    cfg = _config(args, stage=args.stage)
    manifest = _existing(args.data, "dataset manifest")
    bank = SongBank.from_songs(load_songs(manifest, cfg), cfg.model.upsample, AlignStrategy(cfg.train.strategy))
    if args.resume:
        trainer = Trainer.resume(_existing(args.resume, "checkpoint"), bank, cfg)
    else:
        model = init_from_checkpoint(cfg.model, _existing(args.init, "checkpoint")) if args.init else None
        trainer = Trainer(cfg, bank, model)
    log_path = Path(f"{args.out}.log.jsonl")
    if not args.resume:
        log_path.write_text("", encoding="utf-8")
    losses = trainer.run(stop_at=args.stop_at, log_path=log_path)
    trainer.save(args.out)
    tail = f", last loss {losses[-1]:.5f}" if losses else ""
    print(f"step {trainer.step}{tail}; checkpoint {args.out}")
    return 0


def cmd_sample(args) -> int:
    from jamflow.workflows import load_model, sample_song

    ckpt = _existing(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(args, ckpt)
    model, _, _ = load_model(ckpt)
    lyrics = read_lyrics_jsonl(_existing(args.lyrics, "lyrics file"), n_phonemes=cfg.world.n_phonemes)
    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    spec = make_duration_spec(args.duration, cfg.world.t_max)
    if lyrics.end > spec.t_target:
        raise UsageError(f"lyric timings end at {lyrics.end:g} s, beyond the duration {spec.t_target:g} s")
    seed = cfg.seed if args.seed is None else args.seed
    z, tokens = sample_song(model, lyrics, cfg, args.duration, args.style_seed, seed, args.steps, args.alpha_s, args.alpha_l)
    meta = {
        "kind": "jamflow-latent",
        "frame_rate": cfg.world.frame_rate,
        "duration": spec.t_target,
        "seed": seed,
        "style_seed": args.style_seed,
        "steps": args.steps,
        "cfg_scales": [args.alpha_s, args.alpha_l],
        "checkpoint": ckpt.name,
    }
    checkpoint.save(args.out, {"latent": z}, meta)
    Path(f"{args.out}.tokens.txt").write_text(" ".join("." if t < 0 else str(int(t)) for t in tokens) + "\n", encoding="utf-8")
    print(f"wrote {z.shape[0]} frames to {args.out}")
    return 0


def cmd_dpo(args) -> int:
    from jamflow.workflows import dpo_checkpoint, load_songs

    ckpt = _existing(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(args, ckpt, stage="dpo", **{"dpo.rounds": args.rounds, "dpo.lam": args.lam})
    songs = load_songs(_existing(args.data, "dataset manifest"), cfg)[: args.limit]
    stats = dpo_checkpoint(ckpt, args.out, songs, cfg)
    for s in stats:
        print(f"round {s['round']}: {s['pairs_kept']} pairs kept, {s['pairs_rejected']} rejected, loss {s['loss_first']:.4f} -> {s['loss_last']:.4f}")
    print(f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    from jamflow.evalkit import dump_report
    from jamflow.workflows import evaluate_checkpoint, load_songs

    ckpt = _existing(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(args, ckpt, stage="eval", **{"eval.seed": args.seed})
    songs = load_songs(_existing(args.data, "evaluation manifest"), cfg)[: args.limit]
    report = evaluate_checkpoint(ckpt, songs, cfg, run_id=args.run_id)
    Path(args.out).write_text(dump_report(report), encoding="utf-8")
    agg = report["aggregate"]
    print(f"{agg['n_samples']} samples, PER {agg['per']}, WER {agg['wer']}, oracle {agg['oracle_mean']}")
    return 0


def cmd_align(args) -> int:
    cfg = load_config(args.config)
    f = cfg.world.frame_rate
    lyrics = read_lyrics_jsonl(_existing(args.lyrics, "lyrics file"), n_phonemes=cfg.world.n_phonemes)
    frames = args.frames if args.frames is not None else frames_for(args.duration or cfg.world.t_max, f)
    try:
        grid = build_grid(lyrics, f, args.upsample, frames, AlignStrategy(args.strategy))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(grid.render())
    return 0


def cmd_quantize(args) -> int:
    lyrics = read_lyrics_jsonl(_existing(args.lyrics, "lyrics file"))
    if not args.bpm > 0:
        raise UsageError("--bpm must be positive")
    write_lyrics_jsonl(quantize_timestamps(lyrics, args.bpm), args.out)
    print(f"wrote {len(lyrics)} words to {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jamflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON run configuration")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)
        return p

    p = command("synth-data", cmd_synth_data, "write a synthetic dataset (manifest + lyric files)")
    p.add_argument("--n", type=int, help="number of songs (overrides n_songs)")

    p = command("train", cmd_train, "flow-matching training (pretrain or sft stage)")
    p.add_argument("--data", required=True, help="dataset manifest.jsonl")
    p.add_argument("--stage", choices=["pretrain", "sft"])
    p.add_argument("--init", help="warm-start parameters from this checkpoint")
    p.add_argument("--resume", help="continue an interrupted run from this checkpoint")
    p.add_argument("--stop-at", type=int, help="stop after this optimizer step")

    p = command("sample", cmd_sample, "generate one latent from lyrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lyrics", required=True)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--style-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--alpha-s", type=float, default=1.0)
    p.add_argument("--alpha-l", type=float, default=1.0)

    p = command("dpo", cmd_dpo, "preference-optimisation rounds on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--lam", type=float, help="weight of the ground-truth term (0 for plain DPO)")
    p.add_argument("--limit", type=int, help="use only the first N prompts")

    p = command("eval", cmd_eval, "evaluate a checkpoint and write a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run-id", default="eval")
    p.add_argument("--limit", type=int)

    p = command("align", cmd_align, "print the phoneme grid for a lyric file", out=False)
    p.add_argument("--lyrics", required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--upsample", type=int, default=2)
    p.add_argument("--strategy", choices=[s.value for s in AlignStrategy], default=AlignStrategy.AVERAGE_SPARSE.value)

    p = command("quantize", cmd_quantize, "snap word timings to quarter beats")
    p.add_argument("--lyrics", required=True)
    p.add_argument("--bpm", type=float, required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"jamflow {args.command}: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"jamflow {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
