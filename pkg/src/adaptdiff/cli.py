"""Command line entry point: ``adaptdiff <command> [flags]``.

Commands chain through checkpoint files::

    adaptdiff gen-data  --out train.gtd
    adaptdiff pretrain  --data train.gtd --out pre.ckpt
    adaptdiff cfg-train --checkpoint pre.ckpt --out cfg.ckpt
    adaptdiff gen-data  --split heldout --out refs.gtd
    adaptdiff finetune  --checkpoint cfg.ckpt --reference refs.gtd --out ft.ckpt
    adaptdiff sample    --checkpoint ft.ckpt --reference refs.gtd --out sample.gtd   # + sample.gtd.diagnostics.csv
    adaptdiff sweep     --checkpoint cfg.ckpt --reference refs.gtd --out sweep.csv
    adaptdiff eval      --checkpoint cfg.ckpt --out metrics.csv
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .config import Config, ConfigError
from .experiment import (
    Voice,
    build_world,
    cfg_train_voice,
    eval_case,
    finetune_voice,
    guidance_config,
    pretrain_voice,
    run_experiment,
    sampler_config,
    training_corpus,
)
from .numerics import Rng
from .storage import CheckpointError, atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .synthesis import SynthesisRequest, gamma_sweep, sweep_csv, synthesize
from .toyworld import Utterance, spans_from_durations

COMMANDS = ("gen-data", "pretrain", "cfg-train", "finetune", "sample", "sweep", "eval")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--checkpoint", metavar="PATH", help="input checkpoint")
    common.add_argument("--out", metavar="PATH", help="output file")
    common.add_argument("--gamma-s", type=float, help="speaker guidance scale (default 1.0)")
    common.add_argument("--gamma-t", type=float, help="text guidance scale (default 0.3)")
    common.add_argument("--steps", type=int, help="reverse diffusion steps")
    common.add_argument("--temperature", type=float, help="prior temperature")
    common.add_argument("--iterations", type=int, help="training iterations for this command")
    common.add_argument("--reference", metavar="PATH", help="dataset file holding the reference clip(s)")
    common.add_argument("--data", metavar="PATH", help="training dataset file (pretrain, cfg-train)")
    common.add_argument("--split", choices=("train", "heldout"), default="train", help="gen-data split")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adaptdiff", description="Toy adaptive diffusion speech pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "gen-data": "write a toy-world dataset file",
        "pretrain": "train auxiliary models and the conditional score network",
        "cfg-train": "continue training with null-condition dropout",
        "finetune": "adapt a checkpoint to the reference speaker",
        "sample": "synthesize one utterance for the reference speaker",
        "sweep": "speaker-scale sweep, metrics as CSV",
        "eval": "run the configured experiment grids, metrics as CSV",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    return cfg.with_overrides(seed=args.seed, gamma_s=args.gamma_s, gamma_t=args.gamma_t, steps=args.steps,
                              temperature=args.temperature)


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _voice(args, cfg: Config) -> Voice:
    return Voice.from_arrays(load_checkpoint(args.checkpoint), cfg)


def _references(path) -> list[Utterance]:
    utts, _ = load_dataset(path)
    if not utts:
        raise ValueError(f"{path}: no utterances")
    return [u for u in utts if u.speaker == utts[0].speaker]


def _corpus(args) -> Optional[list[Utterance]]:
    return load_dataset(args.data)[0] if args.data else None


def cmd_gen_data(args, cfg: Config) -> None:
    _need(args, "out")
    world = build_world(cfg)
    if args.split == "train":
        utts = training_corpus(world, cfg)
    else:
        utts = [eval_case(world, cfg, r)[0] for r in range(len(world.heldout_speakers))]
    table = {s: world.embedding(s) for s in sorted({u.speaker for u in utts})}
    save_dataset(args.out, utts, world.C, world.K, table)
    print(f"wrote {len(utts)} utterances to {args.out}")


def cmd_pretrain(args, cfg: Config) -> None:
    _need(args, "out")
    if args.iterations is not None:
        cfg = cfg.with_overrides(iterations=args.iterations)
    voice = pretrain_voice(cfg, _corpus(args), on_log=print)
    save_checkpoint(args.out, voice.to_arrays())


def cmd_cfg_train(args, cfg: Config) -> None:
    _need(args, "checkpoint", "out")
    if args.iterations is not None:
        cfg = cfg.with_overrides(cfg_iterations=args.iterations)
    voice = _voice(args, cfg)
    save_checkpoint(args.out, cfg_train_voice(voice, _corpus(args), on_log=print).to_arrays())


def cmd_finetune(args, cfg: Config) -> None:
    _need(args, "checkpoint", "reference", "out")
    voice = _voice(args, cfg)
    refs = _references(args.reference)
    adapted, _ = finetune_voice(voice, refs, args.iterations, reset_optimizer=cfg.reset_optimizer)
    save_checkpoint(args.out, adapted.to_arrays())
    print(f"fine-tuned {args.iterations or voice.config.finetune_iterations} iterations on speaker {refs[0].speaker}")


def _text(voice: Voice, cfg: Config) -> np.ndarray:
    if cfg.text:
        return np.asarray(cfg.text, dtype=np.int64)
    return voice.world.random_phonemes(cfg.text_phonemes, Rng(cfg.seed).stream("cli", "text"))


def cmd_sample(args, cfg: Config) -> None:
    _need(args, "checkpoint", "reference", "out")
    voice = _voice(args, cfg)
    ref = _references(args.reference)[0]
    req = SynthesisRequest(_text(voice, cfg), reference=ref, guidance=guidance_config(voice.config),
                           sampler=sampler_config(voice.config), adapted_model=voice.stage == "finetune")
    out = synthesize(req, voice.models(), Rng(voice.config.seed).child("cli", "sample"))
    utt = Utterance(out.frames, req.phonemes, spans_from_durations(out.durations), ref.speaker)
    save_dataset(args.out, [utt], voice.world.C, voice.world.K, {ref.speaker: out.embedding})
    atomic_write(f"{args.out}.diagnostics.csv", out.diagnostics_csv())
    ev = voice.evaluator()
    print(f"frame_error={ev.frame_error(out.frames, out.labels, ref.speaker):.4f} "
          f"similarity={ev.similarity(out.frames, ref):.4f} frames={len(utt)}")


def cmd_sweep(args, cfg: Config) -> None:
    _need(args, "checkpoint", "reference", "out")
    voice = _voice(args, cfg)
    c = voice.config
    ref = _references(args.reference)[0]
    req = SynthesisRequest(_text(voice, c), reference=ref, guidance=guidance_config(c), sampler=sampler_config(c))
    rows = gamma_sweep(req, voice.models(), voice.evaluator(), Rng(c.seed).child("cli", "sweep"),
                       gammas=c.grid_gamma_s, runs=c.runs)
    atomic_write(args.out, sweep_csv(rows))


def cmd_eval(args, cfg: Config) -> None:
    _need(args, "checkpoint", "out")
    if args.iterations is not None:
        cfg = cfg.with_overrides(finetune_iterations=args.iterations)
    voice = _voice(args, cfg)
    run_experiment(voice, args.out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "cfg-train": cmd_cfg_train,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        HANDLERS[args.command](args, _config(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adaptdiff: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"adaptdiff {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
