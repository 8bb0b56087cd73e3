"""Experiment orchestration: build and persist a voice, then run the evaluation grids.

A :class:`Voice` bundles every trained component together with the toy world it
was trained on. It maps to a flat checkpoint (``score.*``, ``classifier.*``,
``duration.*``, ``spkenc.*``, ``opt.*`` and ``meta.*`` arrays) so each pipeline
stage can be run as a separate command.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .aux_models import DurationPredictor, OracleEncoder, PhonemeClassifier, TrainedEncoder
from .config import Config
from .guidance import GuidanceConfig
from .numerics import AdamState, Rng
from .score_models import ConditionalScoreNet
from .sde import NoiseSchedule, ReverseSamplerConfig
from .storage import CheckpointError, atomic_write
from .synthesis import SynthesisRequest, ToyEvaluator, VoiceModels, synthesize
from .toyworld import ToyWorld, Utterance, gen_world
from .training import TrainConfig, UtteranceCorpus, cfg_stage, finetune, pretrain

log = logging.getLogger(__name__)

__all__ = [
    "Voice",
    "build_world",
    "training_corpus",
    "eval_case",
    "pretrain_voice",
    "cfg_train_voice",
    "finetune_voice",
    "sampler_config",
    "guidance_config",
    "run_experiment",
    "CSV_COLUMNS",
    "EXPERIMENTS",
]

CSV_COLUMNS = ("experiment", "gamma_s", "gamma_t", "iterations", "reset_optimizer", "frame_error", "similarity",
               "seed")
EXPERIMENTS = ("finetune_sweep", "gamma_sweep")
STAGES = ("pretrain_conditional", "cfg_stage", "finetune")

# config keys that fix the world and the architectures; stored with every checkpoint
_META_INT = ("seed", "num_speakers", "num_heldout", "phonemes", "channels", "embed_dim", "hidden", "depth")
_META_FLOAT = ("sigma_obs", "jitter", "beta0", "beta1")
META_FORMAT = 1


def build_world(cfg: Config) -> ToyWorld:
    return gen_world(cfg.seed, num_speakers=cfg.num_speakers, K=cfg.phonemes, C=cfg.channels, d=cfg.embed_dim,
                     num_heldout=cfg.num_heldout, sigma_obs=cfg.sigma_obs, jitter=cfg.jitter)


def training_corpus(world: ToyWorld, cfg: Config) -> list[Utterance]:
    return world.corpus(world.train_speakers, cfg.utterances_per_speaker, Rng(cfg.seed).stream("corpus"))


def eval_case(world: ToyWorld, cfg: Config, run: int) -> tuple[Utterance, np.ndarray]:
    """Reference clip and target text for evaluation run ``run``; speakers cycle over the held-out set."""
    speaker = world.heldout_speakers[run % len(world.heldout_speakers)]
    g = Rng(cfg.seed).stream("eval", "case", run)
    reference = world.render(speaker, world.random_phonemes(cfg.reference_phonemes, g), g)
    text = np.asarray(cfg.text, dtype=np.int64) if cfg.text else world.random_phonemes(cfg.text_phonemes, g)
    return reference, text


def sampler_config(cfg: Config) -> ReverseSamplerConfig:
    return ReverseSamplerConfig(cfg.steps, cfg.temperature, cfg.noise_at_every_step)


def guidance_config(cfg: Config, **kw) -> GuidanceConfig:
    return replace(GuidanceConfig(cfg.gamma_s, cfg.gamma_t, cfg.guidance_mode), **kw)


@dataclass
class Voice:
    config: Config
    world: ToyWorld
    score: ConditionalScoreNet
    classifier: PhonemeClassifier
    duration: DurationPredictor
    judge: TrainedEncoder  # similarity proxy only; never used for conditioning
    optimizer: Optional[AdamState] = None
    stage: str = "pretrain_conditional"

    @property
    def encoder(self) -> OracleEncoder:
        return OracleEncoder(self.world)

    def models(self, score: Optional[ConditionalScoreNet] = None) -> VoiceModels:
        return VoiceModels(score or self.score, self.classifier, self.duration, self.encoder)

    def evaluator(self) -> ToyEvaluator:
        return ToyEvaluator(self.world, self.judge)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"meta.format": np.array(float(META_FORMAT))}
        for k in _META_INT + _META_FLOAT:
            out[f"meta.{k}"] = np.array(float(self.config[k]))
        out["meta.stage"] = np.array(float(STAGES.index(self.stage)))
        for model in (self.score, self.classifier, self.duration, self.judge):
            out.update(model.params)
        if self.optimizer is not None:
            o = self.optimizer
            out["opt.hyper"] = np.array([o.lr, o.beta1, o.beta2, o.eps, float(o.step)])
            out.update({f"opt.m.{k}": a for k, a in o.m.items()})
            out.update({f"opt.v.{k}": a for k, a in o.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: Optional[Config] = None) -> "Voice":
        """Rebuild from checkpoint arrays; world and architecture keys come from the checkpoint."""
        if "meta.format" not in arrays:
            raise CheckpointError("checkpoint carries no voice metadata")
        if int(arrays["meta.format"]) != META_FORMAT:
            raise CheckpointError(f"unsupported voice metadata format {int(arrays['meta.format'])}")
        cfg = Config(dict((config or Config()).values))
        for k in _META_INT:
            cfg.set(k, int(arrays[f"meta.{k}"]))
        for k in _META_FLOAT:
            cfg.set(k, float(arrays[f"meta.{k}"]))
        world = build_world(cfg)
        schedule = NoiseSchedule(cfg.beta0, cfg.beta1)
        models = (
            ConditionalScoreNet(cfg.channels, cfg.embed_dim, cfg.hidden, cfg.depth, schedule),
            PhonemeClassifier(cfg.channels, cfg.phonemes, cfg.embed_dim, schedule=schedule),
            DurationPredictor(cfg.phonemes, cfg.embed_dim),
            TrainedEncoder(cfg.channels, cfg.embed_dim),
        )
        for m in models:
            m.params = {k: a.copy() for k, a in arrays.items() if k.startswith(m.prefix)}
            if not m.params:
                raise CheckpointError(f"checkpoint has no {m.prefix}* arrays")
        optimizer = None
        if "opt.hyper" in arrays:
            lr, b1, b2, eps, step = arrays["opt.hyper"]
            m = {k[6:]: a.copy() for k, a in arrays.items() if k.startswith("opt.m.")}
            v = {k[6:]: a.copy() for k, a in arrays.items() if k.startswith("opt.v.")}
            optimizer = AdamState(float(lr), float(b1), float(b2), float(eps), int(step), m, v)
        stage = STAGES[int(arrays["meta.stage"])]
        return cls(cfg, world, *models, optimizer=optimizer, stage=stage)


def pretrain_voice(cfg: Config, corpus: Optional[Sequence[Utterance]] = None,
                   on_log: Callable[[str], None] = log.info) -> Voice:
    """Train the auxiliary models and the speaker-conditional score network from scratch."""
    rng = Rng(cfg.seed)
    world = build_world(cfg)
    corpus = list(corpus) if corpus is not None else training_corpus(world, cfg)
    oracle = OracleEncoder(world)
    schedule = NoiseSchedule(cfg.beta0, cfg.beta1)

    clf = PhonemeClassifier(cfg.channels, cfg.phonemes, cfg.embed_dim, schedule=schedule)
    losses = clf.train(corpus, oracle, rng, iterations=cfg.classifier_iterations)
    on_log(f"classifier: final loss {np.mean(losses[-50:]):.4f}")
    dur = DurationPredictor(cfg.phonemes, cfg.embed_dim)
    losses = dur.train(corpus, oracle, rng, iterations=cfg.duration_iterations)
    on_log(f"duration: final loss {np.mean(losses[-50:]):.4f}")
    judge = TrainedEncoder(cfg.channels, cfg.embed_dim)
    losses = judge.train(world, rng, iterations=cfg.encoder_iterations)
    on_log(f"encoder: final loss {np.mean(losses[-50:]):.4f}")

    net = ConditionalScoreNet(cfg.channels, cfg.embed_dim, cfg.hidden, cfg.depth, schedule)
    net.init_params(rng.stream("score", "init"))
    tc = TrainConfig("pretrain_conditional", lr=cfg.lr, iterations=cfg.iterations, batch=cfg.batch,
                     crop_frames=cfg.crop_frames, t_min=cfg.t_min, weighting=cfg.loss_weighting)
    res = pretrain(UtteranceCorpus(corpus, oracle, crop=cfg.crop_frames), net, tc, rng)
    net.params = res.params
    on_log(f"pretrain: {len(res.report.losses)} steps, final loss {np.mean(res.report.losses[-50:]):.4f}")
    return Voice(cfg, world, net, clf, dur, judge, res.optimizer, "pretrain_conditional")


def cfg_train_voice(voice: Voice, corpus: Optional[Sequence[Utterance]] = None,
                    on_log: Callable[[str], None] = log.info) -> Voice:
    """Continue training with null-condition dropout; keeps the optimizer state for the 'load' arm."""
    cfg = voice.config
    corpus = list(corpus) if corpus is not None else training_corpus(voice.world, cfg)
    tc = TrainConfig("cfg_stage", lr=cfg.cfg_lr, iterations=cfg.cfg_iterations, batch=cfg.batch,
                     dropout_p=cfg.dropout_p, crop_frames=cfg.crop_frames, t_min=cfg.t_min,
                     weighting=cfg.loss_weighting)
    data = UtteranceCorpus(corpus, voice.encoder, crop=cfg.crop_frames)
    res = cfg_stage(data, voice.score, tc, Rng(cfg.seed).child("cfg_stage"), optimizer=voice.optimizer)
    on_log(f"cfg stage: {len(res.report.losses)} steps, final loss {np.mean(res.report.losses[-50:]):.4f}")
    return replace(voice, score=voice.score.with_params(res.params), optimizer=res.optimizer, stage="cfg_stage")


def _finetune_config(cfg: Config, iterations: int, reset: bool) -> TrainConfig:
    return TrainConfig.for_finetune(lr=cfg.finetune_lr, iterations=iterations, batch=cfg.finetune_batch,
                                    crop_frames=cfg.crop_frames, t_min=cfg.t_min, weighting=cfg.loss_weighting,
                                    reset_optimizer=reset)


def finetune_voice(voice: Voice, reference: Sequence[Utterance] | Utterance, iterations: Optional[int] = None,
                   reset_optimizer: bool = True, rng: Optional[Rng] = None,
                   snapshots: Sequence[int] = ()) -> tuple[Voice, dict[int, dict]]:
    """Adapt to the reference speaker. Returns the adapted voice and parameter snapshots keyed by iteration."""
    cfg = voice.config
    iterations = cfg.finetune_iterations if iterations is None else iterations
    refs = [reference] if isinstance(reference, Utterance) else list(reference)
    emb = voice.encoder.encode_speaker(refs[0])
    want = set(snapshots)
    snaps = {0: voice.score.params} if 0 in want else {}

    def keep(it, params):
        if it + 1 in want:
            snaps[it + 1] = params

    res = finetune(refs, voice.score, emb, _finetune_config(cfg, iterations, reset_optimizer),
                   rng or Rng(cfg.seed).child("finetune"), optimizer=voice.optimizer, on_step=keep)
    return replace(voice, score=voice.score.with_params(res.params), optimizer=res.optimizer, stage="finetune"), snaps


def _evaluate(voice: Voice, score: ConditionalScoreNet, reference: Utterance, text: np.ndarray,
              guidance: GuidanceConfig, rng: Rng) -> tuple[float, float]:
    req = SynthesisRequest(text, reference=reference, guidance=guidance, sampler=sampler_config(voice.config))
    out = synthesize(req, voice.models(score), rng)
    ev = voice.evaluator()
    return ev.frame_error(out.frames, out.labels, reference.speaker), ev.similarity(out.frames, reference)


def _cells(cfg: Config) -> list[tuple[str, float, int, bool]]:
    """(experiment, gamma_s, iterations, reset_optimizer) in output order."""
    cells = []
    for name in cfg.experiment:
        if name == "finetune_sweep":
            for arm in cfg.grid_optimizer:
                if arm not in ("init", "load"):
                    raise ValueError(f"unknown optimizer arm {arm!r}")
                cells += [(name, cfg.gamma_s, int(n), arm == "init") for n in cfg.grid_iterations]
        elif name == "gamma_sweep":
            for n in (0, cfg.finetune_iterations):
                cells += [(name, float(g), n, True) for g in cfg.grid_gamma_s]
        else:
            raise ValueError(f"unknown experiment {name!r}")
    return cells


def _format_row(cell, fe: float, sim: float, cfg: Config) -> list[str]:
    name, gamma_s, iters, reset = cell
    return [name, repr(float(gamma_s)), repr(float(cfg.gamma_t)), str(iters), "true" if reset else "false",
            repr(fe), repr(sim), str(cfg.seed)]


def run_experiment(voice: Voice, out_path=None, config: Optional[Config] = None) -> str:
    """Evaluate every grid cell and return the metrics CSV text.

    Each cell averages ``runs`` seeded cases (reference, text, fine-tuning and
    sampling streams). When ``out_path`` is given, rows are appended to it one
    cell at a time with an atomic rewrite, so an interrupted run keeps every
    completed row.
    """
    cfg = config or voice.config
    voice = replace(voice, config=cfg)
    cells = _cells(cfg)
    if any(not reset for _, _, _, reset in cells) and voice.optimizer is None:
        raise ValueError("the 'load' arm needs a checkpoint with optimizer state")

    header = io.StringIO()
    csv.writer(header, lineterminator="\n").writerow(CSV_COLUMNS)
    text = header.getvalue()
    prior = ""
    if out_path is not None and Path(out_path).exists():
        prior = Path(out_path).read_text(encoding="utf-8")
        if prior and not prior.startswith(text):
            raise ValueError(f"{out_path} exists with a different header")
    if out_path is not None:
        atomic_write(out_path, prior or text)

    # fine-tune once per (run, arm) up to the largest iteration count needed
    need: dict[bool, set[int]] = {}
    for _, _, iters, reset in cells:
        need.setdefault(reset, set()).add(iters)
    cases = [eval_case(voice.world, cfg, r) for r in range(cfg.runs)]
    snaps: dict[tuple[int, bool], dict[int, dict]] = {}

    def params_for(run: int, reset: bool, iters: int) -> dict:
        if iters == 0:
            return voice.score.params
        key = (run, reset)
        if key not in snaps:
            reference = cases[run][0]
            _, snaps[key] = finetune_voice(voice, reference, max(need[reset]), reset, Rng(cfg.seed).child(
                "eval", "finetune", run), snapshots=sorted(need[reset]))
        return snaps[key][iters]

    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    for cell in cells:
        _, gamma_s, iters, reset = cell
        fe, sim = [], []
        for r, (reference, text_ids) in enumerate(cases):
            score = voice.score.with_params(params_for(r, reset, iters))
            f, s = _evaluate(voice, score, reference, text_ids, guidance_config(cfg, gamma_s=gamma_s),
                             Rng(cfg.seed).child("eval", "synth", r))
            fe.append(f)
            sim.append(s)
        row = _format_row(cell, float(np.mean(fe)) if fe else float("nan"),
                          float(np.mean(sim)) if sim else float("nan"), cfg)
        writer.writerow(row)
        if out_path is not None:
            line = io.StringIO()
            csv.writer(line, lineterminator="\n").writerow(row)
            prior = Path(out_path).read_text(encoding="utf-8")
            atomic_write(out_path, prior + line.getvalue())
        log.info("cell %s done", row[:5])
    return text + rows.getvalue()
