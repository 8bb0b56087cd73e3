"""Denoising score training: conditional pretraining, null-condition dropout stage, and few-step fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .numerics import AdamState, DivergenceError, Rng, Tape, adam_step, checksum, watch_all
from .score_models import ConditionalScoreNet, NullEmbeddingError
from .sde import NoiseSchedule, forward_marginal
from .toyworld import Utterance

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainResult",
    "score_loss",
    "UtteranceCorpus",
    "ReferenceCrops",
    "pretrain",
    "cfg_stage",
    "finetune",
]

STAGES = ("pretrain_conditional", "cfg_stage", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain_conditional"
    lr: float = 1e-4
    iterations: int = 2000
    batch: int = 16
    dropout_p: float = 0.5
    reset_optimizer: bool = True
    crop_frames: int = 32
    t_min: float = 1e-4
    # "lambda": each sample's squared error times lambda(t); "none": plain squared error
    weighting: str = "lambda"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.weighting not in ("none", "lambda"):
            raise ValueError("weighting must be 'none' or 'lambda'")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")

    @classmethod
    def for_finetune(cls, **kw) -> "TrainConfig":
        base = dict(stage="finetune", lr=2e-5, iterations=500, batch=8, dropout_p=0.0, reset_optimizer=True)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "wall_ms"])
        for i, (l, ms) in enumerate(zip(self.losses, self.wall_ms)):
            w.writerow([i, repr(float(l)), f"{ms:.3f}"])
        return buf.getvalue()


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    report: TrainReport
    optimizer: AdamState


class TrainingData(Protocol):
    def batch(self, gen: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]: ...


def score_loss(
    model,
    params: dict[str, np.ndarray],
    x0: np.ndarray,
    e: Optional[np.ndarray],
    gen: Optional[np.random.Generator] = None,
    *,
    null_mask: Optional[np.ndarray] = None,
    t: Optional[np.ndarray] = None,
    eps: Optional[np.ndarray] = None,
    schedule: Optional[NoiseSchedule] = None,
    t_min: float = 1e-4,
    weighting: str = "none",
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean of |s(x_t | cond) + eps_t / lambda(t)|^2 and its parameter gradients.

    ``eps_t = sqrt(lambda(t)) * eps`` is the corruption actually added to the
    scaled data, so the regression target ``-eps_t / lambda(t)`` is the score of
    the forward transition kernel. ``t`` and ``eps`` are drawn from ``gen`` unless
    given explicitly.
    """
    schedule = schedule or getattr(model, "schedule", NoiseSchedule())
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if t is None:
        t = gen.uniform(t_min, 1.0, B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if eps is None:
        eps = gen.standard_normal(x0.shape)
    lam = schedule.lambda_t(t).reshape((B,) + (1,) * (x0.ndim - 1))
    x_t = forward_marginal(x0, t, eps, schedule)
    target = eps / np.sqrt(lam)  # = lambda^-1 * eps_t
    w = (lam if weighting == "lambda" else np.ones_like(lam)) / B

    tape = Tape()
    with tape:
        p = watch_all(tape, params)
        s = model.apply(p, x_t, t, e, null_mask)
        r = s + target
        loss = (r * r * w).sum()
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss; t range [{t.min():.3g}, {t.max():.3g}]")
    names = list(params)
    grads = tape.gradient(loss, [p[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


class UtteranceCorpus:
    """Random fixed-length crops from utterances, each tagged with its speaker embedding."""

    def __init__(self, utterances: Sequence[Utterance], embed: Callable[[Utterance], np.ndarray], crop: int = 32):
        if not utterances:
            raise ValueError("empty corpus")
        self.utterances = list(utterances)
        self.embeddings = [np.asarray(embed(u), dtype=np.float64) for u in self.utterances]
        lengths = np.array([len(u) for u in self.utterances])
        self.crop = int(min(crop, lengths.max()))
        self.eligible = np.flatnonzero(lengths >= self.crop)

    def batch(self, gen: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = gen.choice(self.eligible, size=size)
        xs, es = [], []
        for i in idx:
            u = self.utterances[i]
            start = int(gen.integers(0, len(u) - self.crop + 1))
            xs.append(u.frames[start : start + self.crop])
            es.append(self.embeddings[i])
        return np.stack(xs), np.stack(es)


class ReferenceCrops(UtteranceCorpus):
    """Crops from a target speaker's reference clip(s) under one frozen embedding."""

    def __init__(self, references: Sequence[Utterance] | Utterance, embedding: np.ndarray, crop: int = 32):
        refs = [references] if isinstance(references, Utterance) else list(references)
        longest = max(len(u) for u in refs)
        # a reference shorter than one crop is used whole at every step
        super().__init__(refs, lambda u: embedding, crop=min(crop, longest))


def _run(
    net: ConditionalScoreNet,
    params: dict[str, np.ndarray],
    data: TrainingData,
    config: TrainConfig,
    rng: Rng,
    dropout_p: float,
    optimizer: Optional[AdamState] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> TrainResult:
    # stream names do not depend on the stage, so with dropout_p=0 the cfg stage replays pretraining exactly
    stage = config.stage
    g_data, g_noise, g_drop = rng.stream("train", "data"), rng.stream("train", "noise"), rng.stream("train", "dropout")
    state = optimizer.copy() if optimizer is not None else AdamState(lr=config.lr)
    state.lr = config.lr
    params = dict(params)
    report = TrainReport()
    start = time.perf_counter()
    initial, above = None, 0
    for it in range(config.iterations):
        tic = time.perf_counter()
        x0, e = data.batch(g_data, config.batch)
        mask = g_drop.random(config.batch) < dropout_p if dropout_p > 0 else None
        try:
            loss, grads = score_loss(net, params, x0, e, g_noise, null_mask=mask, t_min=config.t_min,
                                     weighting=config.weighting)
        except NullEmbeddingError:
            key = net.prefix + "null_w"
            params[key] = rng.stream(stage, "null-reinit", it).standard_normal(params[key].shape)
            log.warning("null embedding re-initialised at iteration %d", it)
            continue
        params, state = adam_step(params, grads, state)
        report.losses.append(loss)
        report.wall_ms.append(1e3 * (time.perf_counter() - tic))
        if initial is None:
            initial = loss
        above = above + 1 if loss > 10.0 * initial else 0
        if above >= 100:
            raise DivergenceError(f"{stage}: loss above 10x initial for 100 steps (iteration {it})")
        if on_step is not None:
            on_step(it, params)
    report.wall_time = time.perf_counter() - start
    report.checksum = checksum(params)
    return TrainResult(params, report, state)


def pretrain(data: TrainingData, net: ConditionalScoreNet, config: TrainConfig, rng: Rng,
             params: Optional[dict] = None) -> TrainResult:
    """Speaker-conditional denoising score training; conditions are always real embeddings."""
    if config.stage != "pretrain_conditional":
        config = replace(config, stage="pretrain_conditional")
    return _run(net, net.params if params is None else params, data, config, rng, dropout_p=0.0)


def cfg_stage(data: TrainingData, net: ConditionalScoreNet, config: TrainConfig, rng: Rng,
              params: Optional[dict] = None, optimizer: Optional[AdamState] = None) -> TrainResult:
    """Continue training with each sample's embedding swapped for the null embedding w.p. ``dropout_p``."""
    if config.stage != "cfg_stage":
        config = replace(config, stage="cfg_stage")
    return _run(net, net.params if params is None else params, data, config, rng, config.dropout_p, optimizer)


def finetune(
    reference: Sequence[Utterance] | Utterance,
    net: ConditionalScoreNet,
    embedding: np.ndarray,
    config: Optional[TrainConfig] = None,
    rng: Optional[Rng] = None,
    params: Optional[dict] = None,
    optimizer: Optional[AdamState] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> TrainResult:
    """Adapt the score network to one target speaker from its reference clip.

    ``embedding`` is extracted once from the clean reference and held fixed. A
    fresh Adam state is used unless ``config.reset_optimizer`` is False and a
    pre-trained ``optimizer`` is supplied.
    """
    config = config or TrainConfig.for_finetune()
    if config.stage != "finetune":
        config = replace(config, stage="finetune")
    rng = rng or Rng(0)
    data = ReferenceCrops(reference, np.asarray(embedding, dtype=np.float64), crop=config.crop_frames)
    opt = None if config.reset_optimizer else optimizer
    return _run(net, net.params if params is None else params, data, config, rng, 0.0, opt, on_step)
