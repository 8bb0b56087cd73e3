"""Adaptive synthesis: durations -> frame labels -> prior draw -> guided reverse diffusion."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .guidance import GuidanceConfig, GuidanceStep, guided_score
from .numerics import Rng
from .sde import NoiseSchedule, ReverseSamplerConfig, reverse_step, sample_prior
from .toyworld import ToyWorld, Utterance

__all__ = [
    "expand_labels",
    "run_length_encode",
    "VoiceModels",
    "SynthesisRequest",
    "SynthesisResult",
    "StepDiagnostics",
    "SynthesisError",
    "synthesize",
    "ToyEvaluator",
    "gamma_sweep",
    "sweep_csv",
    "DEFAULT_GAMMAS",
]

DEFAULT_GAMMAS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


class SynthesisError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"synthesis failed at reverse step {step}: {cause}")
        self.step = step


def expand_labels(phonemes, durations) -> np.ndarray:
    """Repeat each phoneme by its frame duration."""
    phonemes = np.asarray(phonemes, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if phonemes.shape != durations.shape:
        raise ValueError("one duration per phoneme required")
    if np.any(durations < 1):
        raise ValueError("durations must be at least one frame")
    return np.repeat(phonemes, durations)


def run_length_encode(labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return labels, labels
    starts = np.flatnonzero(np.r_[True, labels[1:] != labels[:-1]])
    return labels[starts], np.diff(np.r_[starts, labels.size])


@dataclass
class VoiceModels:
    """The four trained components a synthesis run needs."""

    score: object  # ScoreModel (ConditionalScoreNet or oracle)
    classifier: object  # PhonemeClassifier-like: frame_logp_grad
    duration: object  # DurationPredictor-like: predict_durations
    encoder: object  # encode_speaker

    def with_score(self, score) -> "VoiceModels":
        return replace(self, score=score)


@dataclass
class SynthesisRequest:
    phonemes: np.ndarray
    reference: Optional[Utterance] = None
    embedding: Optional[np.ndarray] = None
    guidance: GuidanceConfig = GuidanceConfig()
    sampler: ReverseSamplerConfig = ReverseSamplerConfig()
    adapted_model: bool = False
    durations: Optional[np.ndarray] = None  # bypass the duration predictor

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        if self.phonemes.size == 0:
            raise ValueError("phoneme sequence is empty")
        if (self.reference is None) == (self.embedding is None):
            raise ValueError("provide exactly one of reference or embedding")


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    t: float
    score_norm: float
    guidance_norm: float
    skipped: bool


@dataclass
class SynthesisResult:
    frames: np.ndarray
    labels: np.ndarray
    durations: np.ndarray
    embedding: np.ndarray
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    adapted_model: bool = False

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t", "score_norm", "guidance_norm", "skipped"])
        for d in self.diagnostics:
            w.writerow([d.step, repr(d.t), repr(d.score_norm), repr(d.guidance_norm), int(d.skipped)])
        return buf.getvalue()


def synthesize(request: SynthesisRequest, models: VoiceModels, rng: Rng) -> SynthesisResult:
    """Generate frames for ``request.phonemes`` in the reference speaker's voice.

    Zero-shot and adapted runs share this code path; they differ only in which
    score network ``models.score`` holds.
    """
    e = (np.asarray(request.embedding, dtype=np.float64) if request.embedding is not None
         else models.encoder.encode_speaker(request.reference))
    durations = (np.asarray(request.durations, dtype=np.int64) if request.durations is not None
                 else models.duration.predict_durations(request.phonemes, e))
    labels = expand_labels(request.phonemes, durations)
    cfg = request.sampler
    channels = getattr(models.score, "channels", None)
    if channels is None:
        channels = np.asarray(models.score.mean).shape[-1]
    x = sample_prior((labels.size, channels), cfg.temperature, rng.stream("synth", "prior"))
    gen = rng.stream("synth", "steps")
    schedule = getattr(models.score, "schedule", None) or NoiseSchedule()
    diags = []
    n = cfg.steps
    for i in range(n, 0, -1):
        t = i / n
        try:
            s, step = guided_score(x, t, e, labels, models.score, models.classifier, request.guidance)
        except Exception as exc:  # surface which step failed
            raise SynthesisError(n - i, exc) from exc
        diags.append(StepDiagnostics(n - i, t, step.score_norm, step.guidance_norm, step.skipped))
        x = reverse_step(x, t, s, cfg, gen, schedule, add_noise=cfg.noise_at_every_step or i > 1)
    return SynthesisResult(x, labels, durations, e, diags, request.adapted_model)


@dataclass
class ToyEvaluator:
    """Pronunciation and similarity proxies on the toy world.

    Frame error uses the world's Bayes-optimal decoder under the target speaker's
    transform; similarity is the cosine between encoder embeddings.
    """

    world: ToyWorld
    encoder: object

    def frame_error(self, frames: np.ndarray, labels: np.ndarray, speaker: int) -> float:
        return float(np.mean(self.world.decode_frames(frames, speaker) != np.asarray(labels)))

    def similarity(self, frames: np.ndarray, reference) -> float:
        a = self.encoder.encode_speaker(np.asarray(frames))
        b = self.encoder.encode_speaker(reference)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def gamma_sweep(
    request: SynthesisRequest,
    models: VoiceModels,
    evaluator: ToyEvaluator,
    rng: Rng,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    runs: int = 5,
    texts: Optional[Sequence[np.ndarray]] = None,
) -> list[dict]:
    """Average frame error and similarity over ``runs`` generations per speaker scale.

    Every scale reuses the same per-run random streams, so rows differ only
    through the guidance scale.
    """
    if not gammas:
        raise ValueError("empty gamma list")
    if request.reference is None:
        raise ValueError("sweep needs a reference utterance for the similarity proxy")
    texts = list(texts) if texts is not None else [request.phonemes]
    rows = []
    for gamma in gammas:
        fe, sim = [], []
        g = replace(request.guidance, gamma_s=float(gamma))
        for k, text in enumerate(texts):
            for r in range(runs):
                req = replace(request, phonemes=text, guidance=g)
                out = synthesize(req, models, rng.child("sweep", k, r))
                fe.append(evaluator.frame_error(out.frames, out.labels, request.reference.speaker))
                sim.append(evaluator.similarity(out.frames, request.reference))
        rows.append({"gamma_s": float(gamma), "frame_error": float(np.mean(fe)), "similarity": float(np.mean(sim))})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma_s", "frame_error", "similarity"])
    for r in rows:
        w.writerow([repr(r["gamma_s"]), repr(r["frame_error"]), repr(r["similarity"])])
    return buf.getvalue()
